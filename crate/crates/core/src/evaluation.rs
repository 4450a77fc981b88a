//! Per-class Dice on reassembled volumes, cross-validation aggregation and
//! the ablation results table.

use ndarray::{s, Array3, Array4, ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{extract_slices, label, Case, SliceOptions};
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::training::AblationTag;

/// Slices per forward pass during inference.
const PREDICT_BATCH: usize = 8;

/// `2|a ∧ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice<D: Dimension>(pred: ArrayView<'_, bool, D>, gt: ArrayView<'_, bool, D>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred={:?} gt={:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut sum) = (0usize, 0usize);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        sum += p as usize + g as usize;
    });
    Ok(if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    })
}

/// How the penumbra ground truth is defined for scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenumbraMode {
    /// Predicted class 1 against encoded label 1 (core carved out).
    #[default]
    Exclusive,
    /// Predicted classes 1 or 2 against the raw penumbra mask.
    Inclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub case_id: String,
    pub penumbra: f64,
    pub core: f64,
}

impl DiceScores {
    pub fn mean(&self) -> f64 {
        0.5 * (self.penumbra + self.core)
    }
}

/// Anything that maps a case to a label volume of the same shape.
pub trait Predictor {
    fn predict(&mut self, case: &Case) -> Result<Array3<u8>>;
}

impl Predictor for Segmenter {
    fn predict(&mut self, case: &Case) -> Result<Array3<u8>> {
        predict_case(self, case)
    }
}

/// Returns each case's own labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&mut self, case: &Case) -> Result<Array3<u8>> {
        Ok(case.labels())
    }
}

/// Slice-wise argmax over logits, cropped and restacked to the case shape.
/// Runs in eval mode and restores the previous mode afterwards.
pub fn predict_case(segmenter: &mut Segmenter, case: &Case) -> Result<Array3<u8>> {
    let samples = extract_slices(case, &SliceOptions::default());
    let mut out = Array3::<u8>::zeros(case.shape());
    let was_training = segmenter.is_training();
    segmenter.set_training(false);
    let result = (|| {
        for chunk in samples.chunks(PREDICT_BATCH) {
            let (c, h, w) = chunk[0].input.dim();
            let mut inputs = Array4::<f32>::zeros((chunk.len(), c, h, w));
            for (i, s) in chunk.iter().enumerate() {
                inputs.index_axis_mut(Axis(0), i).assign(&s.input);
            }
            let logits = segmenter.forward(&inputs)?;
            for (i, s) in chunk.iter().enumerate() {
                let classes = argmax_classes(logits.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), s.slice_index)
                    .assign(&s.padding.crop(classes.view()));
            }
        }
        Ok(())
    })();
    segmenter.set_training(was_training);
    result.map(|()| out)
}

/// Per-pixel argmax over the class axis; ties go to the lower class.
fn argmax_classes(logits: ndarray::ArrayView3<'_, f32>) -> ndarray::Array2<u8> {
    let (c, h, w) = logits.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, y, x]] > logits[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Penumbra and core Dice of a predicted volume against a case.
pub fn score_case(pred: &Array3<u8>, case: &Case, mode: PenumbraMode) -> Result<DiceScores> {
    let labels = case.labels();
    let core = dice(
        pred.mapv(|v| v == label::CORE).view(),
        labels.mapv(|v| v == label::CORE).view(),
    )?;
    let penumbra = match mode {
        PenumbraMode::Exclusive => dice(
            pred.mapv(|v| v == label::PENUMBRA).view(),
            labels.mapv(|v| v == label::PENUMBRA).view(),
        )?,
        PenumbraMode::Inclusive => dice(
            pred.mapv(|v| v != label::BACKGROUND).view(),
            case.penumbra_mask.data.mapv(|v| v > 0.5).view(),
        )?,
    };
    Ok(DiceScores {
        case_id: case.case_id.clone(),
        penumbra,
        core,
    })
}

pub fn evaluate_fold(
    predictor: &mut impl Predictor,
    cases: &[Case],
    mode: PenumbraMode,
) -> Result<Vec<DiceScores>> {
    cases
        .iter()
        .map(|case| {
            let pred = predictor.predict(case)?;
            if pred.dim() != case.labels().dim() {
                return Err(Error::ShapeError(format!(
                    "prediction {:?} for case {} has shape unlike {:?}",
                    pred.dim(),
                    case.case_id,
                    case.shape()
                )));
            }
            score_case(&pred, case, mode)
        })
        .collect()
}

/// Mean penumbra and core Dice over a set of cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDice {
    pub fold: usize,
    pub penumbra: f64,
    pub core: f64,
    pub cases: Vec<DiceScores>,
}

impl FoldDice {
    pub fn from_cases(fold: usize, cases: Vec<DiceScores>) -> Self {
        let n = cases.len().max(1) as f64;
        FoldDice {
            fold,
            penumbra: cases.iter().map(|c| c.penumbra).sum::<f64>() / n,
            core: cases.iter().map(|c| c.core).sum::<f64>() / n,
            cases,
        }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.penumbra + self.core)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub ablation: AblationTag,
    pub folds: Vec<FoldDice>,
    pub mean_penumbra: f64,
    pub mean_core: f64,
}

impl CvReport {
    /// Grand means are the arithmetic mean of fold means.
    pub fn from_folds(ablation: AblationTag, folds: Vec<FoldDice>) -> Self {
        let n = folds.len().max(1) as f64;
        CvReport {
            ablation,
            mean_penumbra: folds.iter().map(|f| f.penumbra).sum::<f64>() / n,
            mean_core: folds.iter().map(|f| f.core).sum::<f64>() / n,
            folds,
        }
    }

    /// A report carrying only grand means, e.g. published figures.
    pub fn summary(ablation: AblationTag, penumbra: f64, core: f64) -> Self {
        CvReport {
            ablation,
            folds: Vec::new(),
            mean_penumbra: penumbra,
            mean_core: core,
        }
    }
}

/// Markdown table with one column per ablation (BL1…BL7, Proposed) and rows
/// for penumbra and core. Tags without a report show "—"; when a tag occurs
/// more than once the first report wins.
pub fn render_table(reports: &[CvReport]) -> String {
    let find = |t: AblationTag| reports.iter().find(|r| r.ablation == t);
    let cell = |t: AblationTag, f: fn(&CvReport) -> f64| {
        find(t).map_or_else(|| "—".to_string(), |r| format!("{:.3}", f(r)))
    };
    type Row = (&'static str, fn(&CvReport) -> f64);
    let rows: [Row; 2] = [("Penumbra", |r| r.mean_penumbra), ("Core", |r| r.mean_core)];

    let mut widths = vec![rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0)];
    for t in AblationTag::ALL {
        widths.push(t.column().len().max(5));
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!(" {c:<w$} "))
            .collect();
        format!("|{}|\n", padded.join("|"))
    };

    let mut out = String::new();
    let mut header = vec![String::new()];
    header.extend(AblationTag::ALL.iter().map(|t| t.column().to_string()));
    out += &line(header);
    out += &format!(
        "|{}|\n",
        widths
            .iter()
            .map(|&w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    );
    for (name, f) in rows {
        let mut cells = vec![name.to_string()];
        cells.extend(AblationTag::ALL.iter().map(|&t| cell(t, f)));
        out += &line(cells);
    }
    out
}

/// Binary mask of one class on one slice of a predicted volume.
pub fn class_mask(pred: &Array3<u8>, class: u8, slice: usize) -> ndarray::Array2<bool> {
    pred.slice(s![slice, .., ..]).mapv(|v| v == class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_case;
    use ndarray::{arr1, Array1};

    #[test]
    fn dice_counting_example() {
        let p = arr1(&[true, true, true, false, false, false]);
        let g = arr1(&[true, true, false, true, true, false]);
        assert!((dice(p.view(), g.view()).unwrap() - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn dice_edge_cases() {
        let e = Array1::from_elem(4, false);
        let f = Array1::from_elem(4, true);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(dice(f.view(), f.view()).unwrap(), 1.0);
        assert_eq!(dice(e.view(), f.view()).unwrap(), 0.0);
        let a = arr1(&[true, false, true, false]);
        let b = arr1(&[false, true, false, true]);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
        assert!(matches!(
            dice(e.view(), Array1::from_elem(3, false).view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ground_truth_scores_one() {
        let cases = vec![
            synth_case(1, [3, 64, 64]).unwrap(),
            synth_case(2, [3, 64, 64]).unwrap(),
        ];
        for mode in [PenumbraMode::Exclusive, PenumbraMode::Inclusive] {
            for s in evaluate_fold(&mut GroundTruth, &cases, mode).unwrap() {
                assert_eq!((s.penumbra, s.core), (1.0, 1.0));
            }
        }
    }

    struct Background;
    impl Predictor for Background {
        fn predict(&mut self, case: &Case) -> Result<Array3<u8>> {
            Ok(Array3::zeros(case.shape()))
        }
    }

    #[test]
    fn background_scores_zero() {
        let cases = vec![synth_case(3, [3, 64, 64]).unwrap()];
        let s = &evaluate_fold(&mut Background, &cases, PenumbraMode::Exclusive).unwrap()[0];
        assert_eq!((s.penumbra, s.core), (0.0, 0.0));
    }

    #[test]
    fn grand_mean_is_mean_of_fold_means() {
        let fold = |i, p: &[f64], c: &[f64]| {
            FoldDice::from_cases(
                i,
                p.iter()
                    .zip(c)
                    .map(|(&p, &c)| DiceScores {
                        case_id: String::new(),
                        penumbra: p,
                        core: c,
                    })
                    .collect(),
            )
        };
        let r = CvReport::from_folds(
            AblationTag::Bl1,
            vec![fold(0, &[0.2, 0.4], &[1.0, 0.0]), fold(1, &[0.9], &[0.3])],
        );
        assert!((r.mean_penumbra - (0.3 + 0.9) / 2.0).abs() < 1e-12);
        assert!((r.mean_core - (0.5 + 0.3) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_tags_render_dash() {
        let t = render_table(&[CvReport::summary(AblationTag::Bl3, 0.5, 0.25)]);
        let rows: Vec<&str> = t.lines().collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[2].contains("0.500"));
        assert_eq!(rows[3].matches('—').count(), 7);
    }
}
