//! Python bindings, importable as `strokeseg`.
//!
//! Arrays cross the boundary as NumPy arrays: volumes are `(D, H, W)`,
//! per-class maps `(C, H, W)` and network inputs `(B, C, H, W)`.

use std::path::PathBuf;

use numpy::{
    IntoPyArray, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3,
    PyReadonlyArray4, PyReadonlyArrayDyn,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use strokeseg::data::{self, collate, extract_slices, Case, Modality};
use strokeseg::evaluation::{self, CvReport, PenumbraMode};
use strokeseg::losses::{self, ClassSelection, LossReport, ScoreLoss};
use strokeseg::model::{self, CheckpointMeta, SegmenterConfig};
use strokeseg::morphology::{self, StructuringElement, WeightSpec};
use strokeseg::training::{self, AblationTag, TrainConfig};
use strokeseg::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(_) | Error::UnreadableFile { .. } | Error::MissingModality(_) => {
            PyIOError::new_err(err.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn penumbra_mode(name: &str) -> PyResult<PenumbraMode> {
    match name {
        "exclusive" => Ok(PenumbraMode::Exclusive),
        "inclusive" => Ok(PenumbraMode::Inclusive),
        other => Err(PyValueError::new_err(format!(
            "penumbra must be 'exclusive' or 'inclusive', got '{other}'"
        ))),
    }
}

/// One subject: three perfusion/diffusion volumes and two lesion masks.
#[pyclass(name = "Case", module = "strokeseg", from_py_object)]
#[derive(Clone)]
pub struct PyCase {
    inner: Case,
}

#[pymethods]
impl PyCase {
    /// Loads a case directory (NIfTI or rawf32 files).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCase {
            inner: data::load_case(&path).map_err(to_py)?,
        })
    }

    /// Writes the case in rawf32 layout under `dir/<case_id>` and returns that path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        data::write_case(&dir, &self.inner).map_err(to_py)
    }

    #[getter]
    fn case_id(&self) -> String {
        self.inner.case_id.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.shape();
        (d, h, w)
    }

    /// Volume of one modality: "TMax", "TTP" or "DWI".
    fn modality<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let m: Modality = name.parse().map_err(to_py)?;
        Ok(self.inner.modality(m).data.clone().into_pyarray(py))
    }

    /// Encoded labels: 0 background, 1 penumbra, 2 core.
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<u8>> {
        self.inner.labels().into_pyarray(py)
    }

    #[getter]
    fn penumbra_mask<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.penumbra_mask.data.clone().into_pyarray(py)
    }

    #[getter]
    fn core_mask<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.core_mask.data.clone().into_pyarray(py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Case(case_id={:?}, shape={:?})",
            self.inner.case_id,
            self.inner.shape()
        )
    }
}

fn scores_dict<'py>(py: Python<'py>, s: &evaluation::DiceScores) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("case_id", &s.case_id)?;
    d.set_item("penumbra", s.penumbra)?;
    d.set_item("core", s.core)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, value) in r.entries() {
        d.set_item(name, value)?;
    }
    Ok(d)
}

/// Residual encoder-decoder segmenter.
#[pyclass(name = "Segmenter", module = "strokeseg", unsendable)]
pub struct PySegmenter {
    inner: model::Segmenter,
}

#[pymethods]
impl PySegmenter {
    #[new]
    #[pyo3(signature = (encoder_widths=None, residual=true, batch_norm=true, seed=0))]
    fn new(
        encoder_widths: Option<Vec<usize>>,
        residual: bool,
        batch_norm: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = SegmenterConfig {
            residual,
            batch_norm,
            ..Default::default()
        };
        if let Some(w) = encoder_widths {
            cfg.encoder_widths = w;
        }
        Ok(PySegmenter {
            inner: model::build_segmenter(&cfg, seed).map_err(to_py)?,
        })
    }

    /// Loads the segmenter stored in a checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySegmenter {
            inner: model::load_checkpoint(&path).map_err(to_py)?.segmenter,
        })
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMeta::for_segmenter(self.inner.config().clone());
        model::save_checkpoint(&path, &mut self.inner, None, &meta).map_err(to_py)
    }

    #[getter]
    fn training(&self) -> bool {
        self.inner.is_training()
    }

    #[pyo3(signature = (mode=true))]
    fn train(&mut self, mode: bool) {
        self.inner.set_training(mode);
    }

    fn eval(&mut self) {
        self.inner.set_training(false);
    }

    fn num_parameters(&mut self) -> usize {
        use strokeseg::nn::Module;
        self.inner.num_trainable()
    }

    /// Logits `(B, 3, H, W)` for inputs `(B, 3, H, W)`; H and W must be multiples of 32.
    fn forward<'py>(
        &mut self,
        py: Python<'py>,
        x: PyReadonlyArray4<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let x = x.as_array().to_owned();
        Ok(self.inner.forward(&x).map_err(to_py)?.into_pyarray(py))
    }

    /// Predicted label volume with the case's shape.
    fn predict<'py>(
        &mut self,
        py: Python<'py>,
        case: &PyCase,
    ) -> PyResult<Bound<'py, PyArray3<u8>>> {
        Ok(evaluation::predict_case(&mut self.inner, &case.inner)
            .map_err(to_py)?
            .into_pyarray(py))
    }

    /// Per-case Dice as a list of dicts.
    #[pyo3(signature = (cases, penumbra="exclusive"))]
    fn evaluate<'py>(
        &mut self,
        py: Python<'py>,
        cases: Vec<PyCase>,
        penumbra: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cases: Vec<Case> = cases.into_iter().map(|c| c.inner).collect();
        let scores = evaluation::evaluate_fold(&mut self.inner, &cases, penumbra_mode(penumbra)?)
            .map_err(to_py)?;
        scores.iter().map(|s| scores_dict(py, s)).collect()
    }
}

/// Segmenter plus (for adversarial ablations) the three critics.
#[pyclass(name = "Trainer", module = "strokeseg", unsendable)]
pub struct PyTrainer {
    inner: training::Trainer,
    slice_options: data::SliceOptions,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (ablation="PROPOSED", lr=1e-4, encoder_widths=None, disc_base_width=64, boundary_factor=10.0, seed=0))]
    fn new(
        ablation: &str,
        lr: f32,
        encoder_widths: Option<Vec<usize>>,
        disc_base_width: usize,
        boundary_factor: f32,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = TrainConfig {
            ablation: ablation.parse().map_err(to_py)?,
            lr_segmenter: lr,
            lr_discriminators: lr,
            disc_base_width,
            boundary_factor,
            seed,
            ..Default::default()
        };
        if let Some(w) = encoder_widths {
            cfg.encoder_widths = w;
        }
        Ok(PyTrainer {
            inner: training::Trainer::new(&cfg, seed).map_err(to_py)?,
            slice_options: cfg.slice_options().map_err(to_py)?,
        })
    }

    #[getter]
    fn adversarial(&self) -> bool {
        self.inner.is_adversarial()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration()
    }

    /// One optimizer step on every slice of the given cases; returns the loss report.
    fn step<'py>(&mut self, py: Python<'py>, cases: Vec<PyCase>) -> PyResult<Bound<'py, PyDict>> {
        let samples: Vec<_> = cases
            .iter()
            .flat_map(|c| extract_slices(&c.inner, &self.slice_options))
            .collect();
        if samples.is_empty() {
            return Err(PyValueError::new_err("no slices to train on"));
        }
        let batch = collate(&samples.iter().collect::<Vec<_>>());
        let report = self.inner.train_step(&batch).map_err(to_py)?;
        report_dict(py, &report)
    }

    fn predict<'py>(
        &mut self,
        py: Python<'py>,
        case: &PyCase,
    ) -> PyResult<Bound<'py, PyArray3<u8>>> {
        Ok(
            evaluation::predict_case(&mut self.inner.segmenter, &case.inner)
                .map_err(to_py)?
                .into_pyarray(py),
        )
    }

    #[pyo3(signature = (cases, penumbra="exclusive"))]
    fn evaluate<'py>(
        &mut self,
        py: Python<'py>,
        cases: Vec<PyCase>,
        penumbra: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cases: Vec<Case> = cases.into_iter().map(|c| c.inner).collect();
        let scores =
            evaluation::evaluate_fold(&mut self.inner.segmenter, &cases, penumbra_mode(penumbra)?)
                .map_err(to_py)?;
        scores.iter().map(|s| scores_dict(py, s)).collect()
    }
}

/// Deterministic phantom case with shape `(D, H, W)`.
#[pyfunction]
#[pyo3(signature = (seed, shape=(8, 96, 96)))]
fn synth_case(seed: u64, shape: (usize, usize, usize)) -> PyResult<PyCase> {
    Ok(PyCase {
        inner: data::synth_case(seed, [shape.0, shape.1, shape.2]).map_err(to_py)?,
    })
}

/// Label volume from penumbra and core masks; core takes precedence.
#[pyfunction]
fn encode_labels<'py>(
    py: Python<'py>,
    penumbra: PyReadonlyArray3<'py, f32>,
    core: PyReadonlyArray3<'py, f32>,
) -> PyResult<Bound<'py, PyArray3<u8>>> {
    Ok(data::encode_labels(penumbra.as_array(), core.as_array())
        .map_err(to_py)?
        .into_pyarray(py))
}

/// Dilation minus erosion with a 3x3 square, repeated `iterations` times.
#[pyfunction]
#[pyo3(signature = (mask, iterations=1))]
fn boundary_band<'py>(
    py: Python<'py>,
    mask: PyReadonlyArray2<'py, bool>,
    iterations: usize,
) -> Bound<'py, PyArray2<bool>> {
    morphology::boundary_band(mask.as_array(), &StructuringElement::square3(), iterations)
        .into_pyarray(py)
}

/// Per-pixel loss weights: `boundary_factor` on lesion boundaries, 1 elsewhere.
#[pyfunction]
#[pyo3(signature = (labels, boundary_factor=10.0, iterations=1))]
fn weight_map<'py>(
    py: Python<'py>,
    labels: PyReadonlyArray2<'py, u8>,
    boundary_factor: f32,
    iterations: usize,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let spec = WeightSpec::new(boundary_factor, iterations).map_err(to_py)?;
    Ok(morphology::weight_map(labels.as_array(), &spec).into_pyarray(py))
}

/// Dice overlap of two boolean masks; two empty masks score 1.
#[pyfunction]
fn dice(pred: PyReadonlyArrayDyn<'_, bool>, gt: PyReadonlyArrayDyn<'_, bool>) -> PyResult<f64> {
    evaluation::dice(pred.as_array(), gt.as_array()).map_err(to_py)
}

/// Seeded k-fold split of case ids.
#[pyfunction]
#[pyo3(signature = (case_ids, k=3, seed=0))]
fn make_folds(case_ids: Vec<String>, k: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
    Ok(data::make_folds(&case_ids, k, seed).map_err(to_py)?.folds)
}

/// `(value, dlogits)` of mean pixel cross-entropy.
#[pyfunction]
fn cross_entropy<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray3<'py, f64>,
    labels: PyReadonlyArray2<'py, u8>,
) -> (f64, Bound<'py, PyArray3<f64>>) {
    let l = losses::cross_entropy(logits.as_array(), labels.as_array());
    (l.value, l.grad.into_pyarray(py))
}

/// `(value, dlog_probs)` of the boundary-weighted NLL.
#[pyfunction]
fn boundary_nll<'py>(
    py: Python<'py>,
    log_probs: PyReadonlyArray3<'py, f64>,
    labels: PyReadonlyArray2<'py, u8>,
    weights: PyReadonlyArray2<'py, f32>,
) -> (f64, Bound<'py, PyArray3<f64>>) {
    let l = losses::boundary_nll(log_probs.as_array(), labels.as_array(), weights.as_array());
    (l.value, l.grad.into_pyarray(py))
}

/// `(value, dprobs)` of Lovász-Softmax; `classes` is "present" or "all".
#[pyfunction]
#[pyo3(signature = (probs, labels, classes="present"))]
fn lovasz_softmax<'py>(
    py: Python<'py>,
    probs: PyReadonlyArray3<'py, f64>,
    labels: PyReadonlyArray2<'py, u8>,
    classes: &str,
) -> PyResult<(f64, Bound<'py, PyArray3<f64>>)> {
    let sel = match classes {
        "present" => ClassSelection::Present,
        "all" => ClassSelection::All,
        other => {
            return Err(PyValueError::new_err(format!(
                "classes must be 'present' or 'all', got '{other}'"
            )))
        }
    };
    let l = losses::lovasz_softmax(probs.as_array(), labels.as_array(), sel);
    Ok((l.value, l.grad.into_pyarray(py)))
}

fn score_loss(
    real: &[f64],
    fake: &[f64],
    f: fn(&[f64], &[f64]) -> ScoreLoss,
) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(PyValueError::new_err("score vectors must be non-empty"));
    }
    let l = f(real, fake);
    Ok((l.value, l.d_real, l.d_fake))
}

/// `(value, dreal, dfake)` of the relativistic-average critic loss.
#[pyfunction]
fn ragan_d_loss(real: Vec<f64>, fake: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    score_loss(&real, &fake, losses::ragan_d_loss)
}

/// `(value, dreal, dfake)` of the relativistic-average generator loss.
#[pyfunction]
fn ragan_g_loss(real: Vec<f64>, fake: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    score_loss(&real, &fake, losses::ragan_g_loss)
}

/// `(residual, adversarial, extra_losses)` for an ablation tag.
#[pyfunction]
fn ablation_flags(tag: &str) -> PyResult<(bool, bool, bool)> {
    let f = training::ablation_flags(tag).map_err(to_py)?;
    Ok((f.residual, f.adversarial, f.extra_losses))
}

/// Markdown table from `{tag: (penumbra, core)}`.
#[pyfunction]
fn render_table(results: std::collections::HashMap<String, (f64, f64)>) -> PyResult<String> {
    let reports = results
        .into_iter()
        .map(|(tag, (p, c))| {
            Ok(CvReport::summary(
                tag.parse::<AblationTag>().map_err(to_py)?,
                p,
                c,
            ))
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(evaluation::render_table(&reports))
}

#[pymodule]
#[pyo3(name = "strokeseg")]
fn strokeseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCase>()?;
    m.add_class::<PySegmenter>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth_case, m)?)?;
    m.add_function(wrap_pyfunction!(encode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_band, m)?)?;
    m.add_function(wrap_pyfunction!(weight_map, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_nll, m)?)?;
    m.add_function(wrap_pyfunction!(lovasz_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(ragan_d_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ragan_g_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_flags, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    Ok(())
}
