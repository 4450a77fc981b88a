use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::data::{collate, extract_slices, Case, FoldSplit, SliceSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_fold, FoldDice, PenumbraMode};
use crate::losses::LossReport;
use crate::model::{save_checkpoint, CheckpointMeta};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Iteration {
        fold: usize,
        epoch: usize,
        iteration: usize,
        #[serde(flatten)]
        losses: LossReport,
    },
    Epoch {
        fold: usize,
        epoch: usize,
        iteration: usize,
        val_penumbra: f64,
        val_core: f64,
        /// Seconds since the fold started; excluded from reproducibility checks.
        wall_clock: f64,
    },
}

/// Records of one fold, in the order they were written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn iterations(&self) -> impl Iterator<Item = (usize, &LossReport)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration {
                iteration, losses, ..
            } => Some((*iteration, losses)),
            _ => None,
        })
    }

    /// (penumbra, core) validation Dice per epoch.
    pub fn validation(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch {
                    val_penumbra,
                    val_core,
                    ..
                } => Some((*val_penumbra, *val_core)),
                _ => None,
            })
            .collect()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::unreadable(path, e))?;
        Ok(TrainLog { records })
    }
}

/// Which folds to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    All,
    One(usize),
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    /// Validation Dice of the selected checkpoint.
    pub best: FoldDice,
    /// Validation Dice after the last epoch.
    pub last: FoldDice,
    pub log: TrainLog,
}

/// `<checkpoint_dir>/<TAG>/fold<i>`.
pub fn fold_dir(cfg: &TrainConfig, fold: usize) -> PathBuf {
    cfg.checkpoint_dir
        .join(cfg.ablation.name())
        .join(format!("fold{fold}"))
}

/// Trains one model per selected fold on the other folds' cases and keeps
/// the checkpoint with the best mean validation Dice.
pub fn train(
    cases: &[Case],
    folds: &FoldSplit,
    cfg: &TrainConfig,
    selection: FoldSelection,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    let by_id: HashMap<&str, &Case> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let indices: Vec<usize> = match selection {
        FoldSelection::All => (0..folds.k()).collect(),
        FoldSelection::One(i) if i < folds.k() => vec![i],
        FoldSelection::One(i) => {
            return Err(Error::InvalidConfig(format!(
                "fold {i} out of range for {} folds",
                folds.k()
            )))
        }
    };
    indices
        .into_iter()
        .map(|i| {
            let lookup = |ids: &[String]| -> Result<Vec<Case>> {
                ids.iter()
                    .map(|id| {
                        by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| {
                            Error::Data(format!("case {id} listed in folds but not loaded"))
                        })
                    })
                    .collect()
            };
            let train_cases = lookup(&folds.train_ids(i))?;
            let val_cases = lookup(folds.validation_ids(i))?;
            train_fold(&train_cases, &val_cases, i, cfg)
        })
        .collect()
}

/// Trains on `train_cases`, validating on `val_cases` after each epoch.
/// The two sets must not share a case id.
pub fn train_fold(
    train_cases: &[Case],
    val_cases: &[Case],
    fold: usize,
    cfg: &TrainConfig,
) -> Result<FoldResult> {
    let train_ids: BTreeSet<&str> = train_cases.iter().map(|c| c.case_id.as_str()).collect();
    if let Some(c) = val_cases
        .iter()
        .find(|c| train_ids.contains(c.case_id.as_str()))
    {
        return Err(Error::Data(format!(
            "fold {fold}: case {} is in both training and validation",
            c.case_id
        )));
    }
    let opts = cfg.slice_options()?;
    let samples: Vec<SliceSample> = train_cases
        .iter()
        .flat_map(|c| extract_slices(c, &opts))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("fold {fold}: no training slices")));
    }

    let dir = fold_dir(cfg, fold);
    fs::create_dir_all(&dir)?;
    let checkpoint = dir.join("best.safetensors");
    let log_path = dir.join("train_log.jsonl");
    let mut sink = BufWriter::new(File::create(&log_path)?);
    let mut log = TrainLog::default();
    let mut emit = |record: LogRecord, log: &mut TrainLog| -> Result<()> {
        serde_json::to_writer(&mut sink, &record).map_err(|e| Error::Io(e.into()))?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        log.records.push(record);
        Ok(())
    };

    let seed = cfg.seed.wrapping_add(fold as u64);
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let start = Instant::now();
    let mut best: Option<(usize, FoldDice)> = None;
    let mut last = None;
    let val_ids: Vec<String> = val_cases.iter().map(|c| c.case_id.clone()).collect();

    let capped = |t: &Trainer| cfg.max_iterations > 0 && t.iteration() >= cfg.max_iterations;
    for epoch in 0..cfg.epochs {
        if capped(&trainer) {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if capped(&trainer) {
                break;
            }
            let batch = collate(&chunk.iter().map(|&j| &samples[j]).collect::<Vec<_>>());
            let iteration = trainer.iteration();
            let losses = trainer.train_step(&batch).map_err(|e| match e {
                Error::NonFiniteLoss { term, context } => Error::NonFiniteLoss {
                    term,
                    context: format!("fold {fold}, epoch {epoch}, {context}"),
                },
                other => other,
            })?;
            emit(
                LogRecord::Iteration {
                    fold,
                    epoch,
                    iteration,
                    losses,
                },
                &mut log,
            )?;
        }

        let scores = evaluate_fold(&mut trainer.segmenter, val_cases, PenumbraMode::Exclusive)?;
        let dice = FoldDice::from_cases(fold, scores);
        emit(
            LogRecord::Epoch {
                fold,
                epoch,
                iteration: trainer.iteration(),
                val_penumbra: dice.penumbra,
                val_core: dice.core,
                wall_clock: start.elapsed().as_secs_f64(),
            },
            &mut log,
        )?;
        if best.as_ref().is_none_or(|(_, b)| dice.mean() > b.mean()) {
            let meta = CheckpointMeta {
                discriminator: trainer
                    .discriminators
                    .as_ref()
                    .map(|d| d.base_config().clone()),
                ablation: Some(cfg.ablation.name().to_string()),
                fold: Some(fold),
                validation_ids: val_ids.clone(),
                validation_dice: Some(dice.mean()),
                boundary_factor: Some(cfg.boundary_factor),
                ..CheckpointMeta::for_segmenter(trainer.segmenter.config().clone())
            };
            save_checkpoint(
                &checkpoint,
                &mut trainer.segmenter,
                trainer.discriminators.as_mut(),
                &meta,
            )?;
            best = Some((epoch, dice.clone()));
        }
        last = Some(dice);
    }

    let (best_epoch, best) = best.ok_or_else(|| {
        Error::InvalidConfig("training stopped before the first validation".into())
    })?;
    Ok(FoldResult {
        fold,
        checkpoint,
        log_path,
        best_epoch,
        best,
        last: last.expect("set with best"),
        log,
    })
}
