//! The `strokeseg` command-line tool.
//!
//! Configuration comes from a TOML file with `[data]` and `[train]`
//! sections; command-line flags override individual keys. Exit codes are
//! 0 on success, 2 for configuration errors, 3 for data errors and 4 for
//! numeric failures.

mod config;
mod overlay;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    load_case, make_folds, synth_case, write_case, write_manifest, write_rawf32, Dataset,
    FoldSplit, Modality, Volume, DATA_ROOT_ENV,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_fold, predict_case, render_table, CvReport, FoldDice, PenumbraMode,
};
use crate::model::load_checkpoint;
use crate::training::{train, AblationTag, FoldSelection};

pub use config::{DataConfig, RunConfig};
pub use overlay::{overlay_name, render_overlay, write_overlays, CORE_COLOR, PENUMBRA_COLOR};

#[derive(Debug, Parser)]
#[command(
    name = "strokeseg",
    version,
    about = "Ischaemic stroke lesion segmentation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom cases and a manifest.
    Synth(SynthArgs),
    /// Print (or write) a k-fold split of a manifest's cases as JSON.
    Folds(FoldsArgs),
    /// Train one or all ablations on one or all folds.
    Train(TrainArgs),
    /// Score checkpoints on their held-out cases.
    Eval(EvalArgs),
    /// Predict a label volume for one case directory.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of cases to generate.
    #[arg(long, short = 'n', default_value_t = 12)]
    pub n_cases: usize,
    /// Volume shape as D,H,W (H and W at least 64).
    #[arg(long, value_parser = parse_shape, default_value = "8,96,96")]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives one directory per case and manifest.txt.
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    /// Manifest listing case ids, one per line.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, short = 'k', default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the split here instead of stdout.
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}

/// Keys shared by commands that read a run config.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML run config; flags below override its keys.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Manifest listing case ids (overrides data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Root holding the case directories (overrides data.root and the
    /// STROKESEG_DATA_ROOT environment variable).
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Ablation tag (BL1..BL7, PROPOSED) or `all`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Fold index or `all`.
    #[arg(long, default_value = "all")]
    pub fold: String,
    /// Number of folds (overrides data.folds).
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop each fold after this many steps (0 = no cap).
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Learning rate for segmenter and critics alike.
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Encoder widths as eight comma-separated integers.
    #[arg(long, value_delimiter = ',')]
    pub encoder_widths: Option<Vec<usize>>,
    /// Width of the first critic layer.
    #[arg(long)]
    pub disc_base_width: Option<usize>,
    /// Boundary band weight factor.
    #[arg(long)]
    pub boundary_factor: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint files or run directories (searched for best.safetensors).
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Tag for checkpoints that do not record one.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Penumbra scoring: exclusive or inclusive.
    #[arg(long)]
    pub penumbra: Option<String>,
    /// Also print the Markdown results table.
    #[arg(long)]
    pub table: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the case's modality files.
    #[arg(long)]
    pub case_dir: PathBuf,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    /// Also write one PNG per slice with predicted lesion outlines.
    #[arg(long)]
    pub overlay: bool,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{d}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into()
        .map_err(|d: Vec<usize>| format!("expected D,H,W, got {} values", d.len()))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a.n_cases, a.shape, a.seed, &a.out).map(|_| ()),
        Command::Folds(a) => cmd_folds(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
    }
}

/// Writes `n_cases` phantom cases named `case_000`, `case_001`, … and
/// returns their ids.
pub fn cmd_synth(n_cases: usize, shape: [usize; 3], seed: u64, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let mut case = synth_case(rng.next_u64(), shape)?;
        case.case_id = format!("case_{i:03}");
        write_case(out, &case)?;
        ids.push(case.case_id);
    }
    write_manifest(&out.join("manifest.txt"), &ids)?;
    info!("wrote {n_cases} case(s) to {}", out.display());
    Ok(ids)
}

fn cmd_folds(a: &FoldsArgs) -> Result<()> {
    let ids = crate::data::read_manifest(&a.manifest)?;
    let split = make_folds(&ids, a.k, a.seed)?;
    let json = serde_json::to_string_pretty(&split).expect("serializable");
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn load_run_config(d: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &d.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &d.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(r) = &d.data_root {
        cfg.data.root = Some(r.clone());
    }
    Ok(cfg)
}

fn parse_tags(spec: &str) -> Result<Vec<AblationTag>> {
    if spec.eq_ignore_ascii_case("all") {
        Ok(AblationTag::ALL.to_vec())
    } else {
        Ok(vec![spec.parse()?])
    }
}

/// Effective run config for `train`, with flag overrides applied.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = load_run_config(&a.data)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.max_iterations {
        t.max_iterations = v;
    }
    if let Some(v) = a.lr {
        t.lr_segmenter = v;
        t.lr_discriminators = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = &a.checkpoint_dir {
        t.checkpoint_dir = v.clone();
    }
    if let Some(v) = &a.encoder_widths {
        t.encoder_widths = v.clone();
    }
    if let Some(v) = a.disc_base_width {
        t.disc_base_width = v;
    }
    if let Some(v) = a.boundary_factor {
        t.boundary_factor = v;
    }
    if let Some(v) = a.folds {
        cfg.data.folds = v;
    }
    if let Some(tag) = &a.ablation {
        if let [one] = parse_tags(tag)?[..] {
            cfg.train.ablation = one;
        }
    }
    cfg.validate(true)?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<crate::data::Case>)> {
    let dataset = Dataset::from_manifest(cfg.manifest()?, cfg.data.root.as_deref())?;
    let cases = dataset.load_all(&dataset.case_ids)?;
    Ok((dataset, cases))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, json + "\n")?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    eprintln!(
        "# effective config\n{}# end effective config",
        cfg.to_toml()
    );
    let tags = match &a.ablation {
        Some(spec) => parse_tags(spec)?,
        None => vec![cfg.train.ablation],
    };
    let (dataset, cases) = load_dataset(&cfg)?;
    let folds = make_folds(&dataset.case_ids, cfg.data.folds, cfg.data.fold_seed)?;
    let selection = if a.fold.eq_ignore_ascii_case("all") {
        FoldSelection::All
    } else {
        let i = a.fold.parse().map_err(|_| {
            Error::Config(format!(
                "--fold expects an index or `all`, got `{}`",
                a.fold
            ))
        })?;
        if i >= folds.k() {
            return Err(Error::Config(format!(
                "fold {i} out of range for {} folds",
                folds.k()
            )));
        }
        FoldSelection::One(i)
    };
    write_json(&cfg.train.checkpoint_dir.join("folds.json"), &folds)?;

    let mut reports = Vec::new();
    for tag in tags {
        let mut train_cfg = cfg.train.clone();
        train_cfg.ablation = tag;
        let results = train(&cases, &folds, &train_cfg, selection)?;
        for r in &results {
            info!(
                "{tag} fold {}: best epoch {} penumbra {:.4} core {:.4} -> {}",
                r.fold,
                r.best_epoch,
                r.best.penumbra,
                r.best.core,
                r.checkpoint.display()
            );
        }
        if selection == FoldSelection::All {
            let report =
                CvReport::from_folds(tag, results.iter().map(|r| r.best.clone()).collect());
            write_json(
                &train_cfg
                    .checkpoint_dir
                    .join(tag.name())
                    .join("cv_report.json"),
                &report,
            )?;
            reports.push(report);
        }
    }
    if !reports.is_empty() {
        print!("{}", render_table(&reports));
    }
    Ok(())
}

/// Checkpoint paths named directly or found below run directories.
fn collect_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "best.safetensors") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no checkpoints found".into()));
    }
    Ok(out)
}

/// Scores every checkpoint on its recorded held-out cases (all manifest
/// cases when none are recorded), grouped into one report per ablation.
pub fn eval_reports(a: &EvalArgs) -> Result<Vec<CvReport>> {
    let mut cfg = load_run_config(&a.data)?;
    if let Some(mode) = &a.penumbra {
        cfg.data.penumbra = match mode.to_ascii_lowercase().as_str() {
            "exclusive" => PenumbraMode::Exclusive,
            "inclusive" => PenumbraMode::Inclusive,
            other => {
                return Err(Error::Config(format!(
                    "--penumbra expects exclusive or inclusive, got `{other}`"
                )))
            }
        };
    }
    cfg.validate(true)?;
    let fallback_tag = a
        .ablation
        .as_deref()
        .map(str::parse::<AblationTag>)
        .transpose()?;
    let dataset = Dataset::from_manifest(cfg.manifest()?, cfg.data.root.as_deref())?;

    let mut grouped: BTreeMap<AblationTag, Vec<FoldDice>> = BTreeMap::new();
    for (i, path) in collect_checkpoints(&a.checkpoint)?.iter().enumerate() {
        let mut ckpt = load_checkpoint(path)?;
        let tag = match (&ckpt.meta.ablation, fallback_tag) {
            (Some(t), _) => t.parse()?,
            (None, Some(t)) => t,
            (None, None) => {
                return Err(Error::Config(format!(
                    "{} records no ablation tag; pass --ablation",
                    path.display()
                )))
            }
        };
        let ids = if ckpt.meta.validation_ids.is_empty() {
            dataset.case_ids.clone()
        } else {
            ckpt.meta.validation_ids.clone()
        };
        let cases = dataset.load_all(&ids)?;
        let scores = evaluate_fold(&mut ckpt.segmenter, &cases, cfg.data.penumbra)?;
        let fold = ckpt.meta.fold.unwrap_or(i);
        info!(
            "{tag} fold {fold}: {} case(s) from {}",
            cases.len(),
            path.display()
        );
        grouped
            .entry(tag)
            .or_default()
            .push(FoldDice::from_cases(fold, scores));
    }
    Ok(grouped
        .into_iter()
        .map(|(tag, mut folds)| {
            folds.sort_by_key(|f| f.fold);
            CvReport::from_folds(tag, folds)
        })
        .collect())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let reports = eval_reports(a)?;
    match &a.out {
        Some(p) => write_json(p, &reports)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&reports).expect("serializable")
        ),
    }
    if a.table {
        print!("{}", render_table(&reports));
    }
    Ok(())
}

/// Writes `prediction.rawf32` (+ sidecar) and, with `--overlay`, PNGs under
/// `overlays/`. Returns the prediction path.
pub fn cmd_predict(a: &PredictArgs) -> Result<PathBuf> {
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    let case = load_case(&a.case_dir)?;
    let pred = predict_case(&mut ckpt.segmenter, &case)?;
    fs::create_dir_all(&a.out)?;
    let dwi = case.modality(Modality::Dwi);
    let volume = Volume::with_spacing(pred.mapv(f32::from), dwi.spacing)?;
    let path = a.out.join("prediction.rawf32");
    write_rawf32(&path, &volume)?;
    if a.overlay {
        write_overlays(&a.out.join("overlays"), dwi, &pred)?;
    }
    info!("wrote {}", path.display());
    Ok(path)
}

/// Fold split used by a previous `train` run.
pub fn read_folds(path: &Path) -> Result<FoldSplit> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::unreadable(path, e))
}
