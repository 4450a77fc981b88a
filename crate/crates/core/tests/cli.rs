use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use strokeseg::cli::RunConfig;
use strokeseg::data::{read_rawf32, synth_case, write_case, write_manifest};
use strokeseg::model::{build_segmenter, save_checkpoint, CheckpointMeta, SegmenterConfig};

const WIDTHS: &str = "8,16,32,32,64,64,64,64";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_strokeseg"));
    c.env_remove("STROKESEG_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((
                path.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&path).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, n: usize, shape: &str) {
    ok(&[
        "synth",
        "-n",
        &n.to_string(),
        "--shape",
        shape,
        "--seed",
        "3",
        "-o",
        p(dir),
    ]);
}

#[test]
fn synth_writes_cases_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    synth(&a, 3, "2,64,64");
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(
        manifest.lines().collect::<Vec<_>>(),
        ["case_000", "case_001", "case_002"]
    );
    for id in manifest.lines() {
        assert!(a.join(id).join("DWI.rawf32").is_file());
    }
    let b = tmp.path().join("b");
    synth(&b, 3, "2,64,64");
    assert_eq!(files(&a), files(&b));
}

#[test]
fn synth_zero_cases() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0, "2,64,64");
    assert_eq!(
        fs::read_to_string(tmp.path().join("manifest.txt")).unwrap(),
        ""
    );
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("synth", &["--n-cases", "--shape", "--seed", "--out"]),
        ("folds", &["--manifest", "--k", "--seed", "--out"]),
        (
            "train",
            &[
                "--config",
                "--manifest",
                "--data-root",
                "--ablation",
                "--fold",
                "--folds",
                "--epochs",
                "--batch-size",
                "--max-iterations",
                "--lr",
                "--seed",
                "--checkpoint-dir",
                "--encoder-widths",
                "--disc-base-width",
                "--boundary-factor",
            ],
        ),
        (
            "eval",
            &[
                "--config",
                "--manifest",
                "--checkpoint",
                "--ablation",
                "--penumbra",
                "--table",
                "--out",
            ],
        ),
        (
            "predict",
            &["--checkpoint", "--case-dir", "--out", "--overlay"],
        ),
    ];
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for (cmd, flags) in cases {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn folds_prints_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..7).map(|i| format!("c{i}")).collect();
    write_manifest(&tmp.path().join("m.txt"), &ids).unwrap();
    let out = ok(&[
        "folds",
        "--manifest",
        p(&tmp.path().join("m.txt")),
        "-k",
        "3",
    ]);
    let split: strokeseg::data::FoldSplit = serde_json::from_slice(&out.stdout).unwrap();
    let mut all: Vec<String> = split.folds.concat();
    all.sort();
    assert_eq!(all, ids);
    let out = run(&[
        "folds",
        "--manifest",
        p(&tmp.path().join("m.txt")),
        "-k",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2, "1,64,64");
    let manifest = tmp.path().join("manifest.txt");
    let out = run(&["train", "--manifest", p(&manifest), "--ablation", "BL9"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("BL1") && err.contains("PROPOSED"), "{err}");

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest)]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["train", "--manifest", p(&tmp.path().join("missing.txt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, "1,64,64");
    let manifest = tmp.path().join("elsewhere.txt");
    fs::copy(data.join("manifest.txt"), &manifest).unwrap();
    let args = [
        "train",
        "--manifest",
        p(&manifest),
        "--ablation",
        "BL1",
        "--fold",
        "0",
        "--folds",
        "2",
        "--epochs",
        "1",
        "--encoder-widths",
        WIDTHS,
    ];
    let ckpt = tmp.path().join("runs");
    let out = bin()
        .args(args)
        .args(["--checkpoint-dir", p(&ckpt)])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "cases resolve next to the manifest by default"
    );
    let out = bin()
        .args(args)
        .args(["--checkpoint-dir", p(&ckpt)])
        .env("STROKESEG_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_eval_predict_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, "2,64,64");
    let runs = tmp.path().join("runs");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(
        &cfg_path,
        format!(
            "[data]\nmanifest = {:?}\nfolds = 2\n\n[train]\nepochs = 1\nencoder_widths = [{WIDTHS}]\ndisc_base_width = 8\n",
            p(&data.join("manifest.txt"))
        ),
    )
    .unwrap();

    let out = ok(&[
        "train",
        "-c",
        p(&cfg_path),
        "--ablation",
        "BL1",
        "--fold",
        "0",
        "--checkpoint-dir",
        p(&runs),
        "--seed",
        "11",
    ]);
    let ckpt = runs.join("BL1/fold0/best.safetensors");
    assert!(ckpt.is_file() && runs.join("BL1/fold0/train_log.jsonl").is_file());
    assert!(!runs.join("BL1/fold1").exists());

    // The echoed effective config parses back to the same values.
    let stderr = String::from_utf8(out.stderr).unwrap();
    let echoed = stderr.split("# effective config\n").nth(1).unwrap();
    let echoed = &echoed[..echoed.find("# end effective config").unwrap()];
    let parsed = RunConfig::from_toml(echoed).unwrap();
    assert_eq!(parsed.train.seed, 11);
    assert_eq!(parsed.train.epochs, 1);
    assert_eq!(parsed.data.folds, 2);
    assert_eq!(RunConfig::from_toml(&parsed.to_toml()).unwrap(), parsed);

    let out = ok(&[
        "eval",
        "-c",
        p(&cfg_path),
        "--checkpoint",
        p(&ckpt),
        "--table",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("\"ablation\": \"BL1\"") && text.contains("| Penumbra |"),
        "{text}"
    );

    let case_dir = data.join("case_000");
    let predict = |out: &Path| {
        ok(&[
            "predict",
            "--checkpoint",
            p(&ckpt),
            "--case-dir",
            p(&case_dir),
            "-o",
            p(out),
            "--overlay",
        ]);
        files(out)
    };
    let first = predict(&tmp.path().join("p1"));
    assert_eq!(first, predict(&tmp.path().join("p2")));
    let pngs: Vec<_> = first
        .iter()
        .filter(|(f, _)| f.extension().is_some_and(|e| e == "png"))
        .map(|(f, _)| f.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(
        pngs,
        [
            "slice_000_pen-yellow_core-red.png",
            "slice_001_pen-yellow_core-red.png"
        ]
    );
    let vol = read_rawf32(&tmp.path().join("p1/prediction.rawf32")).unwrap();
    assert_eq!(vol.data.dim(), (2, 64, 64));
    assert!(vol.data.iter().all(|v| [0.0, 1.0, 2.0].contains(v)));
}

#[test]
fn all_ablations_enumerate_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, "1,64,64");
    let runs = tmp.path().join("runs");
    let out = ok(&[
        "train",
        "--manifest",
        p(&data.join("manifest.txt")),
        "--ablation",
        "all",
        "--folds",
        "2",
        "--epochs",
        "1",
        "--max-iterations",
        "1",
        "--encoder-widths",
        WIDTHS,
        "--disc-base-width",
        "8",
        "--checkpoint-dir",
        p(&runs),
    ]);
    for tag in ["BL1", "BL2", "BL3", "BL4", "BL5", "BL6", "BL7", "PROPOSED"] {
        for fold in 0..2 {
            assert!(
                runs.join(format!("{tag}/fold{fold}/best.safetensors"))
                    .is_file(),
                "{tag} fold {fold}"
            );
        }
        assert!(runs.join(tag).join("cv_report.json").is_file());
    }
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(!table.contains('—'), "{table}");

    let out = ok(&[
        "eval",
        "--manifest",
        p(&data.join("manifest.txt")),
        "--checkpoint",
        p(&runs),
        "--table",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let header = text.lines().find(|l| l.contains("| BL1")).unwrap();
    assert_eq!(header.matches('|').count(), 10);
    assert!(!text.contains('—'));
}

#[test]
fn incompatible_checkpoint_is_a_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let case = synth_case(1, [1, 64, 64]).unwrap();
    write_case(tmp.path(), &case).unwrap();
    write_manifest(
        &tmp.path().join("manifest.txt"),
        std::slice::from_ref(&case.case_id),
    )
    .unwrap();
    let small = SegmenterConfig {
        encoder_widths: vec![4, 8, 8, 8, 8, 8, 8, 8],
        ..Default::default()
    };
    let mut seg = build_segmenter(&small, 0).unwrap();
    let mut meta = CheckpointMeta::for_segmenter(SegmenterConfig {
        encoder_widths: vec![8, 8, 8, 8, 8, 8, 8, 8],
        ..Default::default()
    });
    meta.ablation = Some("BL5".into());
    let ckpt = tmp.path().join("bad.safetensors");
    save_checkpoint(&ckpt, &mut seg, None, &meta).unwrap();
    let out = run(&[
        "eval",
        "--manifest",
        p(&tmp.path().join("manifest.txt")),
        "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint mismatch"));
}
