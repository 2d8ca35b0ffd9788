use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dafkit::fewshot::{gen_toy_dataset, ExperimentReport, ShapeFamily, ToyDatasetSpec};
use dafkit::ConceptKey;
use dafkit_cli::commands::{params_hash, BACKBONE_FILE, CONCEPTS_FILE, EXTRACTOR_FILE};
use dafkit_cli::io::{read_checkpoint, write_checkpoint, write_image_dir};
use dafkit_cli::store::StoreManifest;
use dafkit_cli::RunManifest;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 7

[table1]
synthetic_images_per_real = 2
textual_inversion_training_steps = 3
denoising_steps = 4
resolution = 16
classifier_batch_size = 8
classifier_training_steps = 20
classifier_early_stopping_interval = 10

[dataset.toy]
families = ["circle", "square", "triangle"]
per_class = 5
resolution = 16

[backbone]
widths = [4, 8, 8]
per_class = 4

[backbone.train]
steps = 10

[extractor]
widths = [4, 8, 8]
per_class = 4
steps = 10

[experiment]
q_grid = [1, 2]
trials = 2
"#;

fn dafkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dafkit"))
        .args(args)
        .env_remove("DAFKIT_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![sub, "--config", s(&self.config), "--out", s(&out)];
        args.extend_from_slice(extra);
        dafkit(&args)
    }

    fn ok(&self, sub: &str, out: &str, extra: &[&str]) -> PathBuf {
        let o = self.run(sub, out, extra);
        assert_eq!(code(&o), 0, "{sub} failed: {}", stderr(&o));
        let dir = self.path(out);
        let manifest = RunManifest::read(&dir).unwrap();
        assert!(manifest.mismatches(&dir).is_empty(), "{:?}", manifest.mismatches(&dir));
        dir
    }

    /// Four images in two classes, written as a PNG tree.
    fn small_data(&self) -> PathBuf {
        let spec = ToyDatasetSpec {
            families: vec![ShapeFamily::Circle, ShapeFamily::Cross],
            per_class: 2,
            resolution: 16,
            seed: 3,
            ..ToyDatasetSpec::default()
        };
        let records = gen_toy_dataset(&spec).unwrap();
        let root = self.path("data");
        write_image_dir(&root, &["circle".into(), "cross".into()], &records).unwrap();
        root
    }
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn missing_config_is_an_input_error_naming_the_path() {
    let ws = Workspace::new();
    let missing = ws.path("nowhere/absent.toml");
    let out = ws.path("out");
    let o = dafkit(&["train", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    std::fs::write(&bad, "[table1]\nsynthetic_probabilty = 0.4\n").unwrap();
    let out = ws.path("out");
    let o = dafkit(&["train", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synthetic_probabilty"), "{}", stderr(&o));
}

#[test]
fn train_round_trips_and_is_deterministic() {
    let ws = Workspace::new();
    let a = ws.ok("train", "a", &[]);
    let b = ws.ok("train", "b", &[]);
    for f in [BACKBONE_FILE, EXTRACTOR_FILE] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f} differs between runs");
    }
    let ma = RunManifest::read(&a).unwrap();
    let mb = RunManifest::read(&b).unwrap();
    assert_eq!(ma.hash_of(BACKBONE_FILE), mb.hash_of(BACKBONE_FILE));
    assert!(ma.timings.contains_key("backbone"));

    let ckpt = read_checkpoint(&a.join(BACKBONE_FILE)).unwrap();
    let copy = ws.path("copy.dafkit");
    write_checkpoint(&copy, &ckpt).unwrap();
    assert_eq!(bytes(&copy), bytes(a.join(BACKBONE_FILE)));
    assert_eq!(read_checkpoint(&copy).unwrap().net.params, ckpt.net.params);

    let c = ws.ok("train", "c", &["--seed", "8"]);
    assert_ne!(bytes(a.join(BACKBONE_FILE)), bytes(c.join(BACKBONE_FILE)));
}

#[test]
fn invert_adds_one_concept_per_class_and_freezes_the_backbone() {
    let ws = Workspace::new();
    let train = ws.ok("train", "train", &[]);
    let ckpt = train.join(BACKBONE_FILE);
    let before = read_checkpoint(&ckpt).unwrap();
    let inv = ws.ok("invert", "inv", &["--checkpoint", s(&ckpt), "--granularity", "pooled"]);
    let after = read_checkpoint(&inv.join(CONCEPTS_FILE)).unwrap();

    let new: Vec<ConceptKey> = after.table.keys().filter(|k| !before.table.contains(*k)).collect();
    assert_eq!(new, vec![ConceptKey::Class(0), ConceptKey::Class(1), ConceptKey::Class(2)]);
    assert_eq!(params_hash(&after.net), params_hash(&before.net));

    let again = ws.ok("invert", "inv2", &["--checkpoint", s(&ckpt), "--granularity", "pooled"]);
    assert_eq!(bytes(inv.join(CONCEPTS_FILE)), bytes(again.join(CONCEPTS_FILE)));
}

#[test]
fn corrupt_checkpoint_is_an_input_error() {
    let ws = Workspace::new();
    let bad = ws.path("bad.dafkit");
    std::fs::write(&bad, b"DAFKIT1 but not really").unwrap();
    let o = ws.run("invert", "inv", &["--checkpoint", s(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.dafkit"), "{}", stderr(&o));
}

#[test]
fn augment_writes_stores_and_resumes() {
    let ws = Workspace::new();
    let data = ws.small_data();
    let train = ws.ok("train", "train", &[]);
    let backbone = train.join(BACKBONE_FILE);

    let o = ws.run("augment", "nocon", &["--checkpoint", s(&backbone), "--data", s(&data)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[0, 1]"), "{}", stderr(&o));

    let inv = ws.ok("invert", "inv", &["--checkpoint", s(&backbone), "--data", s(&data)]);
    let concepts = inv.join(CONCEPTS_FILE);
    let args = ["--checkpoint", s(&concepts), "--data", s(&data), "--M", "2"];

    let full = ws.ok("augment", "full", &args);
    let sm = StoreManifest::read(&full.join("store")).unwrap();
    assert_eq!((sm.n, sm.m), (4, 2));
    assert_eq!(sm.records.len(), 8);
    assert_eq!(sm.failed(), 0);
    let pngs: Vec<_> = sm.records.iter().map(|r| full.join("store").join(r.path.as_ref().unwrap())).collect();
    assert!(pngs.iter().all(|p| p.exists()));
    let listed = RunManifest::read(&full).unwrap();
    assert_eq!(listed.outputs.iter().filter(|f| f.path.ends_with(".png")).count(), 8);
    assert!(sm.records.iter().all(|r| matches!(r.record.concept, ConceptKey::Class(_))));

    let mut resumed_args = args.to_vec();
    resumed_args.extend(["--max-records", "3"]);
    let o = ws.run("augment", "resumed", &resumed_args);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!ws.path("resumed/store/manifest.json").exists());
    let resumed = ws.ok("augment", "resumed", &args);
    assert_eq!(bytes(full.join("store/manifest.json")), bytes(resumed.join("store/manifest.json")));
    for p in &pngs {
        let rel = p.strip_prefix(&full).unwrap();
        assert_eq!(bytes(p), bytes(resumed.join(rel)), "{}", rel.display());
    }

    let rg = ws.ok("augment", "rg", &["--checkpoint", s(&backbone), "--data", s(&data), "--M", "2", "--real-guidance"]);
    let sm = StoreManifest::read(&rg.join("store")).unwrap();
    assert_eq!(sm.records.len(), 8);
    assert!(sm.records.iter().all(|r| r.record.concept == ConceptKey::Null && r.record.t0 == Some(0.5)));
}

#[test]
fn fewshot_baseline_needs_no_backbone_and_reruns_identically() {
    let ws = Workspace::new();
    let train = ws.ok("train", "train", &[]);
    let ext = train.join(EXTRACTOR_FILE);
    let args = ["--extractor", s(&ext), "--methods", "baseline"];
    let a = ws.ok("fewshot", "a", &args);
    let b = ws.ok("fewshot", "b", &args);
    for f in ["report/metrics.csv", "report/summary.csv", "report/report.json"] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f} differs between runs");
    }
    let report: ExperimentReport = serde_json::from_slice(&bytes(a.join("report/report.json"))).unwrap();
    assert_eq!(report.cells.len(), 2 * 2);
    assert!(report.is_complete());
    assert!(report.cells.iter().all(|c| c.synthetic == 0));
    assert!(report.audit.generative_inputs.is_empty());

    let summary = String::from_utf8(bytes(a.join("report/summary.csv"))).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.starts_with("method,auc,auc_ci_low,auc_ci_high,normalized_score"));

    let o = ws.run("fewshot", "c", &["--extractor", s(&ext), "--methods", "baseline,dafusion"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn fewshot_auto_trains_missing_stages() {
    let ws = Workspace::new();
    let out = ws.ok("fewshot", "auto", &["--auto", "--methods", "baseline,real-guidance,dafusion-k2"]);
    assert!(out.join(BACKBONE_FILE).exists());
    assert!(out.join(EXTRACTOR_FILE).exists());
    let report: ExperimentReport = serde_json::from_slice(&bytes(out.join("report/report.json"))).unwrap();
    assert!(report.is_complete());
    assert!(report.audit.ok());
    assert!(report.cells.iter().filter(|c| c.method != "baseline").all(|c| c.synthetic > 0));
    let metrics = String::from_utf8(bytes(out.join("report/metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2 * 2);

    let re = ws.path("re");
    let o = dafkit(&["report", "--input", s(&out.join("report/report.json")), "--out", s(&re)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(bytes(out.join("report/metrics.csv")), bytes(re.join("report/metrics.csv")));
    assert!(re.join("report/curves.svg").exists());
}
