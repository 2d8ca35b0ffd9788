//! On-disk synthetic store: `store/<class_id>/<image_id>/aug_<j>.png` plus
//! `store/manifest.json`. Finished records are journaled as they complete so an
//! interrupted run can resume where it stopped.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dafkit::augment::{class_positions, generate_record, ConceptMode, GenerationContext, RecordStatus, StoreRecord};
use dafkit::{AugmentationPolicy, DatasetRecord, NoisePredictor, RngStream};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{encode_png, read_file, write_atomic};

pub const STORE_MANIFEST: &str = "manifest.json";
const JOURNAL: &str = "journal.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    #[serde(flatten)]
    pub record: StoreRecord,
    /// Position of the source image within its class.
    pub image_id: u32,
    /// Relative to the store directory; absent for failed records.
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub n: usize,
    pub m: usize,
    pub concept_mode: ConceptMode,
    pub policy: AugmentationPolicy,
    pub records: Vec<StoreEntry>,
}

impl StoreManifest {
    pub fn read(store: &Path) -> CliResult<Self> {
        let path = store.join(STORE_MANIFEST);
        serde_json::from_slice(&read_file(&path)?).map_err(|e| CliError::io(&path, e))
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.record.status != RecordStatus::Ok).count()
    }
}

/// How far a store build got.
#[derive(Debug, Clone, PartialEq)]
pub enum StoreProgress {
    Complete(StoreManifest),
    /// Stopped after the record budget was spent; `done` records are on disk.
    Interrupted { done: usize, total: usize },
}

fn record_path(label: u32, image_id: u32, j: usize) -> String {
    format!("{label}/{image_id}/aug_{j}.png")
}

fn read_journal(store: &Path) -> BTreeMap<(usize, usize), StoreEntry> {
    let Ok(text) = fs::read_to_string(store.join(JOURNAL)) else {
        return BTreeMap::new();
    };
    text.lines()
        // A line cut short by an interruption fails to parse and is regenerated.
        .filter_map(|l| serde_json::from_str::<StoreEntry>(l).ok())
        .filter(|e| e.path.as_ref().is_none_or(|p| store.join(p).exists()))
        .map(|e| ((e.record.i, e.record.j), e))
        .collect()
}

/// Generates every missing `(i, j)` record into `store`, at most `budget` of them
/// in this call. Completed stores are rewritten with an identical manifest.
pub fn build_store_dir<P: NoisePredictor + Sync>(
    store: &Path,
    dataset: &[DatasetRecord],
    policy: &AugmentationPolicy,
    m: usize,
    ctx: &GenerationContext<'_, P>,
    rng: &RngStream,
    budget: Option<usize>,
) -> CliResult<StoreProgress> {
    if m == 0 {
        return Err(CliError::Input("M must be at least 1".into()));
    }
    fs::create_dir_all(store).map_err(|e| CliError::io(store, e))?;
    let positions = class_positions(dataset);
    let mut done = read_journal(store);
    let todo: Vec<(usize, usize)> = (0..dataset.len())
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .filter(|k| !done.contains_key(k))
        .collect();
    let total = dataset.len() * m;
    let allowed = budget.unwrap_or(usize::MAX).min(todo.len());

    let journal_path = store.join(JOURNAL);
    let journal = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal_path)
        .map_err(|e| CliError::io(&journal_path, e))?;
    let journal = Mutex::new(journal);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<CliResult<StoreEntry>>> = Mutex::new(Vec::new());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= allowed {
            break;
        }
        let (i, j) = todo[k];
        let entry = finish_record(store, generate_record(dataset, &positions, policy, ctx, rng, i, j), positions[i]);
        if let Ok(e) = &entry {
            let line = serde_json::to_string(e).expect("store entry serializes");
            let mut f = journal.lock().expect("journal lock");
            if let Err(err) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                results.lock().expect("results lock").push(Err(CliError::io(&journal_path, err)));
                continue;
            }
        }
        results.lock().expect("results lock").push(entry);
    };
    let workers = ctx.workers.clamp(1, allowed.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(work);
        }
    });
    for r in results.into_inner().expect("results lock") {
        let e = r?;
        done.insert((e.record.i, e.record.j), e);
    }
    if done.len() < total {
        return Ok(StoreProgress::Interrupted { done: done.len(), total });
    }
    let manifest = StoreManifest {
        n: dataset.len(),
        m,
        concept_mode: ctx.concept_mode,
        policy: policy.clone(),
        records: done.into_values().collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("store manifest serializes");
    write_atomic(&store.join(STORE_MANIFEST), &json)?;
    let _ = fs::remove_file(&journal_path);
    Ok(StoreProgress::Complete(manifest))
}

fn finish_record(store: &Path, mut record: StoreRecord, image_id: u32) -> CliResult<StoreEntry> {
    let path = match record.image.take() {
        Some(img) if record.status == RecordStatus::Ok => {
            let rel = record_path(record.label, image_id, record.j);
            write_atomic(&store.join(&rel), &encode_png(&img)?)?;
            Some(rel)
        }
        _ => None,
    };
    Ok(StoreEntry { record, image_id, path })
}

/// Every image file the manifest references, for hashing.
pub fn store_files(store: &Path, manifest: &StoreManifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = manifest
        .records
        .iter()
        .filter_map(|e| e.path.as_ref().map(|p| store.join(p)))
        .collect();
    v.push(store.join(STORE_MANIFEST));
    v
}
