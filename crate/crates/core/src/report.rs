//! Run-directory bookkeeping: manifest, advisory lock and the plot-data
//! emitter.
//!
//! A run directory holds
//!
//! ```text
//! config.toml          resolved configuration
//! loss.csv             step,l_image,l_rep,l_reg,total,lr_proj
//! milestone_<k>.json   MilestoneRecord, k = 1..=milestones
//! ckpt_<k>.crck        checkpoint at milestone k
//! summary.json         RunSummary
//! manifest.json        RunManifest (every other file with its byte length)
//! curves.json          written by emit_curves
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::flow::LossBreakdown;
use crate::metrics::MetricReport;

pub const MANIFEST: &str = "manifest.json";
pub const CURVES: &str = "curves.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const CONFIG: &str = "config.toml";
pub const LOCK: &str = ".lock";
pub const CSV_HEADER: &str = "step,l_image,l_rep,l_reg,total,lr_proj";

/// Metric series carried by `curves.json`, one point per milestone.
pub const SERIES: [&str; 9] = [
    "lds",
    "cds",
    "rmsc",
    "offdiag_cov_mass",
    "effective_rank",
    "l_image",
    "l_rep",
    "l_reg",
    "total",
];

pub fn milestone_file(k: usize) -> String {
    format!("milestone_{k}.json")
}

pub fn checkpoint_file(k: usize) -> String {
    format!("ckpt_{k}.crck")
}

/// Evaluation at one milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilestoneRecord {
    pub milestone: usize,
    pub step: u64,
    pub metrics: MetricReport,
    /// Loss of the last training step before the milestone.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_digest: String,
    /// Package version plus `COREDI_GIT_HASH` when set at build time.
    pub source: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn source_id() -> String {
    match option_env!("COREDI_GIT_HASH") {
        Some(h) => format!("coredi-core {} ({h})", env!("CARGO_PKG_VERSION")),
        None => format!("coredi-core {}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    /// Indexes every regular file in `dir` except the manifest and lock.
    pub fn collect(dir: &Path, config: &TrainConfig, started_unix: u64) -> Result<Self> {
        let mut files = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST || name == LOCK {
                continue;
            }
            let meta = entry.metadata().map_err(|e| Error::io(entry.path(), e))?;
            if meta.is_file() {
                files.push(FileEntry { path: name, bytes: meta.len() });
            }
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(RunManifest {
            config: config.clone(),
            config_digest: config.digest(),
            source: source_id(),
            seed: config.seed,
            started_unix,
            finished_unix: unix_now(),
            files,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    /// Every listed file exists with the recorded length.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = dir.join(&f.path);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            if meta.len() != f.bytes {
                return Err(Error::Format {
                    path,
                    msg: format!("expected {} bytes, found {}", f.bytes, meta.len()),
                });
            }
        }
        Ok(())
    }
}

/// Exclusive marker file held for the lifetime of a run.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Parses `loss.csv` into `(step, l_image, l_rep, l_reg, total, lr_proj)`.
pub fn read_loss_csv(path: &Path) -> Result<Vec<[f64; 6]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(format!("header must be `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            vals.try_into()
                .map_err(|_| bad(format!("line {}: expected 6 columns", i + 2)))
        })
        .collect()
}

/// Collects milestone records and the loss log into `curves.json`.
///
/// ```json
/// {
///   "steps": [u64; M],
///   "series": { "<name>": [f64; M], ... },
///   "loss": { "step": [...], "total": [...] }
/// }
/// ```
///
/// `series` holds every name in [`SERIES`].
pub fn emit_curves(run_dir: &Path) -> Result<Value> {
    let config = TrainConfig::from_path(&run_dir.join(CONFIG))?;
    let mut records = Vec::with_capacity(config.milestones);
    for k in 1..=config.milestones {
        let path = run_dir.join(milestone_file(k));
        if !path.exists() {
            return Err(Error::Format {
                path,
                msg: format!("milestone {k} of {} is missing", config.milestones),
            });
        }
        records.push(read_json::<MilestoneRecord>(&path)?);
    }
    let rows = read_loss_csv(&run_dir.join(LOSS_CSV))?;
    let pick = |f: &dyn Fn(&MilestoneRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    let mut series = serde_json::Map::new();
    let columns: [(&str, Vec<f64>); 9] = [
        ("lds", pick(&|r| r.metrics.lds)),
        ("cds", pick(&|r| r.metrics.cds)),
        ("rmsc", pick(&|r| r.metrics.rmsc)),
        ("offdiag_cov_mass", pick(&|r| r.metrics.offdiag_cov_mass)),
        ("effective_rank", pick(&|r| r.metrics.effective_rank)),
        ("l_image", pick(&|r| r.loss.l_image)),
        ("l_rep", pick(&|r| r.loss.l_rep)),
        ("l_reg", pick(&|r| r.loss.l_reg)),
        ("total", pick(&|r| r.loss.total)),
    ];
    for (name, values) in columns {
        series.insert(name.into(), serde_json::json!(values));
    }
    let doc = serde_json::json!({
        "steps": records.iter().map(|r| r.step).collect::<Vec<_>>(),
        "series": series,
        "loss": {
            "step": rows.iter().map(|r| r[0] as u64).collect::<Vec<_>>(),
            "total": rows.iter().map(|r| r[4]).collect::<Vec<_>>(),
        },
    });
    validate_curves(&doc)?;
    write_json(&run_dir.join(CURVES), &doc)?;
    Ok(doc)
}

/// Checks a document against the `curves.json` shape.
pub fn validate_curves(doc: &Value) -> Result<()> {
    let bad = |msg: String| Error::Format { path: PathBuf::from(CURVES), msg };
    let obj = doc.as_object().ok_or_else(|| bad("top level must be an object".into()))?;
    for key in obj.keys() {
        if !["steps", "series", "loss"].contains(&key.as_str()) {
            return Err(bad(format!("unexpected key `{key}`")));
        }
    }
    let steps = obj
        .get("steps")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("`steps` must be an array".into()))?;
    if steps.is_empty() || !steps.iter().all(Value::is_u64) {
        return Err(bad("`steps` must be non-empty unsigned integers".into()));
    }
    let series = obj
        .get("series")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("`series` must be an object".into()))?;
    for name in SERIES {
        let s = series
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| bad(format!("series `{name}` missing")))?;
        if s.len() != steps.len() || !s.iter().all(Value::is_number) {
            return Err(bad(format!("series `{name}` must have {} numbers", steps.len())));
        }
    }
    let loss = obj
        .get("loss")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("`loss` must be an object".into()))?;
    let col = |k: &str| loss.get(k).and_then(Value::as_array).map(Vec::len);
    match (col("step"), col("total")) {
        (Some(a), Some(b)) if a == b => Ok(()),
        _ => Err(bad("`loss.step` and `loss.total` must be arrays of equal length".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: usize) -> MilestoneRecord {
        MilestoneRecord {
            milestone: k,
            step: 10 * k as u64,
            metrics: MetricReport {
                lds: 0.1 * k as f64,
                cds: 0.01,
                rmsc: 0.5,
                offdiag_cov_mass: 0.2,
                effective_rank: 3.0,
            },
            loss: LossBreakdown::new(1.0, 0.5, 0.1, 1.0, 1.0),
        }
    }

    fn fake_run(dir: &Path, milestones: usize) {
        let cfg = TrainConfig::latent();
        fs::write(dir.join(CONFIG), cfg.to_toml()).unwrap();
        let mut csv = String::from(CSV_HEADER);
        for s in 0..50 {
            csv.push_str(&format!("\n{s},1,0.5,0.1,1.6,0.001"));
        }
        fs::write(dir.join(LOSS_CSV), csv + "\n").unwrap();
        for k in 1..=milestones {
            write_json(&dir.join(milestone_file(k)), &record(k)).unwrap();
        }
    }

    #[test]
    fn five_points_per_series() {
        let dir = tempfile::tempdir().unwrap();
        fake_run(dir.path(), 5);
        let doc = emit_curves(dir.path()).unwrap();
        for name in SERIES {
            assert_eq!(doc["series"][name].as_array().unwrap().len(), 5);
        }
        assert!(dir.path().join(CURVES).exists());
    }

    #[test]
    fn missing_milestone() {
        let dir = tempfile::tempdir().unwrap();
        fake_run(dir.path(), 4);
        let err = emit_curves(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("milestone_5"));
    }

    #[test]
    fn schema_rejects_ragged_series() {
        let dir = tempfile::tempdir().unwrap();
        fake_run(dir.path(), 5);
        let mut doc = emit_curves(dir.path()).unwrap();
        doc["series"]["lds"] = serde_json::json!([1.0]);
        assert!(validate_curves(&doc).is_err());
        let mut doc2 = emit_curves(dir.path()).unwrap();
        doc2["extra"] = serde_json::json!(1);
        assert!(validate_curves(&doc2).is_err());
    }

    #[test]
    fn manifest_lengths() {
        let dir = tempfile::tempdir().unwrap();
        fake_run(dir.path(), 5);
        let m = RunManifest::collect(dir.path(), &TrainConfig::latent(), 0).unwrap();
        m.save(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        loaded.verify(dir.path()).unwrap();
        fs::write(dir.path().join(LOSS_CSV), "truncated").unwrap();
        assert!(matches!(loaded.verify(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}
