//! Per-run output files.
//!
//! * `metrics.ndjson`: one JSON object per kept [`RunRecord`], fields
//!   `update, nll, r_vadv, r_cent, total, backprops, lr` plus any checkpoint
//!   metrics (`val_error`, `test_error`, ...).
//! * `timing.csv`: `update,wallclock` in seconds. Kept apart so the metric
//!   files are bit-identical across reruns.
//! * `summary.json`: see [`Summary`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};
use vatlab_core::train::{RunRecord, TrainObserver};
use vatlab_core::Classifier;

use crate::error::{Result, VatlabError};

pub type Checkpoint<'a> = Box<dyn FnMut(usize, &Classifier) -> Result<Vec<(String, f64)>> + 'a>;

/// Streams records to disk (when given a directory) and runs an optional
/// checkpoint hook.
pub struct RunObserver<'a> {
    start: Instant,
    files: Option<(BufWriter<File>, BufWriter<File>)>,
    checkpoint: Option<Checkpoint<'a>>,
    /// Kept records, for the summary.
    pub records: Vec<RunRecord>,
}

fn core_err(e: VatlabError) -> vatlab_core::Error {
    vatlab_core::Error::Data(e.to_string())
}

impl<'a> RunObserver<'a> {
    pub fn new(dir: Option<&Path>, checkpoint: Option<Checkpoint<'a>>) -> Result<Self> {
        let files = match dir {
            Some(d) => {
                let open = |name: &str| -> Result<BufWriter<File>> {
                    let p = d.join(name);
                    Ok(BufWriter::new(File::create(&p).map_err(VatlabError::io(&p))?))
                };
                let mut timing = open("timing.csv")?;
                timing.write_all(b"update,wallclock\n").map_err(VatlabError::io(d))?;
                Some((open("metrics.ndjson")?, timing))
            }
            None => None,
        };
        Ok(RunObserver { start: Instant::now(), files, checkpoint, records: Vec::new() })
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some((m, t)) = &mut self.files {
            m.flush().map_err(|e| VatlabError::Data(e.to_string()))?;
            t.flush().map_err(|e| VatlabError::Data(e.to_string()))?;
        }
        Ok(())
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

pub fn record_json(r: &RunRecord) -> Value {
    let mut m = Map::new();
    m.insert("update".into(), json!(r.update));
    m.insert("nll".into(), json!(r.nll));
    m.insert("r_vadv".into(), json!(r.r_vadv));
    m.insert("r_cent".into(), json!(r.r_cent));
    m.insert("total".into(), json!(r.total));
    m.insert("backprops".into(), json!(r.backprops_this_update));
    m.insert("lr".into(), json!(r.lr));
    for (k, v) in &r.eval {
        m.insert(k.clone(), json!(v));
    }
    Value::Object(m)
}

impl TrainObserver for RunObserver<'_> {
    fn elapsed(&self) -> f64 {
        self.elapsed_secs()
    }

    fn checkpoint(&mut self, update: usize, model: &Classifier) -> vatlab_core::Result<Vec<(String, f64)>> {
        match &mut self.checkpoint {
            Some(f) => f(update, model).map_err(core_err),
            None => Ok(Vec::new()),
        }
    }

    fn record(&mut self, r: &RunRecord) -> vatlab_core::Result<()> {
        if let Some((m, t)) = &mut self.files {
            let io = |e: std::io::Error| vatlab_core::Error::Data(e.to_string());
            writeln!(m, "{}", record_json(r)).map_err(io)?;
            writeln!(t, "{},{:?}", r.update, r.wallclock).map_err(io)?;
        }
        self.records.push(r.clone());
        Ok(())
    }
}

/// Final numbers of one training run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub updates: usize,
    pub eps: f64,
    pub k: usize,
    pub final_nll: f64,
    pub final_total: f64,
    pub final_val_error: Option<f64>,
    pub final_test_error: Option<f64>,
    /// Mean regularizer over the records in the last 10% of updates.
    pub mean_r_vadv_last10: f64,
    /// Reverse sweeps of each update when they are all equal.
    pub backprops_per_update: Option<u64>,
    pub total_backprops: u64,
}

impl Summary {
    pub fn to_json(&self) -> Value {
        json!({
            "task": self.task,
            "method": self.method,
            "seed": self.seed,
            "updates": self.updates,
            "eps": self.eps,
            "K": self.k,
            "final_nll": self.final_nll,
            "final_total": self.final_total,
            "final_val_error": self.final_val_error,
            "final_test_error": self.final_test_error,
            "mean_r_vadv_last10": self.mean_r_vadv_last10,
            "backprops_per_update": self.backprops_per_update,
            "total_backprops": self.total_backprops,
        })
    }
}

/// Mean `r_vadv` over records whose update falls in the last 10% of the run.
pub fn mean_r_vadv_last10(records: &[RunRecord], updates: usize) -> f64 {
    let from = updates - updates.div_ceil(10);
    let tail: Vec<f64> = records.iter().filter(|r| r.update >= from).map(|r| r.r_vadv).collect();
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| VatlabError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(VatlabError::io(path))
}
