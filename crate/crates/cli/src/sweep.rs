//! Scaling sweeps: train several model configs on one dataset and tabulate
//! size, compute and quality.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use zenith_core::config::{DataConfig, DataSplit};
use zenith_core::evaluator::evaluate;
use zenith_core::model::{count_costs, Model, ModelConfig, Variant};
use zenith_core::trainer::{train, TrainConfig};
use zenith_core::{Error, Result};

/// One named model in a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub model: ModelConfig,
}

/// Shared training and data settings plus the grid of models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub runs: Vec<SweepEntry>,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid sweep config: {e}")))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
        self.runs.iter_mut().for_each(|r| r.model.seed = seed);
    }

    /// Shared-section violations; per-model problems are reported per row.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train.violations();
        v.extend(self.data.violations());
        if self.runs.is_empty() {
            v.push("sweep needs at least one run".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub variant: Variant,
    pub params: Option<u64>,
    pub active_params: Option<u64>,
    pub flops: Option<u64>,
    pub logloss: Option<f64>,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    /// Percent change of logloss against the first row.
    pub relative_logloss_pct: Option<f64>,
    /// `ok` or the error that stopped the run.
    pub status: String,
}

fn run_one(entry: &SweepEntry, train_cfg: &TrainConfig, split: &DataSplit) -> SweepRow {
    let mut row = SweepRow {
        name: entry.name.clone(),
        variant: entry.model.variant,
        params: None,
        active_params: None,
        flops: None,
        logloss: None,
        auc: None,
        uauc: None,
        relative_logloss_pct: None,
        status: "ok".into(),
    };
    let outcome = (|| -> Result<()> {
        let cost = count_costs(&entry.model, Some(&split.schema))?;
        row.params = cost.total_params;
        row.active_params = cost.activated_params;
        row.flops = cost.flops_per_example;
        let mut model = Model::build(&entry.model, &split.schema)?;
        train(&mut model, &split.train, train_cfg)?;
        let eval = evaluate(&model, &split.test)?;
        row.logloss = Some(eval.logloss);
        row.auc = Some(eval.auc);
        row.uauc = Some(eval.uauc);
        Ok(())
    })();
    if let Err(e) = outcome {
        row.status = e.to_string();
    }
    row
}

/// Trains every entry (at most `parallel` at a time), sorts rows by total
/// parameter count and fills the relative-logloss column against the first
/// row. Failed runs are kept with their error and sort last.
pub fn run_sweep(cfg: &SweepConfig, split: &DataSplit, parallel: usize) -> Vec<SweepRow> {
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cfg.runs.len()]);
    let next = AtomicUsize::new(0);
    let workers = parallel.clamp(1, cfg.runs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = cfg.runs.get(i) else { break };
                let row = run_one(entry, &cfg.train, split);
                slots.lock().expect("sweep worker panicked")[i] = Some(row);
            });
        }
    });
    let mut rows: Vec<SweepRow> =
        slots.into_inner().expect("sweep worker panicked").into_iter().map(|r| r.expect("every run reports")).collect();
    rows.sort_by_key(|r| (r.params.is_none() || r.status != "ok", r.params.unwrap_or(u64::MAX)));
    if let Some(base) = rows.first().and_then(|r| r.logloss) {
        for r in &mut rows {
            r.relative_logloss_pct = r.logloss.map(|l| 100.0 * (l / base - 1.0));
        }
    }
    rows
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn float_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `name,variant,params,active_params,flops,logloss,auc,uauc,relative_logloss_pct,status`.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("name,variant,params,active_params,flops,logloss,auc,uauc,relative_logloss_pct,status\n");
    for r in rows {
        let variant = match r.variant {
            Variant::Zenith => "zenith",
            Variant::ZenithPp => "zenith_pp",
        };
        let status = r.status.replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{variant},{},{},{},{},{},{},{},{status}",
            r.name,
            cell(r.params),
            cell(r.active_params),
            cell(r.flops),
            float_cell(r.logloss),
            float_cell(r.auc),
            float_cell(r.uauc),
            float_cell(r.relative_logloss_pct),
        );
    }
    s
}
