//! Experiment configuration and the train / compare / sweep runners behind
//! the command-line tool.
//!
//! Config keys (all optional except the dataset source):
//!
//! | key               | meaning                                              | default     |
//! |-------------------|------------------------------------------------------|-------------|
//! | `synthetic`       | generator spec (see [`SyntheticSpec`])               |             |
//! | `data_path`       | dataset CSV; relative paths resolve against the config file |      |
//! | `method`          | training method                                      | `bmlr`      |
//! | `fusion`          | `concat`, `sum`, `film`, `gated`                     | `concat`    |
//! | `epochs`          | training epochs                                      | 40          |
//! | `batch_size`      | minibatch size                                       | 64          |
//! | `lr`              | Adam learning rate                                   | 5e-4        |
//! | `seed`            | initialisation and shuffling seed                    | 1           |
//! | `alpha`, `beta`   | reshaping temperature scale and gate threshold       | 1.0, 0.2    |
//! | `eps_beta`        | stand-in for `beta = 0`                              | 1e-6        |
//! | `eps_div`         | confidence floor in the discrepancy ratio            | 1e-8        |
//! | `uniform_weights` | unimodal loss weights for joint objectives           | all 1       |
//! | `smoothing`       | mass spread over non-target classes                  | 0.1         |
//! | `hidden`          | encoder widths                                       | `[64, 32]`  |
//! | `out`             | output directory                                     |             |
//! | `diagnostics`     | also write per-sample reshaping diagnostics          | false       |
//! | `methods`         | method list for `compare`                            |             |
//! | `seeds`           | seed list for `compare`                              | `[seed]`    |
//! | `sweep`           | `{ "alpha": [..], "beta": [..] }` grid for `sweep`   |             |
//!
//! Command-line overrides replace the matching key before validation. The
//! resolved config is written to `config.echo.json` in every output
//! directory and can be fed back as `--config` to reproduce the run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::Error;
use crate::metrics::{self, fmt_ratio, fmt_sig6, ExportFormat, MetricsRow};
use crate::model::FusionKind;
use crate::reshaper::{ReshapeConfig, DEFAULT_EPS_BETA, DEFAULT_EPS_DIV};
use crate::trainer::{self, MethodKind, RunRecord, TrainConfig};

pub const ECHO_FILE: &str = "config.echo.json";
pub const SUMMARY_PREFIX: &str = "BMLR|";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub method: MethodKind,
    pub fusion: FusionKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub eps_beta: f64,
    pub eps_div: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub uniform_weights: Vec<f64>,
    pub smoothing: f64,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub diagnostics: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<MethodKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            synthetic: None,
            data_path: None,
            method: t.method,
            fusion: t.fusion,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            alpha: t.reshape.alpha,
            beta: t.reshape.beta,
            eps_beta: DEFAULT_EPS_BETA,
            eps_div: DEFAULT_EPS_DIV,
            uniform_weights: t.uniform_weights,
            smoothing: t.smoothing,
            hidden: t.hidden,
            out: None,
            diagnostics: false,
            methods: None,
            seeds: None,
            sweep: None,
        }
    }
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<MethodKind>,
    pub fusion: Option<FusionKind>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub out: Option<PathBuf>,
}

/// Why a command failed. Validation failures happen before any training.
#[derive(Debug)]
pub enum Failure {
    Validation(Error),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "invalid configuration: {e}"),
            Failure::Runtime(msg) => write!(f, "run failed: {msg}"),
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: Error) -> Failure {
    Failure::Validation(e)
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> crate::Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if let (Some(p), Some(base)) = (&cfg.data_path, path.parent()) {
            if p.is_relative() {
                cfg.data_path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        set!(seed, method, fusion, alpha, beta, epochs, batch_size, lr);
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn reshape(&self, alpha: f64, beta: f64) -> ReshapeConfig {
        ReshapeConfig {
            alpha,
            beta,
            eps_beta: self.eps_beta,
            eps_div: self.eps_div,
        }
    }

    pub fn train_config(&self, method: MethodKind, seed: u64, alpha: f64, beta: f64) -> TrainConfig {
        TrainConfig {
            method,
            fusion: self.fusion,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            reshape: self.reshape(alpha, beta),
            uniform_weights: self.uniform_weights.clone(),
            smoothing: self.smoothing,
            hidden: self.hidden.clone(),
        }
    }

    pub fn out_dir(&self) -> crate::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("out", "required (set it in the config or pass --out)"))
    }

    pub fn dataset(&self) -> crate::Result<Dataset> {
        match (&self.synthetic, &self.data_path) {
            (Some(spec), None) => data::generate(spec),
            (None, Some(path)) => data::load(path),
            (Some(_), Some(_)) => Err(Error::config("synthetic", "give either `synthetic` or `data_path`, not both")),
            (None, None) => Err(Error::config("synthetic", "a dataset source is required: `synthetic` or `data_path`")),
        }
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn write_file(path: &Path, body: &str) -> Outcome<()> {
    std::fs::write(path, body).map_err(|e| runtime(Error::io(path, e)))
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))
}

/// `BMLR|key=value|...` summary of the last epoch.
pub fn summary_line(kind: &str, record: &RunRecord, extra: &[(&str, String)]) -> String {
    let mut s = format!("{SUMMARY_PREFIX}{kind}|method={}|seed={}", record.method, record.seed);
    for (k, v) in extra {
        let _ = write!(s, "|{k}={v}");
    }
    if let Some(row) = record.last() {
        let _ = write!(s, "|epoch={}|acc={}", row.epoch, fmt_sig6(row.accuracy));
        for (u, a) in row.modality_accuracy.iter().enumerate() {
            let _ = write!(s, "|acc_m{u}={}", fmt_sig6(*a));
        }
        let ratio = row.ratio.map(|r| format!("{r:.2}"));
        let _ = write!(s, "|ratio={}", ratio.unwrap_or_else(|| "undefined".into()));
        for (u, c) in row.reshape_counts.iter().enumerate() {
            let _ = write!(s, "|reshaped_m{u}={c}");
        }
    } else {
        s.push_str("|epoch=0");
    }
    s
}

/// Trains one configuration into `dir`. Metrics and the summary are written
/// even when training aborts part way.
fn run_into(
    cfg: &TrainConfig,
    dataset: &Dataset,
    dir: &Path,
    diagnostics: bool,
    echo: &str,
) -> Outcome<RunRecord> {
    create_dir(dir)?;
    write_file(&dir.join(ECHO_FILE), echo)?;
    let started = Instant::now();
    let mut diag_buf = Vec::new();
    let result = trainer::train(cfg, dataset, diagnostics.then_some(&mut diag_buf as &mut dyn Write));
    let (record, model, error) = match result {
        Ok(out) => (out.record, Some(out.model), None),
        Err(abort) => (abort.partial, None, Some(abort.error)),
    };
    let m = record.modalities;
    let write_rows = |format, name: &str| {
        metrics::export(&record.rows, m, &dir.join(name), format).map_err(runtime)
    };
    write_rows(ExportFormat::Csv, "metrics.csv")?;
    write_rows(ExportFormat::Json, "metrics.json")?;
    if diagnostics {
        let path = dir.join("diagnostics.csv");
        std::fs::write(&path, &diag_buf).map_err(|e| runtime(Error::io(path, e)))?;
    }
    if let Some(model) = &model {
        checkpoint::save(model, &dir.join("checkpoint.json")).map_err(runtime)?;
    }
    let summary = json!({
        "status": if error.is_none() { "ok" } else { "aborted" },
        "error": error.as_ref().map(|e| e.to_string()),
        "method": cfg.method,
        "fusion": cfg.fusion,
        "seed": cfg.seed,
        "epochs_completed": record.rows.len(),
        "final": record.last().map(metrics::row_json),
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
    });
    write_file(
        &dir.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    match error {
        None => Ok(record),
        Some(e) => Err(runtime(e)),
    }
}

fn prepare(cfg: &ExperimentConfig) -> Outcome<(Dataset, PathBuf)> {
    let out = cfg.out_dir().map_err(invalid)?.to_path_buf();
    let dataset = cfg.dataset().map_err(invalid)?;
    Ok((dataset, out))
}

pub fn run_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Outcome<RunRecord> {
    let (dataset, dir) = prepare(cfg)?;
    let tc = cfg.train_config(cfg.method, cfg.seed, cfg.alpha, cfg.beta);
    tc.validate(dataset.modalities()).map_err(invalid)?;
    let res = run_into(&tc, &dataset, &dir, cfg.diagnostics, &cfg.echo());
    if let Ok(record) = &res {
        let _ = writeln!(out, "{}", summary_line("train", record, &[]));
    }
    res
}

/// Final-epoch results of one (method, seed) run in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub method: MethodKind,
    pub seed: u64,
    pub last: Option<MetricsRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per method: final accuracy per seed, then means over the
/// successful seeds.
pub fn compare_csv(methods: &[MethodKind], seeds: &[u64], cells: &[CompareCell], modalities: usize) -> String {
    let mut s = String::from("method");
    for seed in seeds {
        let _ = write!(s, ",acc_seed{seed}");
    }
    s.push_str(",mean_acc");
    for u in 0..modalities {
        let _ = write!(s, ",mean_acc_m{u}");
    }
    s.push_str(",mean_ratio_m0_over_m1,failed_runs\n");
    for &method in methods {
        let mine: Vec<&CompareCell> = cells.iter().filter(|c| c.method == method).collect();
        s.push_str(method.as_str());
        for seed in seeds {
            let cell = mine.iter().find(|c| c.seed == *seed).and_then(|c| c.last.as_ref());
            let _ = write!(s, ",{}", cell.map_or_else(|| "failed".into(), |r| fmt_sig6(r.accuracy)));
        }
        let ok: Vec<&MetricsRow> = mine.iter().filter_map(|c| c.last.as_ref()).collect();
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), fmt_sig6);
        let _ = write!(s, ",{}", fmt(mean(ok.iter().map(|r| r.accuracy))));
        for u in 0..modalities {
            let _ = write!(s, ",{}", fmt(mean(ok.iter().map(|r| r.modality_accuracy[u]))));
        }
        let ratios: Vec<Option<f64>> = ok.iter().map(|r| r.ratio).collect();
        let ratio = if ratios.iter().all(Option::is_some) {
            mean(ratios.iter().flatten().copied())
        } else {
            None
        };
        let _ = writeln!(s, ",{},{}", fmt(ratio), mine.len() - ok.len());
    }
    s
}

pub fn run_compare(cfg: &ExperimentConfig, out: &mut dyn Write, err: &mut dyn Write) -> Outcome<Vec<CompareCell>> {
    let methods = match &cfg.methods {
        Some(m) if !m.is_empty() => m.clone(),
        _ => return Err(invalid(Error::config("methods", "compare needs a non-empty method list"))),
    };
    let seeds = cfg.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    if seeds.is_empty() {
        return Err(invalid(Error::config("seeds", "must not be empty")));
    }
    let (dataset, dir) = prepare(cfg)?;
    for &method in &methods {
        cfg.train_config(method, seeds[0], cfg.alpha, cfg.beta)
            .validate(dataset.modalities())
            .map_err(invalid)?;
    }
    create_dir(&dir)?;
    write_file(&dir.join(ECHO_FILE), &cfg.echo())?;

    let mut cells = Vec::new();
    for &method in &methods {
        for &seed in &seeds {
            let tc = cfg.train_config(method, seed, cfg.alpha, cfg.beta);
            let mut sub = cfg.clone();
            sub.method = method;
            sub.seed = seed;
            sub.methods = None;
            sub.seeds = None;
            let run_dir = dir.join("runs").join(format!("{method}-seed{seed}"));
            sub.out = Some(run_dir.clone());
            let last = match run_into(&tc, &dataset, &run_dir, cfg.diagnostics, &sub.echo()) {
                Ok(record) => {
                    let _ = writeln!(out, "{}", summary_line("compare", &record, &[]));
                    record.last().cloned()
                }
                Err(f) => {
                    let _ = writeln!(err, "{SUMMARY_PREFIX}error|method={method}|seed={seed}|{f}");
                    None
                }
            };
            cells.push(CompareCell { method, seed, last });
        }
    }
    write_file(&dir.join("compare.csv"), &compare_csv(&methods, &seeds, &cells, dataset.modalities()))?;
    let failed = cells.iter().filter(|c| c.last.is_none()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} runs failed", cells.len())));
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    /// The run used `eps_beta` in place of a zero `beta`.
    pub beta_substituted: bool,
    pub last: Option<MetricsRow>,
}

/// Grid points in row-major (alpha, beta) order with exact duplicates
/// removed; the second value is the number of points dropped.
pub fn sweep_points(grid: &SweepGrid) -> (Vec<(f64, f64)>, usize) {
    let mut seen = BTreeSet::new();
    let mut points = Vec::new();
    let mut dropped = 0;
    for &a in &grid.alpha {
        for &b in &grid.beta {
            // +0.0 normalises -0.0 so the two compare as duplicates
            if seen.insert(((a + 0.0).to_bits(), (b + 0.0).to_bits())) {
                points.push((a, b));
            } else {
                dropped += 1;
            }
        }
    }
    (points, dropped)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("alpha,beta,test_acc,ratio_m0_over_m1,beta_substituted,status\n");
    for p in points {
        let (acc, ratio, status) = match &p.last {
            Some(r) => (fmt_sig6(r.accuracy), fmt_ratio(r.ratio), "ok"),
            None => ("undefined".into(), "undefined".into(), "failed"),
        };
        let _ = writeln!(
            s,
            "{},{},{acc},{ratio},{},{status}",
            fmt_sig6(p.alpha),
            fmt_sig6(p.beta),
            u8::from(p.beta_substituted)
        );
    }
    s
}

pub fn run_sweep(cfg: &ExperimentConfig, out: &mut dyn Write, err: &mut dyn Write) -> Outcome<Vec<SweepPoint>> {
    let grid = match &cfg.sweep {
        Some(g) if !g.alpha.is_empty() && !g.beta.is_empty() => g.clone(),
        _ => return Err(invalid(Error::config("sweep", "needs non-empty `alpha` and `beta` lists"))),
    };
    let (points, dropped) = sweep_points(&grid);
    let (dataset, dir) = prepare(cfg)?;
    for &(a, b) in &points {
        cfg.train_config(cfg.method, cfg.seed, a, b)
            .validate(dataset.modalities())
            .map_err(invalid)?;
    }
    if dropped > 0 {
        let _ = writeln!(err, "{SUMMARY_PREFIX}warning|dropped {dropped} duplicate sweep points");
    }
    create_dir(&dir)?;
    write_file(&dir.join(ECHO_FILE), &cfg.echo())?;

    let mut results = Vec::new();
    for (a, b) in points {
        let tc = cfg.train_config(cfg.method, cfg.seed, a, b);
        let beta_substituted = b == 0.0;
        let mut sub = cfg.clone();
        sub.alpha = a;
        sub.beta = b;
        sub.sweep = None;
        let run_dir = dir.join("runs").join(format!("alpha{a}-beta{b}"));
        sub.out = Some(run_dir.clone());
        let flag = ("beta_substituted", u8::from(beta_substituted).to_string());
        let last = match run_into(&tc, &dataset, &run_dir, cfg.diagnostics, &sub.echo()) {
            Ok(record) => {
                let extra = [("alpha", fmt_sig6(a)), ("beta", fmt_sig6(b)), flag];
                let _ = writeln!(out, "{}", summary_line("sweep", &record, &extra));
                record.last().cloned()
            }
            Err(f) => {
                let _ = writeln!(err, "{SUMMARY_PREFIX}error|alpha={a}|beta={b}|{f}");
                None
            }
        };
        results.push(SweepPoint {
            alpha: a,
            beta: b,
            beta_substituted,
            last,
        });
    }
    write_file(&dir.join("sweep.csv"), &sweep_csv(&results))?;
    let failed = results.iter().filter(|p| p.last.is_none()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} sweep points failed", results.len())));
    }
    Ok(results)
}
