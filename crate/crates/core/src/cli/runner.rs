//! Runs, sweeps and the helper verbs behind the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, ActiveWeights, CostReport, Phase};
use crate::models::{save_checkpoint, Checkpoint, Model};
use crate::objective::GroupWeights;
use crate::sparsity::{write_mask_snapshot, SparseNet};
use crate::trainers::{train_erm, train_mrm, train_rest, EvalPoint, TrainData, TrainOutcome};

use super::config::{Method, RunConfig, SweepAxis};
use super::csv::{fmt_g, mean_std, metrics_csv, MetricsRow};

/// First 12 hex digits of the SHA-256 of [`RunConfig::canonical`].
pub fn run_id(config: &RunConfig) -> String {
    let digest = Sha256::digest(config.canonical().as_bytes());
    digest[..6].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Checks everything that can be checked without training, including
/// whether the density allocation is feasible for the model.
pub fn preflight(config: &RunConfig) -> Result<()> {
    let spec = config.model_spec()?;
    config.loop_config(0).validate()?;
    if config.method.is_sparse() {
        let setup = config.sparse_setup()?;
        let mut model: Model = Model::zeroed(spec);
        SparseNet::init(&mut model, setup.sparsity.method, setup.sparsity.density, 0)?;
    }
    if config.method == Method::Mrm {
        config.mrm_config().validate()?;
    }
    Ok(())
}

/// Trains one seed. The model is initialized from `seed`.
pub fn train_seed(config: &RunConfig, data: TrainData<'_>, seed: u64, sink: &mut dyn FnMut(&EvalPoint)) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::init(config.model_spec()?, seed)?;
    let cfg = config.loop_config(seed);
    let outcome = match config.method {
        Method::Erm => train_erm(&mut model, data, &cfg, None, sink)?,
        Method::ErmReweighted => train_erm(&mut model, data, &cfg, Some(&GroupWeights::new(config.beta)?), sink)?,
        Method::Set | Method::Rigl => train_rest(&mut model, data, &cfg, &config.sparse_setup()?, &GroupWeights::unit(), sink)?,
        Method::Rest => train_rest(&mut model, data, &cfg, &config.sparse_setup()?, &GroupWeights::new(config.beta)?, sink)?,
        Method::Mrm => {
            let cfg = crate::trainers::TrainLoopConfig { total_steps: config.mrm_pretrain_steps, ..cfg };
            train_mrm(&mut model, data, &cfg, &config.mrm_config(), sink)?
        }
    };
    Ok((model, outcome))
}

fn row(config: &RunConfig, id: &str, seed: u64, p: &EvalPoint) -> MetricsRow {
    MetricsRow {
        run_id: id.to_string(),
        method: config.method.to_string(),
        seed,
        step: p.step,
        density: p.density,
        conflict_ratio: config.conflict_ratio,
        beta: config.effective_beta(),
        train_loss: p.train_loss,
        overall_acc: p.train_acc,
        unbiased_acc: p.unbiased_acc,
        conflicting_acc: p.conflicting_acc,
        worst_group_acc: p.worst_group_acc,
        params_active: p.params_active,
        cumulative_train_flops: p.cumulative_train_flops,
    }
}

/// Why a run or sweep stopped early.
#[derive(Debug)]
pub enum RunError {
    /// Rejected before any training started.
    Config(Error),
    /// A trainer aborted; rows written so far are kept.
    Aborted(Error),
    Io(Error),
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Aborted(_) => 3,
            RunError::Io(_) => 1,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            RunError::Config(e) | RunError::Aborted(e) | RunError::Io(e) => e,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error().fmt(f)
    }
}

impl std::error::Error for RunError {}

/// `<out>.partial`, written next to the CSV when training aborts.
pub fn partial_marker(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    out.with_file_name(name)
}

/// `<out stem>.seed<k>.ckpt`, next to the CSV.
pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.with_extension(format!("seed{seed}.ckpt"))
}

/// `<out stem>.seed<k>.masks`, written by sparse methods.
pub fn mask_path(out: &Path, seed: u64) -> PathBuf {
    out.with_extension(format!("seed{seed}.masks"))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::Io(e.into()))?;
    }
    fs::write(path, text).map_err(|e| RunError::Io(e.into()))
}

fn abort(csv_path: &Path, rows: &[MetricsRow], error: Error) -> RunError {
    if let Err(e) = write_text(csv_path, &metrics_csv(rows)) {
        return e;
    }
    if let Err(e) = write_text(&partial_marker(csv_path), &format!("{error}\n")) {
        return e;
    }
    RunError::Aborted(error)
}

struct SeedResult {
    seed: u64,
    model: Model,
    net: Option<SparseNet>,
}

/// Trains every seed in order, appending rows as evaluation points arrive.
fn train_seeds(config: &RunConfig, data: TrainData<'_>, seeds: &[u64], rows: &mut Vec<MetricsRow>) -> Result<Vec<SeedResult>> {
    let id = run_id(config);
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (model, outcome) = train_seed(config, data, seed, &mut |p| rows.push(row(config, &id, seed, p)))?;
        results.push(SeedResult { seed, model, net: outcome.net });
    }
    Ok(results)
}

fn build_data(config: &RunConfig) -> Result<(Dataset, Dataset), RunError> {
    config.dataset_spec().build().map_err(RunError::Config)
}

/// Trains `config` once per seed and writes the metrics CSV to `out`, one
/// checkpoint per seed next to it, and mask snapshots for sparse methods.
/// On abort the rows so far are written together with a `.partial` marker.
pub fn run(config: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<MetricsRow>, RunError> {
    if seeds.is_empty() {
        return Err(RunError::Config(Error::invalid("no seeds given")));
    }
    preflight(config).map_err(RunError::Config)?;
    let (train, test) = build_data(config)?;
    let data = TrainData { train: &train, test: &test };
    let mut rows = Vec::new();
    let results = match train_seeds(config, data, seeds, &mut rows) {
        Ok(r) => r,
        Err(e) => return Err(abort(out, &rows, e)),
    };
    write_text(out, &metrics_csv(&rows))?;
    let _ = fs::remove_file(partial_marker(out));
    for r in &results {
        let masks = r.net.as_ref().map(SparseNet::masks).unwrap_or_default();
        save_checkpoint(&checkpoint_path(out, r.seed), &Checkpoint::from_model(&r.model, &masks)).map_err(RunError::Io)?;
        if let Some(net) = &r.net {
            let mut buf = Vec::new();
            write_mask_snapshot(&mut buf, net).map_err(RunError::Io)?;
            fs::write(mask_path(out, r.seed), buf).map_err(|e| RunError::Io(e.into()))?;
        }
    }
    Ok(rows)
}

/// Metrics aggregated over seeds at one sweep value; accuracies are taken
/// at each seed's final evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub axis: SweepAxis,
    pub value: f64,
    pub run_id: String,
    pub n_seeds: usize,
    pub density: f64,
    pub conflict_ratio: f64,
    pub beta: f64,
    /// `(mean, sample std)` pairs.
    pub train_loss: (f64, f64),
    pub overall_acc: (f64, f64),
    pub unbiased_acc: (f64, f64),
    pub conflicting_acc: (f64, f64),
    pub worst_group_acc: (f64, f64),
    pub params_active: f64,
    pub cumulative_train_flops: f64,
}

pub const SWEEP_COLUMNS: &str = "method,axis,value,run_id,n_seeds,density,conflict_ratio,beta,\
train_loss_mean,train_loss_std,overall_acc_mean,overall_acc_std,unbiased_acc_mean,unbiased_acc_std,\
conflicting_acc_mean,conflicting_acc_std,worst_group_acc_mean,worst_group_acc_std,\
params_active_mean,cumulative_train_flops_mean";

impl SweepRow {
    /// Aggregates the last row of each seed in `rows`.
    pub fn from_rows(axis: SweepAxis, value: f64, rows: &[MetricsRow]) -> Result<Self> {
        let mut finals: Vec<&MetricsRow> = Vec::new();
        for r in rows {
            match finals.iter_mut().find(|f| f.seed == r.seed) {
                Some(f) if r.step > f.step => *f = r,
                Some(_) => {}
                None => finals.push(r),
            }
        }
        let first = *finals.first().ok_or_else(|| Error::invalid("no rows to aggregate"))?;
        let stat = |f: fn(&MetricsRow) -> f64| mean_std(&finals.iter().map(|r| f(r)).collect::<Vec<_>>());
        Ok(Self {
            method: first.method.clone(),
            axis,
            value,
            run_id: first.run_id.clone(),
            n_seeds: finals.len(),
            density: stat(|r| r.density).0,
            conflict_ratio: first.conflict_ratio,
            beta: first.beta,
            train_loss: stat(|r| r.train_loss),
            overall_acc: stat(|r| r.overall_acc),
            unbiased_acc: stat(|r| r.unbiased_acc),
            conflicting_acc: stat(|r| r.conflicting_acc),
            worst_group_acc: stat(|r| r.worst_group_acc),
            params_active: stat(|r| r.params_active as f64).0,
            cumulative_train_flops: stat(|r| r.cumulative_train_flops as f64).0,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut cells = vec![
            self.method.clone(),
            self.axis.to_string(),
            fmt_g(self.value),
            self.run_id.clone(),
            self.n_seeds.to_string(),
            fmt_g(self.density),
            fmt_g(self.conflict_ratio),
            fmt_g(self.beta),
        ];
        for (m, s) in [self.train_loss, self.overall_acc, self.unbiased_acc, self.conflicting_acc, self.worst_group_acc] {
            cells.push(fmt_g(m));
            cells.push(fmt_g(s));
        }
        cells.push(fmt_g(self.params_active));
        cells.push(fmt_g(self.cumulative_train_flops));
        cells.join(",")
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_COLUMNS}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// `<out>.runs.csv`: every metrics row behind a sweep.
pub fn sweep_runs_path(out: &Path) -> PathBuf {
    out.with_extension("runs.csv")
}

/// Runs `config` at each value of `axis` for every seed. Writes the
/// aggregate to `out` and all per-run rows to [`sweep_runs_path`], ordered
/// by (value, seed).
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[f64], seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>, RunError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(RunError::Config(Error::invalid("sweep needs at least one value and one seed")));
    }
    let configs: Vec<RunConfig> = values.iter().map(|&v| config.with_axis(axis, v)).collect::<Result<_>>().map_err(RunError::Config)?;
    for c in &configs {
        preflight(c).map_err(RunError::Config)?;
    }
    let runs_path = sweep_runs_path(out);
    let mut all_rows = Vec::new();
    let mut aggregate = Vec::new();
    let mut cached: Option<(crate::data::BiasedDatasetSpec, Dataset, Dataset)> = None;
    for (c, &value) in configs.iter().zip(values) {
        let spec = c.dataset_spec();
        if cached.as_ref().map_or(true, |(s, _, _)| *s != spec) {
            let (train, test) = build_data(c)?;
            cached = Some((spec, train, test));
        }
        let (_, train, test) = cached.as_ref().expect("dataset built above");
        let start = all_rows.len();
        if let Err(e) = train_seeds(c, TrainData { train, test }, seeds, &mut all_rows) {
            return Err(abort(&runs_path, &all_rows, e));
        }
        aggregate.push(SweepRow::from_rows(axis, value, &all_rows[start..]).map_err(RunError::Aborted)?);
    }
    write_text(&runs_path, &metrics_csv(&all_rows))?;
    write_text(out, &sweep_csv(&aggregate))?;
    let _ = fs::remove_file(partial_marker(&runs_path));
    Ok(aggregate)
}

/// Cost reports of the configured model at its configured sparsity and
/// dense, in that order.
pub fn flops_report_counts(config: &RunConfig) -> Result<(CostReport, CostReport)> {
    let spec = config.model_spec()?;
    let dense = count_flops(&spec, &ActiveWeights::dense(), config.batch)?;
    let active = if config.method.is_sparse() {
        let setup = config.sparse_setup()?;
        let mut model: Model = Model::zeroed(spec.clone());
        let (_, allocation) = SparseNet::init(&mut model, setup.sparsity.method, setup.sparsity.density, 0)?;
        ActiveWeights::from_allocation(&spec, &allocation)
    } else {
        ActiveWeights::dense()
    };
    Ok((count_flops(&spec, &active, config.batch)?, dense))
}

/// [`flops_report_counts`] as `key = value` lines.
pub fn flops_report(config: &RunConfig) -> Result<String> {
    let spec = config.model_spec()?;
    let (sparse, dense) = flops_report_counts(config)?;
    let mut s = String::new();
    let _ = writeln!(s, "model = {}", spec.id);
    let _ = writeln!(s, "method = {}", config.method);
    let _ = writeln!(s, "batch = {}", config.batch);
    let _ = writeln!(s, "params_total = {}", sparse.params_total);
    let _ = writeln!(s, "params_active = {}", sparse.params_active);
    let _ = writeln!(s, "infer_flops_per_example = {}", sparse.infer_flops_per_example);
    let _ = writeln!(s, "train_flops_per_example = {}", sparse.train_flops_per_example);
    let _ = writeln!(s, "train_flops_per_step = {}", sparse.train_flops_per_step);
    let _ = writeln!(s, "dense_train_flops_per_step = {}", dense.train_flops_per_step);
    let _ = writeln!(s, "infer_ratio_to_dense = {}", fmt_g(sparse.ratio_to(&dense, Phase::Infer)));
    let _ = writeln!(s, "train_ratio_to_dense = {}", fmt_g(sparse.ratio_to(&dense, Phase::Train)));
    for (i, c) in sparse.per_layer.iter().enumerate() {
        let _ = writeln!(s, "layer{i}_infer_flops = {} + {}", c.weight_flops, c.other_flops);
    }
    Ok(s)
}

/// Writes the biased training split and unbiased test split as
/// `train.rstd` and `test.rstd` under `dir`.
pub fn gen_data(config: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = config.dataset_spec().build()?;
    fs::create_dir_all(dir)?;
    let (tp, vp) = (dir.join("train.rstd"), dir.join("test.rstd"));
    save_dataset(&tp, &train)?;
    save_dataset(&vp, &test)?;
    Ok((tp, vp))
}
