//! `key = value` run configuration. `#` starts a comment; blank lines are
//! ignored.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{BiasedDatasetSpec, DataSource};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numcore::AdamConfig;
use crate::objective::GroupWeights;
use crate::sparsity::{AllocationMethod, GrowthCriterion, TopologySchedule};
use crate::trainers::{MrmConfig, SparseSetup, SparsityConfig, TrainLoopConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Erm,
    ErmReweighted,
    Set,
    Rigl,
    Rest,
    Mrm,
}

impl Method {
    pub fn is_sparse(self) -> bool {
        matches!(self, Method::Set | Method::Rigl | Method::Rest)
    }

    pub fn is_reweighted(self) -> bool {
        matches!(self, Method::ErmReweighted | Method::Rest)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "erm" => Method::Erm,
            "erm_rw" => Method::ErmReweighted,
            "set" => Method::Set,
            "rigl" => Method::Rigl,
            "rest" => Method::Rest,
            "mrm" => Method::Mrm,
            _ => return Err(format!("unknown method {s:?} (erm|erm_rw|set|rigl|rest|mrm)")),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Erm => "erm",
            Method::ErmReweighted => "erm_rw",
            Method::Set => "set",
            Method::Rigl => "rigl",
            Method::Rest => "rest",
            Method::Mrm => "mrm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Density,
    Ratio,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "density" => Ok(SweepAxis::Density),
            "ratio" => Ok(SweepAxis::Ratio),
            _ => Err(format!("unknown sweep axis {s:?} (density|ratio)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Density => "density",
            SweepAxis::Ratio => "ratio",
        })
    }
}

/// Sparsity penalty used by `mrm` when `mrm_alpha` is not given.
pub const DEFAULT_MRM_ALPHA: f64 = 1e-3;

/// A fully resolved experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub data: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub conflict_ratio: f64,
    pub data_seed: u64,
    pub cnn_width: usize,
    pub density: f64,
    pub allocation: AllocationMethod,
    pub beta: f64,
    /// False when `beta` came from the conflict-ratio default table.
    pub beta_explicit: bool,
    pub growth: GrowthCriterion,
    pub r0: f64,
    pub delta_t: usize,
    pub t_end: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_every: usize,
    pub train_eval_examples: usize,
    pub mrm_pretrain_steps: usize,
    pub mrm_probe_steps: usize,
    pub mrm_alpha: f64,
    pub mrm_rounds: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,
}

/// Every accepted key with its default, as shown by `--help`.
pub const CONFIG_HELP: &str = "\
Config keys (`key = value`, `#` comments):
  method               erm | erm_rw | set | rigl | rest | mrm   (required)
  data                 synth | idx:<dir with MNIST IDX files>   [synth]
  n_train              training examples                        [10000]
  n_test               unbiased test examples                   [2000]
  conflict_ratio       bias-conflicting share in (0,1)          [0.01]
  data_seed            dataset generation seed                  [0]
  cnn_width            channels of the first conv block          [64]
  density              global weight density in (0,1]           [0.05]
  allocation           uniform | er | erk                       [erk]
  beta                 conflicting-example weight >= 1          [0.5%->10, 1%->30, 2%->50, 5%->80]
  growth               gradient | random                        [random for set, else gradient]
  r0                   initial exploration rate in [0,1)        [0.3]
  delta_t              topology update interval                 [steps/10 clamped to 1..1000]
  t_end                last topology update step                [0.75 * steps]
  steps                optimizer steps                          [3000]
  batch                batch size >= 2                          [128]
  lr                   Adam learning rate                       [0.01]
  wd                   L2 weight decay                          [0.0001]
  beta1, beta2         Adam moment decay                        [0.9, 0.999]
  eval_every           steps between evaluations                [steps/10]
  train_eval_examples  training examples scored for accuracy    [2000]
  mrm_pretrain_steps   dense pretraining and retraining steps   [steps]
  mrm_probe_steps      mask probing steps                       [steps/3]
  mrm_alpha            mask sparsity penalty >= 0               [0.001]
  mrm_rounds           probe + retrain repetitions              [1]
  seeds                comma-separated training seeds           [0,1,2]
  out                  CSV output path                          [results.csv]
  sweep_axis           density | ratio                          (sweep only)
  sweep_values         comma-separated values                   (sweep only)";

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => parse(&raw).map(Some).map_err(|m| Error::Config { line, message: format!("{key}: {m}") }),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(l, _)| *l)
    }
}

fn number<T: FromStr>(raw: &str) -> Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse {raw:?} as a number"))
}

fn in_range(lo: f64, hi: f64, lo_open: bool, hi_open: bool) -> impl Fn(&str) -> Result<f64, String> {
    move |raw| {
        let v: f64 = number(raw)?;
        let ok = v.is_finite()
            && if lo_open { v > lo } else { v >= lo }
            && if hi_open { v < hi } else { v <= hi };
        if ok {
            Ok(v)
        } else {
            let l = if lo_open { '(' } else { '[' };
            let r = if hi_open { ')' } else { ']' };
            Err(format!("{v} outside domain {l}{lo}, {hi}{r}"))
        }
    }
}

fn positive(raw: &str) -> Result<usize, String> {
    match number::<usize>(raw)? {
        0 => Err("must be positive".into()),
        v => Ok(v),
    }
}

fn list<T: FromStr>(raw: &str) -> Result<Vec<T>, String> {
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list item {s:?}")))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn parse_with<T: FromStr>(raw: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e: T::Err| e.to_string())
}

/// Comma-separated seed list, as accepted by `--seeds`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    list(raw).map_err(|m| Error::invalid(format!("seeds: {m}")))
}

/// Parses and validates a config; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, true).map(|(c, _)| c)
}

/// Like [`parse_config`]; with `strict == false` unknown keys are returned
/// as warnings instead of failing.
pub fn parse_config_with(text: &str, strict: bool) -> Result<(RunConfig, Vec<String>)> {
    let mut map = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::Config { line, message: format!("expected `key = value`, got {content:?}") });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config { line, message: "empty key or value".into() });
        }
        if let Some((first, _)) = map.insert(k.clone(), (line, v)) {
            return Err(Error::Config { line, message: format!("duplicate key {k:?} (first set on line {first})") });
        }
    }
    let mut e = Entries { map };

    let method = e.take("method", parse_with::<Method>)?.ok_or(Error::Config { line: 0, message: "missing required key `method`".into() })?;
    let data = e
        .take("data", |raw| match raw {
            "synth" => Ok(DataSource::SynthGlyphs),
            _ => raw
                .strip_prefix("idx:")
                .filter(|d| !d.is_empty())
                .map(|d| DataSource::Idx(PathBuf::from(d)))
                .ok_or_else(|| format!("expected `synth` or `idx:<dir>`, got {raw:?}")),
        })?
        .unwrap_or(DataSource::SynthGlyphs);
    let n_train = e.take("n_train", positive)?.unwrap_or(10_000);
    let n_test = e.take("n_test", positive)?.unwrap_or(2_000);
    let ratio_line = e.line("conflict_ratio");
    let conflict_ratio = e.take("conflict_ratio", in_range(0.0, 1.0, true, true))?.unwrap_or(0.01);
    let data_seed = e.take("data_seed", number::<u64>)?.unwrap_or(0);
    let cnn_width = e.take("cnn_width", positive)?.unwrap_or(64);
    let density = e.take("density", in_range(0.0, 1.0, true, false))?.unwrap_or(0.05);
    let allocation = e.take("allocation", parse_with::<AllocationMethod>)?.unwrap_or(AllocationMethod::Erk);
    let explicit_beta = e.take("beta", in_range(1.0, f64::MAX, false, false))?;
    let beta_explicit = explicit_beta.is_some();
    let beta = match explicit_beta {
        Some(b) => b,
        None if method.is_reweighted() => GroupWeights::default_beta(conflict_ratio).ok_or(Error::Config {
            line: ratio_line,
            message: format!("no default beta for conflict_ratio {conflict_ratio}; set `beta`"),
        })?,
        None => 1.0,
    };
    let growth = e.take("growth", parse_with::<GrowthCriterion>)?.unwrap_or(match method {
        Method::Set => GrowthCriterion::Random,
        _ => GrowthCriterion::Gradient,
    });
    let r0 = e.take("r0", in_range(0.0, 1.0, false, true))?.unwrap_or(0.3);
    let steps = e.take("steps", positive)?.unwrap_or(3000);
    let default_schedule = TopologySchedule::for_run(steps, growth);
    let delta_t = e.take("delta_t", positive)?.unwrap_or(default_schedule.delta_t);
    let t_end = e.take("t_end", number::<usize>)?.unwrap_or(default_schedule.t_end);
    let batch = e
        .take("batch", |raw| match number::<usize>(raw)? {
            b if b >= 2 => Ok(b),
            b => Err(format!("{b} below minimum 2")),
        })?
        .unwrap_or(128);
    let lr = e.take("lr", in_range(0.0, f64::MAX, false, false))?.unwrap_or(1e-2);
    let wd = e.take("wd", in_range(0.0, f64::MAX, false, false))?.unwrap_or(1e-4);
    let beta1 = e.take("beta1", in_range(0.0, 1.0, true, true))?.unwrap_or(0.9);
    let beta2 = e.take("beta2", in_range(0.0, 1.0, true, true))?.unwrap_or(0.999);
    let eval_line = e.line("eval_every");
    let eval_every = e.take("eval_every", positive)?.unwrap_or((steps / 10).max(1));
    let train_eval_examples = e.take("train_eval_examples", positive)?.unwrap_or(2000);
    let mrm_pretrain_steps = e.take("mrm_pretrain_steps", positive)?.unwrap_or(steps);
    let mrm_probe_steps = e.take("mrm_probe_steps", positive)?.unwrap_or((steps / 3).max(1));
    let mrm_alpha = e.take("mrm_alpha", in_range(0.0, f64::MAX, false, false))?.unwrap_or(DEFAULT_MRM_ALPHA);
    let mrm_rounds = e.take("mrm_rounds", positive)?.unwrap_or(1);
    let seeds = e.take("seeds", list::<u64>)?.unwrap_or_else(|| vec![0, 1, 2]);
    let out = e.take("out", |raw| Ok(PathBuf::from(raw)))?;
    let sweep_axis = e.take("sweep_axis", parse_with::<SweepAxis>)?;
    let sweep_values = e.take("sweep_values", list::<f64>)?.unwrap_or_default();

    if eval_every > steps {
        return Err(Error::Config { line: eval_line, message: format!("eval_every {eval_every} exceeds steps {steps}") });
    }
    let warnings: Vec<String> = e.map.iter().map(|(k, (line, _))| format!("line {line}: unknown key {k:?}")).collect();
    if strict {
        if let Some((k, (line, _))) = e.map.iter().next() {
            return Err(Error::Config { line: *line, message: format!("unknown key {k:?}") });
        }
    }
    let config = RunConfig {
        method,
        data,
        n_train,
        n_test,
        conflict_ratio,
        data_seed,
        cnn_width,
        density,
        allocation,
        beta,
        beta_explicit,
        growth,
        r0,
        delta_t,
        t_end,
        steps,
        batch,
        lr,
        wd,
        beta1,
        beta2,
        eval_every,
        train_eval_examples,
        mrm_pretrain_steps,
        mrm_probe_steps,
        mrm_alpha,
        mrm_rounds,
        seeds,
        out,
        sweep_axis,
        sweep_values,
    };
    if config.batch > config.n_train {
        return Err(Error::Config { line: 0, message: format!("batch {} exceeds n_train {}", config.batch, config.n_train) });
    }
    Ok((config, warnings))
}

impl RunConfig {
    /// Every setting that influences results, one `key = value` per line in
    /// a fixed order. Seeds and output paths are excluded.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let data = match &self.data {
            DataSource::SynthGlyphs => "synth".to_string(),
            DataSource::Idx(dir) => format!("idx:{}", dir.display()),
        };
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "data = {data}");
        let _ = writeln!(s, "n_train = {}\nn_test = {}\nconflict_ratio = {}\ndata_seed = {}", self.n_train, self.n_test, self.conflict_ratio, self.data_seed);
        let _ = writeln!(s, "cnn_width = {}\nsteps = {}\nbatch = {}\nlr = {}\nwd = {}", self.cnn_width, self.steps, self.batch, self.lr, self.wd);
        let _ = writeln!(s, "beta1 = {}\nbeta2 = {}\neval_every = {}\ntrain_eval_examples = {}", self.beta1, self.beta2, self.eval_every, self.train_eval_examples);
        if self.method.is_reweighted() {
            let _ = writeln!(s, "beta = {}", self.beta);
        }
        if self.method.is_sparse() {
            let _ = writeln!(s, "density = {}\nallocation = {}\ngrowth = {}", self.density, self.allocation, self.growth);
            let _ = writeln!(s, "r0 = {}\ndelta_t = {}\nt_end = {}", self.r0, self.delta_t, self.t_end);
        }
        if self.method == Method::Mrm {
            let _ = writeln!(s, "mrm_pretrain_steps = {}\nmrm_probe_steps = {}", self.mrm_pretrain_steps, self.mrm_probe_steps);
            let _ = writeln!(s, "mrm_alpha = {}\nmrm_rounds = {}", self.mrm_alpha, self.mrm_rounds);
        }
        s
    }

    /// This config with `axis` set to `value`. Along the ratio axis a
    /// defaulted beta follows the new ratio.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<RunConfig> {
        let mut c = self.clone();
        let bad = |m: String| Error::Config { line: 0, message: m };
        match axis {
            SweepAxis::Density => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(bad(format!("sweep density {value} outside (0, 1]")));
                }
                c.density = value;
            }
            SweepAxis::Ratio => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(bad(format!("sweep conflict_ratio {value} outside (0, 1)")));
                }
                c.conflict_ratio = value;
                if c.method.is_reweighted() && !c.beta_explicit {
                    c.beta = GroupWeights::default_beta(value)
                        .ok_or_else(|| bad(format!("no default beta for conflict_ratio {value}; set `beta`")))?;
                }
            }
        }
        Ok(c)
    }

    pub fn dataset_spec(&self) -> BiasedDatasetSpec {
        BiasedDatasetSpec {
            source: self.data.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
            conflict_ratio: self.conflict_ratio,
            seed: self.data_seed,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::simple_cnn_with_width(self.cnn_width, 10)
    }

    pub fn loop_config(&self, seed: u64) -> TrainLoopConfig {
        TrainLoopConfig {
            total_steps: self.steps,
            batch_size: self.batch,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.wd },
            eval_every: self.eval_every,
            seed,
            train_eval_examples: self.train_eval_examples,
        }
    }

    pub fn sparse_setup(&self) -> Result<SparseSetup> {
        let growth = match self.method {
            Method::Set => GrowthCriterion::Random,
            Method::Rigl => GrowthCriterion::Gradient,
            _ => self.growth,
        };
        Ok(SparseSetup {
            sparsity: SparsityConfig { method: self.allocation, density: self.density },
            schedule: TopologySchedule::new(self.r0, self.delta_t, self.t_end, growth)?,
        })
    }

    pub fn mrm_config(&self) -> MrmConfig {
        MrmConfig {
            pretrain_steps: self.mrm_pretrain_steps,
            probe_steps: self.mrm_probe_steps,
            alpha: self.mrm_alpha,
            rounds: self.mrm_rounds,
        }
    }

    /// Loss weight actually applied to conflicting examples.
    pub fn effective_beta(&self) -> f64 {
        if self.method.is_reweighted() {
            self.beta
        } else {
            1.0
        }
    }
}
