//! CSV records and number formatting.

use std::fmt::Write as _;

/// Column order of every metrics CSV, independent of the method.
pub const METRICS_COLUMNS: [&str; 14] = [
    "run_id",
    "method",
    "seed",
    "step",
    "density",
    "conflict_ratio",
    "beta",
    "train_loss",
    "overall_acc",
    "unbiased_acc",
    "conflicting_acc",
    "worst_group_acc",
    "params_active",
    "cumulative_train_flops",
];

/// One evaluation point of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub step: usize,
    pub density: f64,
    pub conflict_ratio: f64,
    pub beta: f64,
    pub train_loss: f64,
    /// Accuracy on (a prefix of) the biased training set.
    pub overall_acc: f64,
    pub unbiased_acc: f64,
    pub conflicting_acc: f64,
    pub worst_group_acc: f64,
    pub params_active: u64,
    pub cumulative_train_flops: u64,
}

impl MetricsRow {
    pub fn header() -> String {
        METRICS_COLUMNS.join(",")
    }

    pub fn to_csv(&self) -> String {
        [
            self.run_id.clone(),
            self.method.clone(),
            self.seed.to_string(),
            self.step.to_string(),
            fmt_g(self.density),
            fmt_g(self.conflict_ratio),
            fmt_g(self.beta),
            fmt_g(self.train_loss),
            fmt_g(self.overall_acc),
            fmt_g(self.unbiased_acc),
            fmt_g(self.conflicting_acc),
            fmt_g(self.worst_group_acc),
            self.params_active.to_string(),
            self.cumulative_train_flops.to_string(),
        ]
        .join(",")
    }
}

/// Header plus one line per row, `\n` terminated.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = MetricsRow::header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// `printf("%g")`: six significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-4, 1e6)`.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        let mut s = String::new();
        let _ = write!(s, "{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs());
        return s;
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Sample mean and standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
