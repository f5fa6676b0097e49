//! Built-in job kernels. They ship with every agent and with the local
//! runner; submissions carry only inputs and parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{CancelToken, Clock};
use crate::model::JobKind;

/// Stand-in for an infinite F when the residual sum of squares is zero.
pub const F_CAP: f64 = 1e12;

/// Relative size of SSE (against the total sum of squares) treated as an
/// exact fit.
const EXACT_FIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitStatus {
    Ok,
    Error,
}

impl ExitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitStatus::Ok => "ok",
            ExitStatus::Error => "error",
        }
    }
}

impl std::str::FromStr for ExitStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(ExitStatus::Ok),
            "error" => Ok(ExitStatus::Error),
            _ => Err(format!("exit_status must be ok or error, got {s:?}")),
        }
    }
}

/// Named files, kept sorted by name.
pub type Files = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelResult {
    pub exit_status: ExitStatus,
    pub outputs: Files,
    pub log_text: String,
}

impl KernelResult {
    fn error(log: impl Into<String>) -> Self {
        let mut log_text = log.into();
        if log_text.is_empty() {
            log_text = "kernel failed".into();
        }
        KernelResult {
            exit_status: ExitStatus::Error,
            outputs: Files::new(),
            log_text,
        }
    }
}

/// Execution strategy for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    /// Uses rayon when the `parallel` feature is on, otherwise sequential.
    #[default]
    Parallel,
}

/// Nominal clock duration of a job, used where runtime is modeled rather
/// than waited out (simulation, the grid backend).
pub fn nominal_duration(kind: JobKind, params: &BTreeMap<String, String>) -> Duration {
    let ms = params
        .get("duration_ms")
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    match kind {
        JobKind::Sleep | JobKind::RegressionScan => Duration::from_millis(ms),
    }
}

/// Runs a kernel to completion. Never panics outward: failures and
/// crashes become `ExitStatus::Error` with a log.
///
/// `clock` governs sleeps; pass a virtual clock to skip waiting. Returns
/// `None` if `cancel` fired before the kernel finished.
pub fn run_kernel(
    kind: JobKind,
    params: &BTreeMap<String, String>,
    inputs: &Files,
    clock: &dyn Clock,
    cancel: &CancelToken,
) -> Option<KernelResult> {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match kind {
        JobKind::Sleep => sleep_kernel(params, clock, cancel),
        JobKind::RegressionScan => Some(scan_kernel(inputs, ExecMode::Parallel, cancel)),
    }));
    match outcome {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Some(KernelResult::error(format!("kernel crashed: {msg}")))
        }
    }
}

fn sleep_kernel(
    params: &BTreeMap<String, String>,
    clock: &dyn Clock,
    cancel: &CancelToken,
) -> Option<KernelResult> {
    let duration = match params.get("duration_ms").map(|v| v.trim().parse::<u64>()) {
        None => 0,
        Some(Ok(ms)) => ms,
        Some(Err(e)) => return Some(KernelResult::error(format!("bad duration_ms: {e}"))),
    };
    let fail = params
        .get("fail")
        .is_some_and(|v| matches!(v.trim(), "true" | "1" | "yes"));
    if cancel.sleep(clock, Duration::from_millis(duration)) {
        return None;
    }
    if fail {
        return Some(KernelResult::error(format!(
            "sleep kernel asked to fail after {duration} ms"
        )));
    }
    let mut outputs = Files::new();
    outputs.insert(
        "done.txt".into(),
        format!("slept {duration} ms\n").into_bytes(),
    );
    Some(KernelResult {
        exit_status: ExitStatus::Ok,
        outputs,
        log_text: format!("slept {duration} ms"),
    })
}

fn scan_kernel(inputs: &Files, mode: ExecMode, cancel: &CancelToken) -> KernelResult {
    let data = match ScanInput::from_files(inputs) {
        Ok(d) => d,
        Err(e) => return KernelResult::error(e),
    };
    let profile = f_profile(&data, mode);
    if cancel.is_cancelled() {
        return KernelResult::error("cancelled");
    }
    let peak = peak(&profile);
    let mut outputs = Files::new();
    outputs.insert(
        "fprofile.tsv".into(),
        format_fprofile(&profile).into_bytes(),
    );
    outputs.insert(
        "peak.json".into(),
        serde_json::to_vec(&peak).expect("peak serializes"),
    );
    KernelResult {
        exit_status: ExitStatus::Ok,
        outputs,
        log_text: format!(
            "scanned {} markers over {} individuals; peak marker {} F={}",
            data.markers(),
            data.individuals(),
            peak.marker,
            fmt_sig(peak.f, 12)
        ),
    }
}

/// Genotype matrix (stored by marker) and phenotype vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanInput {
    /// `columns[j][i]` is the genotype code of individual `i` at marker `j`.
    pub columns: Vec<Vec<f64>>,
    pub phenotype: Vec<f64>,
}

impl ScanInput {
    pub fn individuals(&self) -> usize {
        self.phenotype.len()
    }

    pub fn markers(&self) -> usize {
        self.columns.len()
    }

    pub fn from_files(inputs: &Files) -> Result<Self, String> {
        let geno = inputs.get("geno.csv").ok_or("missing input geno.csv")?;
        let pheno = inputs.get("pheno.csv").ok_or("missing input pheno.csv")?;
        Self::parse(
            std::str::from_utf8(geno).map_err(|_| "geno.csv is not UTF-8")?,
            std::str::from_utf8(pheno).map_err(|_| "pheno.csv is not UTF-8")?,
        )
    }

    /// Parses `geno.csv` (one row per individual, comma-separated codes in
    /// {0,1,2}) and `pheno.csv` (one real per line).
    pub fn parse(geno: &str, pheno: &str) -> Result<Self, String> {
        let rows: Vec<Vec<u8>> = geno
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.split(',')
                    .map(|cell| match cell.trim() {
                        "0" => Ok(0u8),
                        "1" => Ok(1),
                        "2" => Ok(2),
                        other => Err(format!(
                            "geno.csv row {}: genotype {other:?} is not 0, 1 or 2",
                            i + 1
                        )),
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let phenotype: Vec<f64> = pheno
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        format!("pheno.csv line {}: {l:?} is not a finite number", i + 1)
                    })
            })
            .collect::<Result<_, _>>()?;
        let n = rows.len();
        if n != phenotype.len() {
            return Err(format!(
                "geno.csv has {n} individuals but pheno.csv has {}",
                phenotype.len()
            ));
        }
        if n < 3 {
            return Err(format!("at least 3 individuals are required, got {n}"));
        }
        let m = rows[0].len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(format!(
                "geno.csv row {} has {} markers, expected {m}",
                i + 1,
                r.len()
            ));
        }
        let columns = (0..m)
            .map(|j| rows.iter().map(|r| f64::from(r[j])).collect())
            .collect();
        Ok(ScanInput { columns, phenotype })
    }
}

/// F statistic for one marker: simple regression of y on g, F = SSR / (SSE/(n-2)).
pub fn marker_f(g: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let gbar = g.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (gi, yi) in g.iter().zip(y) {
        let dg = gi - gbar;
        let dy = yi - ybar;
        sxx += dg * dg;
        sxy += dg * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    let ssr = sxy * sxy / sxx;
    let sse = (syy - ssr).max(0.0);
    if sse <= EXACT_FIT_TOL * syy {
        return F_CAP;
    }
    (ssr / (sse / (n - 2.0))).min(F_CAP)
}

/// F statistic for every marker, in marker order.
pub fn f_profile(data: &ScanInput, mode: ExecMode) -> Vec<f64> {
    let y = &data.phenotype;
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            data.columns.par_iter().map(|g| marker_f(g, y)).collect()
        }
        _ => data.columns.iter().map(|g| marker_f(g, y)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// 1-based marker index.
    pub marker: usize,
    pub f: f64,
}

/// First marker with the largest F.
pub fn peak(profile: &[f64]) -> Peak {
    let mut best = Peak { marker: 1, f: 0.0 };
    for (j, &f) in profile.iter().enumerate() {
        if j == 0 || f > best.f {
            best = Peak { marker: j + 1, f };
        }
    }
    best
}

pub fn format_fprofile(profile: &[f64]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# regression-scan F profile; F={} when SSE=0; F=0 for a constant marker or phenotype",
        fmt_sig(F_CAP, 12)
    );
    out.push_str("marker_index\tF\n");
    for (j, f) in profile.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}", j + 1, fmt_sig(*f, 12));
    }
    out
}

/// Parses an `fprofile.tsv` back into F values (in marker order).
pub fn parse_fprofile(text: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("marker_index") || line.trim().is_empty() {
            continue;
        }
        let (idx, f) = line
            .split_once('\t')
            .ok_or_else(|| format!("bad line {line:?}"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad index in {line:?}"))?;
        if idx != out.len() + 1 {
            return Err(format!("marker index {idx} out of order"));
        }
        out.push(f.parse::<f64>().map_err(|_| format!("bad F in {line:?}"))?);
    }
    Ok(out)
}

/// Formats with `sig` significant digits, like C's `%.{sig}g`.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        let mantissa = trim_zeros(mantissa);
        format!("{mantissa}e{exp}")
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
