//! Sampler benchmarking and run-report aggregation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::plot::{self, Series};
use crate::ppots::{fit_epr, fit_polynomial, grid, normalize_scatter, FitArtifact, ScatterPoint};
use crate::rng::RngStream;
use crate::stats;
use crate::trainer::{fmt_f64, RunSummary};
use crate::tsampler::{
    default_strata, estimator_variance, optimal_binned, sample_stratified, sample_uniform, Density,
    PiecewiseDensity, TabulatedDensity, WeightedT,
};

/// Analytic conditional mean `g(t)` and variance `v(t)` of the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GvPair {
    /// `g = intercept + slope·t`.
    Linear { intercept: f64, slope: f64, v: f64 },
    /// `g = scale·exp(rate·t)`.
    Exp { scale: f64, rate: f64, v: f64 },
    /// `g = scale·t^exponent`.
    Power { scale: f64, exponent: f64, v: f64 },
}

impl GvPair {
    pub fn g(&self, t: f64) -> f64 {
        match *self {
            Self::Linear { intercept, slope, .. } => intercept + slope * t,
            Self::Exp { scale, rate, .. } => scale * (rate * t).exp(),
            Self::Power { scale, exponent, .. } => scale * t.powf(exponent),
        }
    }

    pub fn v(&self, _t: f64) -> f64 {
        match *self {
            Self::Linear { v, .. } | Self::Exp { v, .. } | Self::Power { v, .. } => v,
        }
    }
}

/// Piecewise-linear interpolation of a scatter's `ĝ` and `v̂`, held constant
/// beyond the end points.
struct ScatterCurves<'a>(&'a [ScatterPoint]);

impl ScatterCurves<'_> {
    fn interp(&self, t: f64, f: impl Fn(&ScatterPoint) -> f64) -> f64 {
        let pts = self.0;
        if t <= pts[0].t {
            return f(&pts[0]);
        }
        let last = pts.len() - 1;
        if t >= pts[last].t {
            return f(&pts[last]);
        }
        let k = pts.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&pts[k], &pts[k + 1]);
        let w = (t - a.t) / (b.t - a.t);
        (1.0 - w) * f(a) + w * f(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub draws: usize,
    pub pair: Option<GvPair>,
    /// Path to a fit artifact; used when no analytic pair is given.
    pub fit: Option<String>,
    /// Batch size for the stratified sampler.
    pub batch: usize,
    pub bins: usize,
    pub poly_degree: usize,
    pub grid_size: usize,
    pub restarts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draws: 100_000,
            pair: Some(GvPair::Exp { scale: 1.0, rate: 1.0, v: 0.1 }),
            fit: None,
            batch: 36,
            bins: 10,
            poly_degree: 4,
            grid_size: 70,
            restarts: 20,
        }
    }
}

/// One sampler's variance figures. Stratified variances are per-sample
/// equivalents: batch size times the variance of the batch mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sampler: String,
    pub analytic_variance: Option<f64>,
    pub mc_variance: f64,
    pub mc_stderr: f64,
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fit: FitArtifact,
    #[serde(skip)]
    pub svg: String,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sampler,analytic_variance,mc_variance,mc_stderr,draws\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sampler,
                r.analytic_variance.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.mc_variance),
                fmt_f64(r.mc_stderr),
                r.draws
            ));
        }
        out
    }

    pub fn row(&self, sampler: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.sampler == sampler)
    }
}

/// Per-draw estimates `w·(g(t) + √v(t)·z)` for a set of weighted rates.
pub fn weighted_draws(
    ts: &[WeightedT],
    g: &dyn Fn(f64) -> f64,
    v: &dyn Fn(f64) -> f64,
    noise: &RngStream,
) -> Vec<f64> {
    let mut s = noise.clone();
    ts.iter()
        .map(|wt| {
            let z: f64 = StandardNormal.sample(&mut s);
            wt.weight * (g(wt.t) + v(wt.t).max(0.0).sqrt() * z)
        })
        .collect()
}

/// Analytic per-sample-equivalent variance of the stratified estimator with
/// `batch / k` draws in each of `k` equal strata.
pub fn stratified_variance(k: usize, g: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / k as f64;
    (0..k)
        .map(|s| {
            let (lo, hi) = (s as f64 * h, (s + 1) as f64 * h);
            let m1 = stats::integrate(&g, lo, hi, 64) / h;
            let m2 = stats::integrate(|t| g(t).powi(2) + v(t), lo, hi, 64) / h;
            m2 - m1 * m1
        })
        .sum::<f64>()
        / k as f64
}

type Curve<'a> = Box<dyn Fn(f64) -> f64 + 'a>;

/// Compare rate samplers on an analytic `(g, v)` pair or a fitted scatter.
pub fn bench_samplers(config: &BenchConfig) -> Result<BenchReport> {
    if config.draws < 2 * config.batch.max(1) {
        return invalid("draws must cover at least two stratified batches");
    }
    if config.batch < 1 || config.bins < 1 {
        return invalid("batch and bins must be positive");
    }
    let root = RngStream::root(config.seed);
    let (scatter, fit) = match (&config.pair, &config.fit) {
        (Some(pair), _) => {
            let t = grid(config.grid_size);
            let g: Vec<f64> = t.iter().map(|&t| pair.g(t)).collect();
            let v: Vec<f64> = t.iter().map(|&t| pair.v(t)).collect();
            let scatter = normalize_scatter(&t, &g, &v)?;
            let fit = fit_epr(&scatter, config.restarts, &root.derive("bench-fit", 0))?;
            let art = FitArtifact::new(&fit, &scatter);
            (scatter, art)
        }
        (None, Some(path)) => {
            let art = FitArtifact::load(Path::new(path))?;
            (art.scatter.clone(), art)
        }
        (None, None) => return invalid("bench needs an analytic (g, v) pair or a fit artifact"),
    };
    if scatter.len() < 2 {
        return invalid("scatter needs at least two points");
    }
    let curves = ScatterCurves(&scatter);
    let (g, v): (Curve, Curve) = match config.pair {
        Some(p) => (Box::new(move |t| p.g(t)), Box::new(move |t| p.v(t))),
        None => (
            Box::new(|t| curves.interp(t, |p| p.g_hat)),
            Box::new(|t| curves.interp(t, |p| p.v_hat)),
        ),
    };
    let analytic = config.pair.is_some();

    let mut densities: Vec<(&str, Box<dyn Density>)> = vec![("uniform", Box::new(PiecewiseDensity::uniform(1)))];
    if let Ok(d) = TabulatedDensity::from_fn(|t| (g(t).powi(2) + v(t)).sqrt()) {
        densities.push(("pstar", Box::new(d)));
    }
    if let Ok(d) = optimal_binned(config.bins, &g, &v) {
        densities.push(("pstar-binned", Box::new(d)));
    }
    densities.push(("epr", Box::new(fit.params.density()?)));
    densities.push(("poly", Box::new(fit_polynomial(&scatter, config.poly_degree)?)));

    let mut rows = Vec::new();
    for (idx, (name, d)) in densities.iter().enumerate() {
        let tstream = root.derive("bench-t", idx as u64);
        let ts = if *name == "uniform" {
            sample_uniform(config.draws, &tstream)
        } else {
            crate::tsampler::sample_density(d.as_ref(), config.draws, &tstream)
        };
        let ys = weighted_draws(&ts, &g, &v, &root.derive("bench-noise", idx as u64));
        rows.push(BenchRow {
            sampler: (*name).into(),
            analytic_variance: analytic.then(|| estimator_variance(d.as_ref(), &g, &v)).transpose()?,
            mc_variance: stats::var(&ys),
            mc_stderr: stats::stderr_of_var(&ys),
            draws: config.draws,
        });
    }

    let k = default_strata(config.batch);
    let batches = config.draws / config.batch;
    let mut means = Vec::with_capacity(batches);
    for b in 0..batches {
        let ts = sample_stratified(config.batch, k, &root.derive("bench-strata-t", b as u64))?;
        let ys = weighted_draws(&ts, &g, &v, &root.derive("bench-strata-noise", b as u64));
        means.push(stats::mean(&ys));
    }
    let n = config.batch as f64;
    rows.push(BenchRow {
        sampler: format!("strata:{k}"),
        analytic_variance: (analytic && config.batch.is_multiple_of(k)).then(|| stratified_variance(k, &g, &v)),
        mc_variance: n * stats::var(&means),
        mc_stderr: n * stats::stderr_of_var(&means),
        draws: batches * config.batch,
    });

    let ts: Vec<f64> = scatter.iter().map(|p| p.t).collect();
    let scale = scatter.len() as f64;
    let p_hat: Vec<f64> = scatter.iter().map(|p| p.p_hat * scale).collect();
    let fine: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
    let lines: Vec<Series> = densities
        .iter()
        .filter(|(n, _)| matches!(*n, "epr" | "poly" | "pstar"))
        .map(|(n, d)| Series { name: (*n).into(), points: fine.iter().map(|&t| (t, d.pdf(t))).collect() })
        .collect();
    let svg = plot::scatter_vs_fit(&ts, &p_hat, lines);
    Ok(BenchReport { rows, fit, svg })
}

/// Identity and outcome of one training run, as stored in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub budget: String,
    pub summary: RunSummary,
}

/// A run loaded back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub curve: Vec<f64>,
    pub wall_seconds: Option<f64>,
}

/// Read `run.json`, `runlog.csv` and optional `timings.json` from a run
/// directory.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
    let csv = std::fs::read_to_string(dir.join("runlog.csv"))?;
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|h| h == "loss")
        .ok_or_else(|| LabError::Invalid("runlog.csv has no loss column".into()))?;
    let curve = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|x| x.parse::<f64>().ok())
                .ok_or_else(|| LabError::Invalid(format!("malformed runlog row `{l}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let wall_seconds = std::fs::read_to_string(dir.join("timings.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.get("wall_seconds").and_then(|x| x.as_f64()));
    Ok(LoadedRun { dir: dir.to_path_buf(), record, curve, wall_seconds })
}

/// Aggregated report over run directories.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub runs: Vec<LoadedRun>,
    pub warnings: Vec<String>,
}

/// Load every readable run; malformed ones become warnings.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return invalid("report needs at least one run directory");
    }
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for d in dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => warnings.push(format!("skipping {}: {e}", d.display())),
        }
    }
    if runs.is_empty() {
        return invalid(format!("no readable runs ({} skipped)", warnings.len()));
    }
    runs.sort_by_key(|r| (label(&r.record), r.record.seed));
    Ok(Report { runs, warnings })
}

fn label(r: &RunRecord) -> String {
    if r.budget == "raw" {
        format!("{} (raw)", r.method)
    } else {
        r.method.clone()
    }
}

impl Report {
    /// Per-seed table: one row per (method, metric), one column per seed,
    /// plus the mean. Metrics: `perf` (last-5 loss), `first5` and `var`
    /// (final variance). Wall clock lives in [`Report::timings`] so the table
    /// stays reproducible.
    pub fn table_csv(&self) -> String {
        let seeds: Vec<u64> = {
            let mut s: Vec<u64> = self.runs.iter().map(|r| r.record.seed).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let mut by_method: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
        for r in &self.runs {
            by_method.entry(label(&r.record)).or_default().push(r);
        }
        let mut out = String::from("method,metric");
        for s in &seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",mean\n");
        type Metric = fn(&LoadedRun) -> Option<f64>;
        let metrics: [(&str, Metric); 3] = [
            ("perf", |r| Some(r.record.summary.last5_mean)),
            ("first5", |r| Some(r.record.summary.first5_mean)),
            ("var", |r| Some(r.record.summary.final_variance)),
        ];
        for (method, runs) in &by_method {
            for (name, f) in &metrics {
                let mut cells = Vec::new();
                let mut vals = Vec::new();
                for s in &seeds {
                    let x = runs.iter().find(|r| r.record.seed == *s).and_then(|r| f(r));
                    if let Some(x) = x {
                        vals.push(x);
                    }
                    cells.push(x.map(fmt_f64).unwrap_or_default());
                }
                let mean = if vals.is_empty() { String::new() } else { fmt_f64(stats::mean(&vals)) };
                out.push_str(&format!("{method},{name},{},{mean}\n", cells.join(",")));
            }
        }
        out
    }

    /// `{label, seed, wall_seconds}` for every run with recorded timing.
    pub fn timings(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.runs
                .iter()
                .map(|r| serde_json::json!({ "method": label(&r.record), "seed": r.record.seed, "wall_seconds": r.wall_seconds }))
                .collect(),
        )
    }

    pub fn loss_svg(&self) -> String {
        let series: Vec<(String, Vec<f64>, f64, f64)> = self
            .runs
            .iter()
            .map(|r| {
                let s = &r.record.summary;
                (format!("{} s{}", label(&r.record), r.record.seed), r.curve.clone(), s.first5_mean, s.last5_mean)
            })
            .collect();
        plot::loss_curves(&series)
    }
}
