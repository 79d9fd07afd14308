//! Masking-rate samplers and the densities behind them.
//!
//! Every sampler returns [`WeightedT`] draws with `t ∈ (0, 1]`. Density-based
//! samplers attach the importance weight `1/p(t)` evaluated on the exact
//! density they sample from, so `E[w · f(t)] = ∫ f`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;
use crate::stats;

/// Draws closer to zero than this are rejected and redrawn.
pub const T_MIN: f64 = 1e-6;

/// A masking rate with its importance weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedT {
    pub t: f64,
    pub weight: f64,
}

impl WeightedT {
    pub fn unit(t: f64) -> Self {
        Self { t, weight: 1.0 }
    }
}

/// A normalized probability density on `[0, 1]`.
pub trait Density {
    fn pdf(&self, t: f64) -> f64;

    /// Points where the density may have kinks; quadrature panels align to them.
    fn breakpoints(&self) -> Vec<f64>;

    /// Map a uniform `u ∈ [0, 1)` to a draw.
    fn inverse_cdf(&self, u: f64) -> f64;
}

/// Draw `n` weighted rates from `density` by inversion.
pub fn sample_density<D: Density + ?Sized>(
    density: &D,
    n: usize,
    stream: &RngStream,
) -> Vec<WeightedT> {
    let mut s = stream.clone();
    (0..n)
        .map(|_| loop {
            let t = density.inverse_cdf(s.uniform());
            if t >= T_MIN {
                break WeightedT { t, weight: 1.0 / density.pdf(t) };
            }
        })
        .collect()
}

/// `t ~ U(0, 1]`, weight 1.
pub fn sample_uniform(n: usize, stream: &RngStream) -> Vec<WeightedT> {
    let mut s = stream.clone();
    (0..n)
        .map(|_| loop {
            let t = 1.0 - s.uniform();
            if t >= T_MIN {
                break WeightedT::unit(t);
            }
        })
        .collect()
}

/// `t ~ U[beta, omega]`, weight 1. Biased relative to the uniform-rate
/// objective unless `[beta, omega] = [0, 1]`.
pub fn sample_clipped(n: usize, beta: f64, omega: f64, stream: &RngStream) -> Result<Vec<WeightedT>> {
    if !(0.0 <= beta && beta < omega && omega <= 1.0) {
        return invalid(format!("clipped interval [{beta}, {omega}] is invalid"));
    }
    let mut s = stream.clone();
    Ok((0..n)
        .map(|_| loop {
            let t = omega - (omega - beta) * s.uniform();
            if t >= T_MIN {
                break WeightedT::unit(t);
            }
        })
        .collect())
}

/// Default stratum count `⌈√n⌉`.
pub fn default_strata(n: usize) -> usize {
    let mut k = (n as f64).sqrt() as usize;
    while k * k < n {
        k += 1;
    }
    k.max(1)
}

/// Stratified rates: `⌊n/k⌋` draws in each of `k` equal strata, leftovers in
/// distinct randomly chosen strata, returned in random order. Weight 1.
pub fn sample_stratified(n: usize, k: usize, stream: &RngStream) -> Result<Vec<WeightedT>> {
    if k < 1 || k > n {
        return invalid(format!("stratum count {k} must lie in 1..={n}"));
    }
    let mut s = stream.clone();
    let mut counts = vec![n / k; k];
    let mut strata: Vec<usize> = (0..k).collect();
    let (chosen, _) = strata.partial_shuffle(&mut s, n % k);
    for &j in chosen.iter() {
        counts[j] += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let t = loop {
                let t = (j as f64 + s.uniform()) / k as f64;
                if t >= T_MIN {
                    break t;
                }
            };
            out.push(WeightedT::unit(t));
        }
    }
    out.shuffle(&mut s);
    Ok(out)
}

/// Piecewise-constant density: `bin_probs[j]` mass spread evenly over
/// `[bin_edges[j], bin_edges[j+1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseDensity {
    pub bin_edges: Vec<f64>,
    pub bin_probs: Vec<f64>,
    #[serde(skip)]
    cum: Vec<f64>,
}

impl PiecewiseDensity {
    pub fn new(bin_edges: Vec<f64>, bin_probs: Vec<f64>) -> Result<Self> {
        if bin_edges.len() != bin_probs.len() + 1 || bin_probs.is_empty() {
            return invalid("need one more edge than bins");
        }
        if bin_edges[0] != 0.0 || *bin_edges.last().unwrap() != 1.0 {
            return invalid("bin edges must span [0, 1]");
        }
        if bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("bin edges must be strictly increasing");
        }
        if bin_probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return invalid("bin probabilities must be finite and non-negative");
        }
        let total: f64 = bin_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("bin probabilities sum to {total}, not 1"));
        }
        let mut cum = Vec::with_capacity(bin_probs.len() + 1);
        cum.push(0.0);
        for p in &bin_probs {
            cum.push(cum.last().unwrap() + p);
        }
        Ok(Self { bin_edges, bin_probs, cum })
    }

    /// Equal-width bins with probabilities proportional to `weights`.
    pub fn equal_bins(weights: &[f64]) -> Result<Self> {
        let k = weights.len();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("bin weights must have positive sum");
        }
        let edges = (0..=k).map(|j| j as f64 / k as f64).collect();
        Self::new(edges, weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self::equal_bins(&vec![1.0; k]).expect("uniform bins are valid")
    }

    /// Bin-average a density given as a function (mass by quadrature).
    pub fn from_fn_bins(k: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let masses: Vec<f64> = (0..k)
            .map(|j| stats::integrate(&f, j as f64 / k as f64, (j + 1) as f64 / k as f64, 64))
            .collect();
        Self::equal_bins(&masses)
    }

    fn bin_of(&self, t: f64) -> usize {
        let k = self.bin_probs.len();
        match self.bin_edges.binary_search_by(|e| e.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(k - 1),
            Err(i) => (i.max(1) - 1).min(k - 1),
        }
    }

    pub fn sample(&self, n: usize, stream: &RngStream) -> Vec<WeightedT> {
        sample_density(self, n, stream)
    }
}

impl Density for PiecewiseDensity {
    fn pdf(&self, t: f64) -> f64 {
        let j = self.bin_of(t);
        self.bin_probs[j] / (self.bin_edges[j + 1] - self.bin_edges[j])
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.bin_edges.clone()
    }

    fn inverse_cdf(&self, u: f64) -> f64 {
        let cum = if self.cum.is_empty() {
            // Deserialized instances lack the cache.
            let mut c = vec![0.0];
            for p in &self.bin_probs {
                c.push(c.last().unwrap() + p);
            }
            std::borrow::Cow::Owned(c)
        } else {
            std::borrow::Cow::Borrowed(&self.cum)
        };
        let target = u * cum[cum.len() - 1];
        let mut j = cum.partition_point(|&c| c <= target).saturating_sub(1);
        while self.bin_probs[j] == 0.0 {
            j += 1;
        }
        let frac = (target - cum[j]) / self.bin_probs[j];
        let (lo, hi) = (self.bin_edges[j], self.bin_edges[j + 1]);
        (lo + frac.clamp(0.0, 1.0) * (hi - lo)).min(hi)
    }
}

/// Number of grid intervals used to tabulate continuous densities.
pub const GRID_INTERVALS: usize = 4096;
/// Floor applied to tabulated densities, relative to their mean.
pub const DENSITY_FLOOR: f64 = 1e-4;

/// A continuous density tabulated on a uniform grid and treated as exactly
/// piecewise-linear between nodes.
///
/// The tabulated values are normalized by the trapezoid rule, floored at
/// [`DENSITY_FLOOR`] and renormalized, so the sampled law and the weights
/// `1/p(t)` refer to the same density.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedDensity {
    values: Vec<f64>,
    cum: Vec<f64>,
}

impl TabulatedDensity {
    /// Tabulate an unnormalized non-negative function on `GRID_INTERVALS`
    /// intervals.
    pub fn from_fn(f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn_with(f, GRID_INTERVALS, DENSITY_FLOOR)
    }

    pub fn from_fn_with(f: impl Fn(f64) -> f64, intervals: usize, floor: f64) -> Result<Self> {
        let nodes: Vec<f64> = (0..=intervals)
            .map(|k| f(k as f64 / intervals as f64))
            .collect();
        Self::from_nodes(nodes, floor)
    }

    /// Build from node values at `k / (len - 1)`.
    pub fn from_nodes(mut values: Vec<f64>, floor: f64) -> Result<Self> {
        if values.len() < 2 {
            return invalid("need at least two grid nodes");
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LabError::Numerical(
                "density is negative or non-finite on the grid".into(),
            ));
        }
        let area = trapezoid(&values);
        if !(area > 0.0) {
            return Err(LabError::Numerical("density is not normalizable".into()));
        }
        values.iter_mut().for_each(|v| *v = (*v / area).max(floor));
        let area = trapezoid(&values);
        values.iter_mut().for_each(|v| *v /= area);
        let h = 1.0 / (values.len() - 1) as f64;
        let mut cum = Vec::with_capacity(values.len());
        cum.push(0.0);
        for w in values.windows(2) {
            cum.push(cum.last().unwrap() + 0.5 * h * (w[0] + w[1]));
        }
        Ok(Self { values, cum })
    }

    /// Normalized node values.
    pub fn nodes(&self) -> &[f64] {
        &self.values
    }

    fn h(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }

    pub fn sample(&self, n: usize, stream: &RngStream) -> Vec<WeightedT> {
        sample_density(self, n, stream)
    }

    /// Whether every node is equal (uniform density).
    pub fn is_flat(&self) -> bool {
        self.values.iter().all(|&v| (v - 1.0).abs() < 1e-12)
    }
}

fn trapezoid(values: &[f64]) -> f64 {
    let h = 1.0 / (values.len() - 1) as f64;
    values.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
}

impl Density for TabulatedDensity {
    fn pdf(&self, t: f64) -> f64 {
        let cells = self.values.len() - 1;
        let x = t.clamp(0.0, 1.0) * cells as f64;
        let k = (x as usize).min(cells - 1);
        let frac = x - k as f64;
        self.values[k] + (self.values[k + 1] - self.values[k]) * frac
    }

    fn breakpoints(&self) -> Vec<f64> {
        let cells = self.values.len() - 1;
        (0..=cells).map(|k| k as f64 / cells as f64).collect()
    }

    fn inverse_cdf(&self, u: f64) -> f64 {
        let total = *self.cum.last().unwrap();
        let target = u * total;
        let cells = self.values.len() - 1;
        let k = self.cum.partition_point(|&c| c <= target).saturating_sub(1).min(cells - 1);
        let r = target - self.cum[k];
        let (f0, f1) = (self.values[k], self.values[k + 1]);
        let h = self.h();
        // Solve f0 x + (f1 - f0) x² / (2h) = r for x ∈ [0, h].
        let slope = (f1 - f0) / h;
        let x = if slope.abs() < 1e-300 {
            r / f0
        } else {
            let disc = (f0 * f0 + 2.0 * slope * r).max(0.0);
            2.0 * r / (f0 + disc.sqrt())
        };
        ((k as f64 * h) + x.clamp(0.0, h)).min(1.0)
    }
}

/// Estimator variance `∫ (g² + v)/p − (∫ g)²` of the importance-weighted
/// loss under density `p`, by composite 5-point Gauss–Legendre quadrature
/// aligned to the density's breakpoints (at least 4096 nodes).
pub fn estimator_variance<D: Density + ?Sized>(
    density: &D,
    g: impl Fn(f64) -> f64,
    v: impl Fn(f64) -> f64,
) -> Result<f64> {
    let bp = density.breakpoints();
    let panels = bp.len() - 1;
    let per = 820usize.div_ceil(panels).max(1);
    let mut second = 0.0;
    let mut first = 0.0;
    for w in bp.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let step = (hi - lo) / per as f64;
        for s in 0..per {
            let a = lo + s as f64 * step;
            let mid = a + 0.5 * step;
            let half = 0.5 * step;
            for &(x, wt) in &stats::GL5 {
                let t = mid + half * x;
                let gt = g(t);
                let num = gt * gt + v(t);
                let p = density.pdf(t);
                if num > 0.0 && !(p > 0.0) {
                    return Err(LabError::Invalid(format!(
                        "density vanishes at t = {t} where the loss has mass"
                    )));
                }
                if num > 0.0 {
                    second += wt * half * num / p;
                }
                first += wt * half * gt;
            }
        }
    }
    Ok(second - first * first)
}

/// The variance-minimizing density `√(g² + v) / ∫ √(g² + v)` averaged into
/// `k` equal bins.
pub fn optimal_binned(
    k: usize,
    g: impl Fn(f64) -> f64,
    v: impl Fn(f64) -> f64,
) -> Result<PiecewiseDensity> {
    PiecewiseDensity::from_fn_bins(k, |t| (g(t).powi(2) + v(t)).sqrt())
}

/// Parsed `tsampler` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TSamplerSpec {
    Uniform,
    Clipped { beta: f64, omega: f64 },
    /// `None` selects `⌈√batch⌉`.
    Strata(Option<usize>),
    /// Path to a fit artifact, or `auto` to fit before training.
    Epr(String),
}

impl std::fmt::Display for TSamplerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Uniform => write!(f, "uniform"),
            Self::Clipped { beta, omega } => write!(f, "clipped:{beta}:{omega}"),
            Self::Strata(None) => write!(f, "strata"),
            Self::Strata(Some(k)) => write!(f, "strata:{k}"),
            Self::Epr(p) => write!(f, "epr:{p}"),
        }
    }
}

impl std::str::FromStr for TSamplerSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| LabError::Invalid(format!("bad {what} in tsampler spec `{s}`"));
        if s == "uniform" {
            return Ok(Self::Uniform);
        }
        if s == "strata" {
            return Ok(Self::Strata(None));
        }
        if let Some(rest) = s.strip_prefix("strata:") {
            let k: usize = rest.parse().map_err(|_| bad("stratum count"))?;
            if k == 0 {
                return Err(bad("stratum count"));
            }
            return Ok(Self::Strata(Some(k)));
        }
        if let Some(rest) = s.strip_prefix("clipped:") {
            let (b, o) = rest.split_once(':').ok_or_else(|| bad("interval"))?;
            let beta: f64 = b.parse().map_err(|_| bad("beta"))?;
            let omega: f64 = o.parse().map_err(|_| bad("omega"))?;
            if !(0.0 <= beta && beta < omega && omega <= 1.0) {
                return Err(bad("interval"));
            }
            return Ok(Self::Clipped { beta, omega });
        }
        if let Some(rest) = s.strip_prefix("epr:") {
            if rest.is_empty() {
                return Err(bad("fit path"));
            }
            return Ok(Self::Epr(rest.to_string()));
        }
        invalid(format!("unknown tsampler spec `{s}`"))
    }
}
