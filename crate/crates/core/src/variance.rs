//! Loss-variance measurement.
//!
//! * [`decompose`] splits the variance of the masked-diffusion loss into
//!   mask-pattern (A), masking-rate (B) and data (C) components with nested
//!   Monte Carlo and inner-noise bias corrections.
//! * [`OnlineVarAccumulator`] is the streaming importance-weighted variance
//!   estimator with three running sums.
//! * [`EmaBinState`] is the bin-wise EMA control variate over `t`.
//! * [`synthetic_cells`] and [`HeteroAr1`] are loss generators with known
//!   variance structure, used to check the estimators above.

use serde::{Deserialize, Serialize};

use crate::corpus::{Eligibility, TokenSeq, Vocab};
use crate::denoiser::Denoiser;
use crate::error::{invalid, LabError, Result};
use crate::ppots::{cell_losses, choose_sequences};
use crate::rng::RngStream;
use crate::stats;
use crate::tsampler::sample_uniform;

/// Estimated variance components and their jackknife standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub comp_a: f64,
    pub comp_b: f64,
    pub comp_c: f64,
    pub total: f64,
    pub stderr_a: f64,
    pub stderr_b: f64,
    pub stderr_c: f64,
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

impl VarianceReport {
    pub fn sum(&self) -> f64 {
        self.comp_a + self.comp_b + self.comp_c
    }

    pub fn combined_stderr(&self) -> f64 {
        (self.stderr_a.powi(2) + self.stderr_b.powi(2) + self.stderr_c.powi(2)).sqrt()
    }
}

/// Per-sequence summaries from which every component is a function.
struct SeqStats {
    /// Mean within-cell variance.
    within: f64,
    /// Variance of the cell means across rates.
    between: f64,
    /// Grand mean of the sequence's losses.
    mean: f64,
}

fn components(rows: &[&SeqStats], b: usize, c: usize) -> (f64, f64, f64) {
    let within: Vec<f64> = rows.iter().map(|r| r.within).collect();
    let between: Vec<f64> = rows.iter().map(|r| r.between).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let comp_a = stats::mean(&within);
    let comp_b = stats::mean(&between) - comp_a / c as f64;
    let comp_c = stats::var(&means) - stats::mean(&between) / b as f64;
    (comp_a, comp_b, comp_c)
}

/// Decompose a loss array laid out `[a][b][c]` (sequence, rate, mask).
pub fn decompose_cells(losses: &[f64], a: usize, b: usize, c: usize) -> Result<VarianceReport> {
    if a < 2 || b < 2 || c < 2 {
        return invalid("decomposition needs a, b, c >= 2");
    }
    if losses.len() != a * b * c {
        return invalid(format!("expected {} losses, got {}", a * b * c, losses.len()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(LabError::Numerical("non-finite loss in decomposition".into()));
    }
    let rows: Vec<SeqStats> = (0..a)
        .map(|i| {
            let block = &losses[i * b * c..][..b * c];
            let cells: Vec<&[f64]> = block.chunks(c).collect();
            let within: Vec<f64> = cells.iter().map(|x| stats::var(x)).collect();
            let cell_means: Vec<f64> = cells.iter().map(|x| stats::mean(x)).collect();
            SeqStats {
                within: stats::mean(&within),
                between: stats::var(&cell_means),
                mean: stats::mean(block),
            }
        })
        .collect();
    let all: Vec<&SeqStats> = rows.iter().collect();
    let (comp_a, comp_b, comp_c) = components(&all, b, c);

    // Leave-one-sequence-out jackknife.
    let mut jack = Vec::with_capacity(a);
    for skip in 0..a {
        let sub: Vec<&SeqStats> = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, r)| r)
            .collect();
        jack.push(components(&sub, b, c));
    }
    let jk_se = |f: fn(&(f64, f64, f64)) -> f64| {
        let vals: Vec<f64> = jack.iter().map(f).collect();
        let m = stats::mean(&vals);
        let ss: f64 = vals.iter().map(|v| (v - m).powi(2)).sum();
        ((a as f64 - 1.0) / a as f64 * ss).sqrt()
    };
    Ok(VarianceReport {
        comp_a,
        comp_b,
        comp_c,
        total: stats::var(losses),
        stderr_a: jk_se(|x| x.0),
        stderr_b: jk_se(|x| x.1),
        stderr_c: jk_se(|x| x.2),
        a,
        b,
        c,
    })
}

/// Nested Monte Carlo decomposition on a frozen model: `a` sequences, `b`
/// uniform rates per sequence, `c` standard masks per (sequence, rate).
#[allow(clippy::too_many_arguments)]
pub fn decompose(
    model: &Denoiser,
    corpus: &[TokenSeq],
    vocab: &Vocab,
    mode: Eligibility,
    a: usize,
    b: usize,
    c: usize,
    stream: &RngStream,
) -> Result<VarianceReport> {
    if a < 2 || b < 2 || c < 2 {
        return invalid("decomposition needs a, b, c >= 2");
    }
    let chosen = choose_sequences(corpus.len(), a, stream)?;
    let seqs: Vec<&TokenSeq> = chosen.iter().map(|&i| &corpus[i]).collect();
    let ts: Vec<Vec<f64>> = (0..a)
        .map(|i| {
            sample_uniform(b, &stream.derive("decompose-t", i as u64))
                .into_iter()
                .map(|w| w.t)
                .collect()
        })
        .collect();
    let losses = cell_losses(model, &seqs, vocab, mode, &ts, c, &stream.derive("decompose", 0))?;
    decompose_cells(&losses, a, b, c)
}

/// Streaming importance-weighted variance estimator.
///
/// `S1 = Σ w l`, `S2 = Σ w l²`, `S12 = Σ (w l)²`; the estimate is
/// `S2/n − (S1² − S12)/(n(n−1))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineVarAccumulator {
    pub s1: f64,
    pub s2: f64,
    pub s12: f64,
    pub n: u64,
}

impl OnlineVarAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, loss: f64, weight: f64) -> Result<()> {
        if !(weight > 0.0) || !weight.is_finite() {
            return invalid(format!("weight must be positive, got {weight}"));
        }
        let wl = weight * loss;
        self.s1 += wl;
        self.s2 += wl * loss;
        self.s12 += wl * wl;
        self.n += 1;
        Ok(())
    }

    /// Field-wise sum; equivalent to accumulating the concatenated stream.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            s1: self.s1 + other.s1,
            s2: self.s2 + other.s2,
            s12: self.s12 + other.s12,
            n: self.n + other.n,
        }
    }

    pub fn finalize(&self) -> Result<f64> {
        if self.n < 2 {
            return invalid("variance needs at least two observations");
        }
        let n = self.n as f64;
        // S2/n − (S1² − S12)/(n(n−1)) over a common denominator.
        Ok(((n - 1.0) * self.s2 - self.s1 * self.s1 + self.s12) / (n * (n - 1.0)))
    }

    /// Weighted mean `S1 / n`.
    pub fn mean(&self) -> f64 {
        self.s1 / self.n as f64
    }
}

/// Bin-wise EMA control-variate state over `t ∈ (0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaBinState {
    pub m: usize,
    pub eta: f64,
    pub eps: f64,
    pub mu_l: Vec<f64>,
    pub mu_h: Vec<f64>,
    pub m_lh: Vec<f64>,
    pub m_hh: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl EmaBinState {
    pub fn new(m: usize, eta: f64) -> Result<Self> {
        Self::with_eps(m, eta, 1e-8)
    }

    pub fn with_eps(m: usize, eta: f64, eps: f64) -> Result<Self> {
        if m < 1 {
            return invalid("EMA needs at least one bin");
        }
        if !(eta > 0.0 && eta < 1.0) {
            return invalid(format!("EMA rate must lie in (0, 1), got {eta}"));
        }
        if !(eps > 0.0) {
            return invalid("EMA damping must be positive");
        }
        Ok(Self {
            m,
            eta,
            eps,
            mu_l: vec![0.0; m],
            mu_h: vec![0.0; m],
            m_lh: vec![0.0; m],
            m_hh: vec![0.0; m],
            baseline: vec![0.0; m],
        })
    }

    /// Bin `j` holds `t ∈ (j/m, (j+1)/m]` (zero-based).
    pub fn bin(&self, t: f64) -> Result<usize> {
        if !(t > 0.0 && t <= 1.0) {
            return invalid(format!("t = {t} lies outside the EMA bins"));
        }
        Ok(((t * self.m as f64).ceil() as usize).clamp(1, self.m) - 1)
    }

    /// Current control-variate coefficient for bin `j`.
    pub fn coefficient(&self, j: usize) -> f64 {
        (self.m_lh[j] - self.mu_l[j] * self.mu_h[j])
            / (self.m_hh[j] - self.mu_h[j] * self.mu_h[j] + self.eps)
    }

    /// Return `ℓ − c_j b̃_j` (the subtracted term carries no gradient), then
    /// update the bin's four moment EMAs and finally its baseline.
    pub fn adjust(&mut self, t: f64, loss: f64) -> Result<f64> {
        let j = self.bin(t)?;
        let h = self.baseline[j];
        let adjusted = loss - self.coefficient(j) * h;
        let (eta, keep) = (self.eta, 1.0 - self.eta);
        self.mu_l[j] = keep * self.mu_l[j] + eta * loss;
        self.mu_h[j] = keep * self.mu_h[j] + eta * h;
        self.m_lh[j] = keep * self.m_lh[j] + eta * loss * h;
        self.m_hh[j] = keep * self.m_hh[j] + eta * h * h;
        self.baseline[j] = keep * h + eta * loss;
        if !adjusted.is_finite() {
            return Err(LabError::Numerical("EMA adjustment produced a non-finite loss".into()));
        }
        Ok(adjusted)
    }
}

/// Functional form of [`EmaBinState::adjust`].
pub fn ema_adjust(state: &EmaBinState, t: f64, loss: f64) -> Result<(f64, EmaBinState)> {
    let mut next = state.clone();
    let adj = next.adjust(t, loss)?;
    Ok((adj, next))
}

/// Bin count from `m · (1/η) · batch ≈ 0.1 · train_size`, clamped to `[2, 64]`.
pub fn suggest_bins(train_size: usize, batch_per_worker: usize, eta: f64) -> usize {
    let raw = 0.1 * eta * train_size as f64 / batch_per_worker.max(1) as f64;
    (raw.round() as i64).clamp(2, 64) as usize
}

/// Balanced `±1` signs: half positive, half negative (one extra positive
/// when `n` is odd), shuffled.
fn balanced_signs(n: usize, stream: &RngStream) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut s: Vec<f64> = (0..n).map(|i| if i < n.div_ceil(2) { 1.0 } else { -1.0 }).collect();
    s.shuffle(&mut stream.clone());
    s
}

/// Additive three-factor cell losses `[a][b][c]`:
/// `loss = 1 + d_i + r_ij + e_ijk` with data effect `d`, rate effect `r` and
/// pattern noise `e` of population variances `comp_c`, `comp_b`, `comp_a`.
///
/// `d` and `r` are balanced signs scaled to the preset standard deviation,
/// so their finite-population variances are exact; `e` is i.i.d. Gaussian.
pub fn synthetic_cells(
    a: usize,
    b: usize,
    c: usize,
    (comp_a, comp_b, comp_c): (f64, f64, f64),
    stream: &RngStream,
) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let d = balanced_signs(a, &stream.derive("synthetic-data", 0));
    let mut noise = stream.derive("synthetic-pattern", 0);
    let mut out = Vec::with_capacity(a * b * c);
    for (i, di) in d.iter().enumerate() {
        let r = balanced_signs(b, &stream.derive("synthetic-rate", i as u64));
        for rj in &r {
            for _ in 0..c {
                let z: f64 = StandardNormal.sample(&mut noise);
                out.push(1.0 + comp_c.sqrt() * di + comp_b.sqrt() * rj + comp_a.sqrt() * z);
            }
        }
    }
    out
}

/// Correlation between a unit AR(1) draw and the EMA of its predecessors,
/// `h = η Σ_k (1−η)^k x_{−1−k}`, in closed form.
pub fn ar1_baseline_corr(phi: f64, eta: f64) -> f64 {
    let g = 1.0 - eta;
    let cov = eta * phi / (1.0 - g * phi);
    let var_h = eta * eta / (1.0 - g * g) * (1.0 + g * phi) / (1.0 - g * phi);
    cov / var_h.sqrt()
}

/// The AR(1) coefficient giving [`ar1_baseline_corr`] equal to `rho`, by
/// bisection on `[0, 1)`.
pub fn ar1_phi_for_corr(rho: f64, eta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return invalid("target correlation must lie in [0, 1)");
    }
    let (mut lo, mut hi) = (0.0, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ar1_baseline_corr(mid, eta) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Zero-mean heteroscedastic loss stream: `t ~ U(0, 1]`, and bin `j` of
/// `m` carries its own unit-variance AR(1) state, advanced on each visit and
/// scaled by `0.5 + t`.
pub struct HeteroAr1 {
    phi: f64,
    state: Vec<f64>,
    m: usize,
    stream: RngStream,
}

impl HeteroAr1 {
    pub fn new(phi: f64, m: usize, stream: &RngStream) -> Self {
        Self { phi, state: vec![f64::NAN; m], m, stream: stream.clone() }
    }

    /// Next `(t, loss)` pair.
    pub fn next_loss(&mut self) -> (f64, f64) {
        use rand_distr::{Distribution, StandardNormal};
        let t = 1.0 - self.stream.uniform();
        let j = ((t * self.m as f64).ceil() as usize).clamp(1, self.m) - 1;
        let z: f64 = StandardNormal.sample(&mut self.stream);
        let x = if self.state[j].is_nan() {
            z
        } else {
            self.phi * self.state[j] + (1.0 - self.phi * self.phi).sqrt() * z
        };
        self.state[j] = x;
        (t, (0.5 + t) * x)
    }
}
