//! Fitted importance samplers for the masking rate.
//!
//! The pipeline measures the per-rate loss mean `ĝ_j` and within-sample
//! variance `v̂_j` on a grid of rates, forms the target masses
//! `p̂_j ∝ √(ĝ_j² + v̂_j)`, and fits the seven-parameter density
//! `p(t) ∝ √(a tʳ + b (1−t)^q + A² exp(2κ tᵐ))` by minimizing the forward
//! KL divergence on the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Eligibility, TokenSeq, Vocab};
use crate::denoiser::Denoiser;
use crate::error::{invalid, LabError, Result};
use crate::masking::mask_standard;
use crate::rng::RngStream;
use crate::stats;
use crate::tsampler::{TabulatedDensity, DENSITY_FLOOR};

/// Parameters of the exponential-polynomial-root density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EprParams {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    pub kappa: f64,
    pub r: f64,
    pub q: f64,
    pub m: f64,
}

impl EprParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.b > 0.0
            && self.big_a > 0.0
            && self.kappa > 0.0
            && self.r >= 0.0
            && self.q >= 0.0
            && self.m > 1.0
            && [self.a, self.b, self.big_a, self.kappa, self.r, self.q, self.m]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            invalid(format!("EPR parameters out of range: {self:?}"))
        }
    }

    /// Mean-loss component `A exp(κ tᵐ)`.
    pub fn g(&self, t: f64) -> f64 {
        self.big_a * (self.kappa * t.powf(self.m)).exp()
    }

    /// Variance component `a tʳ + b (1−t)^q`.
    pub fn v(&self, t: f64) -> f64 {
        self.a * t.powf(self.r) + self.b * (1.0 - t).powf(self.q)
    }

    /// Unnormalized density `√(g² + v)`.
    pub fn unnormalized(&self, t: f64) -> f64 {
        let g2 = self.big_a * self.big_a * (2.0 * self.kappa * t.powf(self.m)).exp();
        (g2 + self.v(t)).sqrt()
    }

    /// Normalized, floored, tabulated density used for sampling.
    pub fn density(&self) -> Result<TabulatedDensity> {
        self.validate()?;
        TabulatedDensity::from_fn(|t| self.unnormalized(t))
    }

    fn to_raw(self) -> [f64; 7] {
        [
            self.a.ln(),
            self.b.ln(),
            self.big_a.ln(),
            self.kappa.ln(),
            softplus_inv(self.r),
            softplus_inv(self.q),
            softplus_inv(self.m - 1.0),
        ]
    }

    fn from_raw(x: &[f64; 7]) -> Self {
        Self {
            a: x[0].exp(),
            b: x[1].exp(),
            big_a: x[2].exp(),
            kappa: x[3].exp(),
            r: softplus(x[4]),
            q: softplus(x[5]),
            m: 1.0 + softplus(x[6]),
        }
    }

    /// The flat member returned for degenerate scatters.
    pub fn flat() -> Self {
        Self { a: 0.5, b: 0.5, big_a: 1e-8, kappa: 1e-8, r: 0.0, q: 0.0, m: 2.0 }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One grid point of the empirical target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub t: f64,
    #[serde(rename = "g")]
    pub g_hat: f64,
    #[serde(rename = "v")]
    pub v_hat: f64,
    #[serde(rename = "p")]
    pub p_hat: f64,
}

/// Scatter plus the per-point standard error of `ĝ_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub points: Vec<ScatterPoint>,
    pub g_stderr: Vec<f64>,
}

/// Normalize `√(g² + v)` over the grid into `p̂`.
pub fn normalize_scatter(t: &[f64], g: &[f64], v: &[f64]) -> Result<Vec<ScatterPoint>> {
    let raw: Vec<f64> = g.iter().zip(v).map(|(g, v)| (g * g + v.max(0.0)).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LabError::Numerical("scatter has no positive mass".into()));
    }
    Ok((0..t.len())
        .map(|j| ScatterPoint { t: t[j], g_hat: g[j], v_hat: v[j].max(0.0), p_hat: raw[j] / total })
        .collect())
}

/// Grid midpoints `(j + 1/2) / b`.
pub fn grid(b: usize) -> Vec<f64> {
    (0..b).map(|j| (j as f64 + 0.5) / b as f64).collect()
}

/// Losses `[a][b][c]` of the frozen model on `a` sequences, rates `ts`, and
/// `c` standard masks per cell. Cells are evaluated in parallel on
/// independent streams keyed by `(i, j, k)`.
#[allow(clippy::too_many_arguments)]
pub fn cell_losses(
    model: &Denoiser,
    seqs: &[&TokenSeq],
    vocab: &Vocab,
    mode: Eligibility,
    ts: &[Vec<f64>],
    c: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let b = ts[0].len();
    let cells: Vec<(usize, usize)> = (0..seqs.len())
        .flat_map(|i| (0..b).map(move |j| (i, j)))
        .collect();
    let out: Result<Vec<Vec<f64>>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let seq = seqs[i];
            let elig = seq.eligibility(mode);
            let cell = stream.derive("cell-x", i as u64).derive("cell-t", j as u64);
            (0..c)
                .map(|k| {
                    let pat = mask_standard(&elig, ts[i][j], &cell.derive("mask", k as u64))?;
                    model.loss(seq, &pat, vocab)
                })
                .collect()
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

/// Choose `a` distinct corpus indices from `stream`.
pub fn choose_sequences(n: usize, a: usize, stream: &RngStream) -> Result<Vec<usize>> {
    if a > n {
        return invalid(format!("corpus has {n} sequences, need {a}"));
    }
    let mut s = stream.derive("choose", 0);
    let mut idx: Vec<usize> = (0..n).collect();
    for k in 0..a {
        let pick = k + s.below((n - k) as u64) as usize;
        idx.swap(k, pick);
    }
    Ok(idx[..a].to_vec())
}

/// Empirical `ĝ_j, v̂_j, p̂_j` on `b` grid midpoints using `a` sequences and
/// `c` masks per (sequence, rate) cell.
#[allow(clippy::too_many_arguments)]
pub fn estimate_scatter(
    model: &Denoiser,
    corpus: &[TokenSeq],
    vocab: &Vocab,
    mode: Eligibility,
    a: usize,
    b: usize,
    c: usize,
    stream: &RngStream,
) -> Result<Scatter> {
    if a < 2 || c < 2 {
        return invalid("scatter needs a >= 2 and c >= 2");
    }
    if b < 7 {
        return invalid("scatter needs b >= 7 grid points");
    }
    let chosen = choose_sequences(corpus.len(), a, stream)?;
    let seqs: Vec<&TokenSeq> = chosen.iter().map(|&i| &corpus[i]).collect();
    let t = grid(b);
    let ts = vec![t.clone(); a];
    let losses = cell_losses(model, &seqs, vocab, mode, &ts, c, &stream.derive("scatter", 0))?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(LabError::Numerical("non-finite loss in scatter".into()));
    }
    let mut g = vec![0.0; b];
    let mut v = vec![0.0; b];
    let mut g_stderr = vec![0.0; b];
    for j in 0..b {
        let mut col = Vec::with_capacity(a * c);
        let mut within = Vec::with_capacity(a);
        for i in 0..a {
            let cell = &losses[(i * b + j) * c..][..c];
            col.extend_from_slice(cell);
            within.push(stats::var(cell));
        }
        g[j] = stats::mean(&col);
        v[j] = stats::mean(&within);
        // Cells share a sequence, so the standard error is taken over
        // per-sequence means.
        let per_seq: Vec<f64> = col.chunks(c).map(stats::mean).collect();
        g_stderr[j] = stats::stderr_of_mean(&per_seq);
    }
    Ok(Scatter { points: normalize_scatter(&t, &g, &v)?, g_stderr })
}

/// Result of an EPR fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EprFit {
    pub params: EprParams,
    pub kl: f64,
    /// Set when the scatter was flat and the flat member was returned.
    pub degenerate: bool,
}

/// Forward KL `Σ p̂_j log(p̂_j / p_j)` with `p_j` the EPR density normalized
/// over the grid points.
pub fn grid_kl(params: &EprParams, scatter: &[ScatterPoint]) -> f64 {
    let model: Vec<f64> = scatter.iter().map(|s| params.unnormalized(s.t)).collect();
    let z: f64 = model.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return f64::INFINITY;
    }
    let mut kl = 0.0;
    for (s, m) in scatter.iter().zip(&model) {
        if s.p_hat > 0.0 {
            let pm = m / z;
            if !(pm > 0.0) {
                return f64::INFINITY;
            }
            kl += s.p_hat * (s.p_hat / pm).ln();
        }
    }
    if kl.is_finite() {
        kl.max(0.0)
    } else {
        f64::INFINITY
    }
}

/// Fit EPR parameters to a normalized scatter, best of `restarts` random
/// Nelder–Mead starts in the unconstrained parameterization.
pub fn fit_epr(scatter: &[ScatterPoint], restarts: usize, stream: &RngStream) -> Result<EprFit> {
    if restarts < 1 {
        return invalid("restarts must be at least 1");
    }
    if scatter.len() < 7 {
        return invalid("scatter needs at least 7 points");
    }
    let total: f64 = scatter.iter().map(|s| s.p_hat).sum();
    if (total - 1.0).abs() > 1e-9 || scatter.iter().any(|s| !(s.p_hat >= 0.0)) {
        return invalid("scatter masses must be non-negative and sum to 1");
    }
    let flat = EprParams::flat();
    let p0 = scatter[0].p_hat;
    if scatter.iter().all(|s| (s.p_hat - p0).abs() <= 1e-12) {
        return Ok(EprFit { params: flat, kl: grid_kl(&flat, scatter), degenerate: true });
    }

    let objective = |x: &[f64; 7]| grid_kl(&EprParams::from_raw(x), scatter);
    let starts: Vec<[f64; 7]> = (0..restarts)
        .map(|k| random_start(&mut stream.derive("epr-start", k as u64)))
        .collect();
    let results: Vec<([f64; 7], f64)> = starts
        .par_iter()
        .map(|x0| polish(&objective, *x0))
        .collect();
    let mut best = (flat.to_raw(), grid_kl(&flat, scatter));
    for (x, f) in results {
        if f < best.1 {
            best = (x, f);
        }
    }
    let params = EprParams::from_raw(&best.0);
    let kl = grid_kl(&params, scatter);
    if kl <= grid_kl(&flat, scatter) {
        Ok(EprFit { params, kl, degenerate: false })
    } else {
        Ok(EprFit { params: flat, kl: grid_kl(&flat, scatter), degenerate: false })
    }
}

fn random_start(s: &mut RngStream) -> [f64; 7] {
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * s.uniform();
    [
        u(-3.0, 3.0),
        u(-3.0, 3.0),
        u(-3.0, 2.0),
        u(-3.0, 1.5),
        softplus_inv(u(0.05, 5.0)),
        softplus_inv(u(0.05, 5.0)),
        softplus_inv(u(0.05, 4.0)),
    ]
}

/// Restart the simplex around the incumbent until it stops improving.
fn polish(f: &impl Fn(&[f64; 7]) -> f64, x0: [f64; 7]) -> ([f64; 7], f64) {
    let (mut x, mut fx) = nelder_mead(f, x0, 1.0, 4000);
    for _ in 0..30 {
        let (y, fy) = nelder_mead(f, x, 0.25, 4000);
        let improved = fy < fx - 1e-15 * fx.abs().max(1e-300);
        if fy < fx {
            x = y;
            fx = fy;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

/// Nelder–Mead simplex minimization with standard coefficients.
pub fn nelder_mead<const N: usize>(
    f: &impl Fn(&[f64; N]) -> f64,
    x0: [f64; N],
    scale: f64,
    max_evals: usize,
) -> ([f64; N], f64) {
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += scale;
        simplex.push((x, f(&x)));
    }
    let mut evals = N + 1;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[N].1;
        let spread = simplex
            .iter()
            .skip(1)
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-16 * (best.abs() + 1e-300) + 1e-20 && spread < 1e-9 {
            break;
        }
        if spread < 1e-12 {
            break;
        }
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for k in 0..N {
                centroid[k] += x[k] / N as f64;
            }
        }
        let along = |coef: f64| {
            let mut y = [0.0; N];
            for k in 0..N {
                y[k] = centroid[k] + coef * (simplex[N].0[k] - centroid[k]);
            }
            y
        };
        let xr = along(-alpha);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-alpha * gamma);
            let fe = f(&xe);
            evals += 1;
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = along(-alpha * rho);
                (xc, f(&xc))
            } else {
                let xc = along(rho);
                (xc, f(&xc))
            };
            evals += 1;
            if fc < worst.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let x_best = simplex[0].0;
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for k in 0..N {
                        x[k] = x_best[k] + sigma * (x[k] - x_best[k]);
                    }
                    *fx = f(x);
                }
                evals += N;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Least-squares polynomial fit of the scatter density `b·p̂_j` over `t_j`,
/// floored and renormalized into a tabulated density.
pub fn fit_polynomial(scatter: &[ScatterPoint], degree: usize) -> Result<TabulatedDensity> {
    let coef = polynomial_coefficients(scatter, degree)?;
    TabulatedDensity::from_fn(|t| eval_poly(&coef, 2.0 * t - 1.0).max(0.0))
        .or_else(|_| TabulatedDensity::from_fn(|_| 1.0))
        .and_then(|d| {
            // Reapply the floor on the normalized curve.
            TabulatedDensity::from_nodes(d.nodes().to_vec(), DENSITY_FLOOR)
        })
}

/// Coefficients in the variable `x = 2t − 1`, lowest order first.
pub fn polynomial_coefficients(scatter: &[ScatterPoint], degree: usize) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let n = scatter.len();
    if n == 0 {
        return invalid("empty scatter");
    }
    let cols = degree + 1;
    let design = DMatrix::from_fn(n, cols, |i, k| (2.0 * scatter[i].t - 1.0).powi(k as i32));
    let target = DVector::from_iterator(n, scatter.iter().map(|s| s.p_hat * n as f64));
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&target, 1e-12)
        .map_err(|e| LabError::Numerical(format!("polynomial fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

fn eval_poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Serialized fit artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub params: EprParams,
    pub kl: f64,
    pub scatter: Vec<ScatterPoint>,
    pub grid_size: usize,
    #[serde(default)]
    pub degenerate: bool,
}

impl FitArtifact {
    pub fn new(fit: &EprFit, scatter: &[ScatterPoint]) -> Self {
        Self {
            params: fit.params,
            kl: fit.kl,
            scatter: scatter.to_vec(),
            grid_size: crate::tsampler::GRID_INTERVALS,
            degenerate: fit.degenerate,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let art: Self = serde_json::from_str(&text)?;
        art.params.validate()?;
        Ok(art)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synth(params: &EprParams, b: usize) -> Vec<ScatterPoint> {
        let t = grid(b);
        let g: Vec<f64> = t.iter().map(|&t| params.g(t)).collect();
        let v: Vec<f64> = t.iter().map(|&t| params.v(t)).collect();
        normalize_scatter(&t, &g, &v).unwrap()
    }

    #[test]
    fn transform_roundtrip() {
        let p = EprParams { a: 1.0, b: 2.0, big_a: 0.5, kappa: 1.0, r: 2.0, q: 3.0, m: 2.0 };
        let back = EprParams::from_raw(&p.to_raw());
        for (x, y) in [
            (p.a, back.a),
            (p.b, back.b),
            (p.big_a, back.big_a),
            (p.kappa, back.kappa),
            (p.r, back.r),
            (p.q, back.q),
            (p.m, back.m),
        ] {
            assert!((x - y).abs() < 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn validation() {
        assert!(EprParams::flat().validate().is_ok());
        let mut p = EprParams::flat();
        p.m = 1.0;
        assert!(p.validate().is_err());
        p.m = 2.0;
        p.a = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64; 2]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, fx) = nelder_mead(&f, [-1.2, 1.0], 0.5, 20_000);
        assert!(fx < 1e-14, "{fx}");
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recovers_reference_generator() {
        let truth = EprParams { a: 1.0, b: 2.0, big_a: 0.5, kappa: 1.0, r: 2.0, q: 3.0, m: 2.0 };
        let sc = synth(&truth, 70);
        let fit = fit_epr(&sc, 20, &RngStream::root(42)).unwrap();
        assert!(fit.kl <= 1e-5, "kl {}", fit.kl);
        let z_fit: f64 = sc.iter().map(|s| fit.params.unnormalized(s.t)).sum();
        for s in &sc {
            let p = fit.params.unnormalized(s.t) / z_fit;
            assert!((p / s.p_hat - 1.0).abs() < 0.01, "t {} fit {p} truth {}", s.t, s.p_hat);
        }
    }

    #[test]
    fn scale_invariance() {
        let truth = EprParams { a: 0.3, b: 1.0, big_a: 0.8, kappa: 1.5, r: 1.0, q: 2.0, m: 3.0 };
        let sc = synth(&truth, 40);
        let doubled: Vec<ScatterPoint> = {
            let raw: Vec<f64> = sc.iter().map(|s| 2.0 * s.p_hat).collect();
            let z: f64 = raw.iter().sum();
            sc.iter().zip(&raw).map(|(s, r)| ScatterPoint { p_hat: r / z, ..*s }).collect()
        };
        let a = fit_epr(&sc, 3, &RngStream::root(1)).unwrap();
        let b = fit_epr(&doubled, 3, &RngStream::root(1)).unwrap();
        let za: f64 = sc.iter().map(|s| a.params.unnormalized(s.t)).sum();
        let zb: f64 = sc.iter().map(|s| b.params.unnormalized(s.t)).sum();
        for s in &sc {
            let pa = a.params.unnormalized(s.t) / za;
            let pb = b.params.unnormalized(s.t) / zb;
            assert!((pa / pb - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_scatter_is_flagged() {
        let t = grid(10);
        let sc = normalize_scatter(&t, &[1.0; 10], &[0.0; 10]).unwrap();
        let fit = fit_epr(&sc, 2, &RngStream::root(3)).unwrap();
        assert!(fit.degenerate);
        assert!(fit.params.density().unwrap().is_flat() || fit.kl < 1e-12);
    }

    #[test]
    fn fit_never_worse_than_constant() {
        // Noisy scatter outside the family.
        let t = grid(30);
        let mut s = RngStream::root(5);
        let g: Vec<f64> = t.iter().map(|_| 1.0 + s.uniform()).collect();
        let sc = normalize_scatter(&t, &g, &vec![0.0; 30]).unwrap();
        let fit = fit_epr(&sc, 4, &RngStream::root(6)).unwrap();
        let constant: f64 = sc.iter().map(|p| p.p_hat * (p.p_hat * 30.0).ln()).sum();
        assert!(fit.kl <= constant + 1e-12);
    }

    #[test]
    fn polynomial_baselines() {
        let t = grid(20);
        let sc = normalize_scatter(&t, &[2.0; 20], &[0.0; 20]).unwrap();
        assert!(fit_polynomial(&sc, 7).unwrap().is_flat());
        let sc = normalize_scatter(&t, &t, &[0.0; 20]).unwrap();
        assert!(fit_polynomial(&sc, 0).unwrap().is_flat());
        let lin = fit_polynomial(&sc, 1).unwrap();
        // Linear target 2t is reproduced exactly.
        use crate::tsampler::Density;
        assert!((lin.pdf(0.25) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn artifact_json_keys() {
        let sc = synth(&EprParams::flat(), 8);
        let fit = EprFit { params: EprParams::flat(), kl: 0.0, degenerate: true };
        let v = serde_json::to_value(FitArtifact::new(&fit, &sc)).unwrap();
        for k in ["a", "b", "A", "kappa", "r", "q", "m"] {
            assert!(v["params"].get(k).is_some(), "{k}");
        }
        for k in ["t", "g", "v", "p"] {
            assert!(v["scatter"][0].get(k).is_some(), "{k}");
        }
        assert_eq!(v["grid_size"], 4096);
    }
}
