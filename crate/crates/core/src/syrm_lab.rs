//! Closed-form and simulated variance of the masked loss under a two-group
//! token model.
//!
//! Response tokens (group R) and prompt syntax tokens (group C) have
//! group-homogeneous per-token loss mean `μ`, variance `σ²` and pairwise
//! covariance `ρ`. The batch loss is `L = (1/(P t)) Σ M_i Y_i` with
//! `M_i ~ Bernoulli(t)` independent of `Y`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::stats;

/// Which positions are eligible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Response tokens only.
    Resp,
    /// Response tokens plus syntax tokens.
    Syrm,
}

/// Group-homogeneous token-loss statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub p_r: usize,
    pub p_c: usize,
    pub mu_r: f64,
    pub mu_c: f64,
    pub sigma2_r: f64,
    pub sigma2_c: f64,
    pub rho_rr: f64,
    pub rho_cc: f64,
    pub rho_rc: f64,
}

/// Lower end of the truncated uniform rate distribution.
pub const T_LOW: f64 = 0.05;

impl Default for GroupModel {
    /// Eight response and eight coordination tokens; only the response group
    /// carries variance and within-group correlation.
    fn default() -> Self {
        Self {
            p_r: 8,
            p_c: 8,
            mu_r: 0.0,
            mu_c: 0.0,
            sigma2_r: 1.0,
            sigma2_c: 0.0,
            rho_rr: 0.5,
            rho_cc: 0.0,
            rho_rc: 0.0,
        }
    }
}

impl GroupModel {
    /// Full covariance of `(Y_R..., Y_C...)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.p_r + self.p_c;
        DMatrix::from_fn(n, n, |i, j| {
            let (ri, rj) = (i < self.p_r, j < self.p_r);
            match (i == j, ri, rj) {
                (true, true, _) => self.sigma2_r,
                (true, false, _) => self.sigma2_c,
                (false, true, true) => self.rho_rr,
                (false, false, false) => self.rho_cc,
                _ => self.rho_rc,
            }
        })
    }

    pub fn means(&self) -> DVector<f64> {
        DVector::from_fn(self.p_r + self.p_c, |i, _| if i < self.p_r { self.mu_r } else { self.mu_c })
    }

    /// Structural validity: positive counts, non-negative variances, the
    /// cross-covariance bound and a positive semidefinite covariance.
    pub fn validate(&self) -> Result<()> {
        if self.p_r < 1 || self.p_c < 1 {
            return invalid("both groups need at least one token");
        }
        if !(self.sigma2_r >= 0.0 && self.sigma2_c >= 0.0) {
            return invalid("variances must be non-negative");
        }
        let bound = (self.rho_rr.max(0.0) * self.rho_cc.max(0.0)).sqrt();
        if self.rho_rc.abs() > bound * (1.0 + 1e-12) {
            return invalid("cross-covariance exceeds the Cauchy-Schwarz bound");
        }
        let eig = SymmetricEigen::new(self.covariance());
        let scale = self.sigma2_r.max(self.sigma2_c).max(1e-300);
        if eig.eigenvalues.min() < -1e-10 * scale * (self.p_r + self.p_c) as f64 {
            return invalid("covariance is not positive semidefinite");
        }
        Ok(())
    }

    /// `(P, Σσ², Σμ², Σ_{i<j} ρ_ij)` for a strategy.
    fn sums(&self, strategy: Strategy) -> (f64, f64, f64, f64) {
        let pr = self.p_r as f64;
        let pairs = |n: f64| n * (n - 1.0) / 2.0;
        match strategy {
            Strategy::Resp => (
                pr,
                pr * self.sigma2_r,
                pr * self.mu_r * self.mu_r,
                pairs(pr) * self.rho_rr,
            ),
            Strategy::Syrm => {
                let pc = self.p_c as f64;
                (
                    pr + pc,
                    pr * self.sigma2_r + pc * self.sigma2_c,
                    pr * self.mu_r * self.mu_r + pc * self.mu_c * self.mu_c,
                    pairs(pr) * self.rho_rr + pairs(pc) * self.rho_cc + pr * pc * self.rho_rc,
                )
            }
        }
    }
}

/// Conditional variance of the batch loss at rate `t`:
/// `Σσ²/(P² t) + (1−t) Σμ²/(P² t) + 2 Σ_{i<j} ρ_ij / P²`.
pub fn batch_loss_variance(gm: &GroupModel, strategy: Strategy, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return invalid(format!("t must lie in (0, 1], got {t}"));
    }
    let (p, s2, m2, pair) = gm.sums(strategy);
    let p2 = p * p;
    Ok(s2 / (p2 * t) + (1.0 - t) * m2 / (p2 * t) + 2.0 * pair / p2)
}

/// `E[1/t]` for `t ~ U[lo, 1]`.
pub fn inverse_rate_mean(lo: f64) -> f64 {
    -lo.ln() / (1.0 - lo)
}

/// Mask-pattern noise `A(S) = E_t Var[L | t]` for `t ~ U[lo, 1]`, by
/// quadrature of the conditional variance.
pub fn pattern_noise(gm: &GroupModel, strategy: Strategy, lo: f64) -> Result<f64> {
    if !(lo > 0.0 && lo < 1.0) {
        return invalid("truncation point must lie in (0, 1)");
    }
    let f = |t: f64| batch_loss_variance(gm, strategy, t).expect("t inside (0, 1]");
    // Geometric panels resolve the 1/t behaviour near the lower end.
    let panels = 64;
    let ratio = (1.0 / lo).powf(1.0 / panels as f64);
    let mut total = 0.0;
    let mut a = lo;
    for _ in 0..panels {
        let b = (a * ratio).min(1.0);
        total += stats::integrate(f, a, b, 4);
        a = b;
    }
    Ok(total / (1.0 - lo))
}

/// Outcome of the variance-ordering check for the two strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Verdict {
    /// `None` when an assumption fails.
    pub holds: Option<bool>,
    pub a_syrm: f64,
    pub a_resp: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w_r: f64,
    pub big_b: f64,
    /// Names and descriptions of failed assumptions.
    pub violations: Vec<String>,
}

/// Check assumptions A1–A5 and, if they hold, compare `A(S_syrm)` with
/// `A(S_resp)` for `t ~ U[lo, 1]`.
///
/// "Much smaller" in A2/A3 is read as strictly smaller (`α < 1`, `β < 1`);
/// A2 additionally requires `μ_C² ≤ μ_R²`, since the `(1−t)/t · μ²` term
/// otherwise breaks the ordering.
pub fn check_theorem3(gm: &GroupModel, lo: f64) -> Result<Theorem3Verdict> {
    let a_syrm = pattern_noise(gm, Strategy::Syrm, lo)?;
    let a_resp = pattern_noise(gm, Strategy::Resp, lo)?;
    let big_b = inverse_rate_mean(lo);
    let alpha = gm.sigma2_c / gm.sigma2_r;
    let beta = gm.rho_cc / gm.rho_rr;
    let w_r = gm.p_r as f64 / (gm.p_r + gm.p_c) as f64;
    let mut violations = Vec::new();
    if let Err(e) = gm.validate() {
        violations.push(format!("A1: {e}"));
    }
    if !(gm.sigma2_r > 0.0) || !(alpha < 1.0) {
        violations.push(format!("A2: sigma2_C / sigma2_R = {alpha} is not below 1"));
    }
    if gm.mu_c * gm.mu_c > gm.mu_r * gm.mu_r {
        violations.push("A2: syntax-token mean loss exceeds response-token mean loss".into());
    }
    if !(gm.rho_rr > 0.0) || !(0.0..1.0).contains(&beta) {
        violations.push(format!("A3: rho_CC / rho_RR = {beta} is not in [0, 1)"));
    }
    if gm.rho_rc.abs() > (gm.rho_rr.max(0.0) * gm.rho_cc.max(0.0)).sqrt() * (1.0 + 1e-12) {
        violations.push("A4: |rho_RC| exceeds sqrt(rho_RR rho_CC)".into());
    }
    let rhs = (1.0 - alpha) * (gm.p_r as f64 - 1.0) * gm.rho_rr / (gm.sigma2_r * big_b) + (1.0 - beta);
    if !(2.0 * w_r * beta <= rhs) {
        violations.push(format!("A5: 2 w_R beta = {} exceeds {rhs}", 2.0 * w_r * beta));
    }
    let holds = violations.is_empty().then_some(a_syrm < a_resp);
    Ok(Theorem3Verdict { holds, a_syrm, a_resp, alpha, beta, w_r, big_b, violations })
}

/// Simulated batch losses for both strategies from shared draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDraw {
    pub t: f64,
    pub l_resp: f64,
    pub l_coord: f64,
    pub l_syrm: f64,
}

/// Sampler of Gaussian token losses with the model's moments.
pub struct GroupSimulator {
    gm: GroupModel,
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl GroupSimulator {
    pub fn new(gm: &GroupModel) -> Result<Self> {
        gm.validate()?;
        let eig = SymmetricEigen::new(gm.covariance());
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Ok(Self { gm: *gm, mean: gm.means(), root })
    }

    /// One draw at rate `t`: token losses `Y`, masks `M`, and the three
    /// batch losses computed directly from their definitions.
    pub fn draw(&self, t: f64, stream: &mut RngStream) -> SimDraw {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(stream));
        let y = &self.mean + &self.root * z;
        let (pr, pc) = (self.gm.p_r, self.gm.p_c);
        let mut s_r = 0.0;
        let mut s_c = 0.0;
        let mut s_all = 0.0;
        for i in 0..n {
            if stream.uniform() < t {
                if i < pr {
                    s_r += y[i];
                } else {
                    s_c += y[i];
                }
                s_all += y[i];
            }
        }
        SimDraw {
            t,
            l_resp: s_r / (pr as f64 * t),
            l_coord: s_c / (pc as f64 * t),
            l_syrm: s_all / ((pr + pc) as f64 * t),
        }
    }

    /// Weight of the response loss in the SyRM mixture, `P_R / (P_R + P_C)`.
    pub fn mixture_weight(&self) -> f64 {
        self.gm.p_r as f64 / (self.gm.p_r + self.gm.p_c) as f64
    }
}

/// Monte Carlo variance of `L` at fixed `t` with its standard error.
pub fn simulate_variance(
    gm: &GroupModel,
    strategy: Strategy,
    t: f64,
    draws: usize,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    let sim = GroupSimulator::new(gm)?;
    let mut s = stream.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            let d = sim.draw(t, &mut s);
            match strategy {
                Strategy::Resp => d.l_resp,
                Strategy::Syrm => d.l_syrm,
            }
        })
        .collect();
    Ok((stats::var(&xs), stats::stderr_of_var(&xs)))
}

/// `((1 − α) / λ_min) · ‖∇J_coord(θ*_resp)‖`.
pub fn optimum_shift_bound(alpha: f64, lambda_min: f64, grad_coord_norm: f64) -> Result<f64> {
    if !(lambda_min > 0.0) {
        return invalid("curvature lower bound must be positive");
    }
    if !(0.0..=1.0).contains(&alpha) {
        return invalid("mixture weight must lie in [0, 1]");
    }
    Ok((1.0 - alpha) / lambda_min * grad_coord_norm)
}

/// Pair of quadratic objectives `J(θ) = ½ (θ − c)ᵀ H (θ − c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticPair {
    pub h_resp: DMatrix<f64>,
    pub c_resp: DVector<f64>,
    pub h_coord: DMatrix<f64>,
    pub c_coord: DVector<f64>,
}

/// Exact shift and the bound for a quadratic pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftCheck {
    pub shift: f64,
    pub bound: f64,
    pub lambda_min: f64,
}

impl QuadraticPair {
    pub fn check(&self, alpha: f64) -> Result<ShiftCheck> {
        let h = &self.h_resp * alpha + &self.h_coord * (1.0 - alpha);
        let lambda_min = SymmetricEigen::new(h.clone()).eigenvalues.min();
        if !(lambda_min > 0.0) {
            return invalid("mixture Hessian is not positive definite");
        }
        let rhs = &self.h_resp * &self.c_resp * alpha + &self.h_coord * &self.c_coord * (1.0 - alpha);
        let theta_syrm = h
            .lu()
            .solve(&rhs)
            .ok_or_else(|| crate::LabError::Numerical("singular mixture Hessian".into()))?;
        let theta_resp = &self.c_resp;
        let grad_coord = &self.h_coord * (theta_resp - &self.c_coord);
        Ok(ShiftCheck {
            shift: (theta_syrm - theta_resp).norm(),
            bound: optimum_shift_bound(alpha, lambda_min, grad_coord.norm())?,
            lambda_min,
        })
    }
}

/// Draw a random model satisfying A1–A5 by rejection.
pub fn random_valid_model(stream: &mut RngStream, lo: f64) -> GroupModel {
    loop {
        let p_r = 2 + stream.below(15) as usize;
        let p_c = 1 + stream.below(8) as usize;
        let sigma2_r = 0.2 + 2.0 * stream.uniform();
        let rho_rr = sigma2_r * 0.9 * stream.uniform();
        let gm = GroupModel {
            p_r,
            p_c,
            mu_r: 0.5 + 2.0 * stream.uniform(),
            mu_c: 0.0,
            sigma2_r,
            sigma2_c: sigma2_r * stream.uniform(),
            rho_rr,
            rho_cc: 0.0,
            rho_rc: 0.0,
        };
        let rho_cc = (gm.sigma2_c * 0.9 * stream.uniform()).min(rho_rr * stream.uniform());
        let rho_rc = (2.0 * stream.uniform() - 1.0) * (rho_rr * rho_cc).sqrt();
        let gm = GroupModel {
            mu_c: gm.mu_r * stream.uniform(),
            rho_cc,
            rho_rc,
            ..gm
        };
        if check_theorem3(&gm, lo).map(|v| v.violations.is_empty()).unwrap_or(false) {
            return gm;
        }
    }
}

/// Closed form against simulation at one rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedRateCheck {
    pub t: f64,
    pub strategy: Strategy,
    pub closed_form: f64,
    pub simulated: f64,
    pub stderr: f64,
}

/// Quadrature of the pattern noise against simulation over random rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratedCheck {
    pub strategy: Strategy,
    pub quadrature: f64,
    pub simulated: f64,
    pub stderr: f64,
}

/// Every quantity the SyRM harness computes for one group model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyrmReport {
    pub model: GroupModel,
    pub t_low: f64,
    pub draws: usize,
    pub verdict: Theorem3Verdict,
    pub fixed_rate: Vec<FixedRateCheck>,
    pub integrated: Vec<IntegratedCheck>,
    /// Largest `|L_syrm − (α L_resp + (1 − α) L_coord)|` relative to the
    /// draw's magnitude.
    pub mixture_max_rel_dev: f64,
}

/// Simulated losses with `t ~ U[lo, 1]`, drawn on a single stream.
pub fn simulate_random_rates(gm: &GroupModel, lo: f64, draws: usize, stream: &RngStream) -> Result<Vec<SimDraw>> {
    let sim = GroupSimulator::new(gm)?;
    let mut s = stream.clone();
    Ok((0..draws)
        .map(|_| {
            let t = lo + (1.0 - lo) * (1.0 - s.uniform());
            sim.draw(t, &mut s)
        })
        .collect())
}

/// Run the full set of closed-form, quadrature and simulation checks.
pub fn syrm_report(gm: &GroupModel, draws: usize, stream: &RngStream) -> Result<SyrmReport> {
    if draws < 2 {
        return invalid("need at least two draws");
    }
    let verdict = check_theorem3(gm, T_LOW)?;
    let mut fixed_rate = Vec::new();
    for (k, &t) in [0.1, 0.5, 1.0].iter().enumerate() {
        for (j, strategy) in [Strategy::Resp, Strategy::Syrm].into_iter().enumerate() {
            let (simulated, stderr) =
                simulate_variance(gm, strategy, t, draws, &stream.derive("fixed-rate", (2 * k + j) as u64))?;
            fixed_rate.push(FixedRateCheck {
                t,
                strategy,
                closed_form: batch_loss_variance(gm, strategy, t)?,
                simulated,
                stderr,
            });
        }
    }
    let sims = simulate_random_rates(gm, T_LOW, draws, &stream.derive("random-rate", 0))?;
    let alpha = gm.p_r as f64 / (gm.p_r + gm.p_c) as f64;
    let mut integrated = Vec::new();
    for strategy in [Strategy::Resp, Strategy::Syrm] {
        let xs: Vec<f64> = sims
            .iter()
            .map(|d| match strategy {
                Strategy::Resp => d.l_resp,
                Strategy::Syrm => d.l_syrm,
            })
            .collect();
        integrated.push(IntegratedCheck {
            strategy,
            quadrature: pattern_noise(gm, strategy, T_LOW)?,
            simulated: stats::var(&xs),
            stderr: stats::stderr_of_var(&xs),
        });
    }
    let mixture_max_rel_dev = sims
        .iter()
        .map(|d| {
            let mix = alpha * d.l_resp + (1.0 - alpha) * d.l_coord;
            (d.l_syrm - mix).abs() / (1.0 + d.l_resp.abs() + d.l_coord.abs())
        })
        .fold(0.0, f64::max);
    Ok(SyrmReport {
        model: *gm,
        t_low: T_LOW,
        draws,
        verdict,
        fixed_rate,
        integrated,
        mixture_max_rel_dev,
    })
}
