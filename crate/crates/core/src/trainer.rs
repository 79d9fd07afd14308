//! SGD training of the denoiser with pluggable rate sampler, masking scheme,
//! eligibility mode and control variate, plus the multi-method, multi-seed
//! comparison harness.
//!
//! Randomness is keyed by purpose and position: the batch composition by
//! `(epoch, position)`, rates by step, masks by global sample index. Sample
//! losses and gradients are evaluated in parallel and reduced in index order,
//! so a run is bit-reproducible regardless of thread count.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, load_corpus, Eligibility, TokenSeq, Vocab};
use crate::denoiser::{Denoiser, Shape};
use crate::error::{invalid, LabError, Result};
use crate::masking::{mask_isad, mask_mirror, mask_multisample, mask_standard, MaskPattern, MaskingSpec};
use crate::ppots::{estimate_scatter, fit_epr, FitArtifact};
use crate::rng::RngStream;
use crate::stats;
use crate::tsampler::{
    default_strata, sample_clipped, sample_stratified, sample_uniform, TSamplerSpec,
    TabulatedDensity, WeightedT,
};
use crate::variance::{EmaBinState, OnlineVarAccumulator};

/// Where the training corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n: usize,
    pub seq_len: usize,
    /// Corpus generation seed, independent of the run seed.
    pub seed: u64,
    /// Load from a dump instead of generating.
    pub path: Option<String>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { n: 512, seq_len: 32, seed: 0, path: None }
    }
}

impl CorpusSpec {
    pub fn build(&self) -> Result<Vec<TokenSeq>> {
        match &self.path {
            Some(p) => {
                let f = std::fs::File::open(p)?;
                let c = load_corpus(std::io::BufReader::new(f))?;
                if c.is_empty() {
                    return invalid(format!("corpus file {p} is empty"));
                }
                Ok(c)
            }
            None => generate_corpus(self.n, self.seq_len, &RngStream::root(self.seed).derive("corpus", 0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControlVariate {
    None,
    Ema { m: usize, eta: f64 },
}

/// Scatter and fit settings used by `epr:auto`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpotsSettings {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub restarts: usize,
}

impl Default for PpotsSettings {
    fn default() -> Self {
        Self { a: 15, b: 70, c: 15, restarts: 20 }
    }
}

/// Full training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// When set, overrides `steps` with `ceil(epochs · n / batch_size)`.
    pub epochs: Option<f64>,
    pub batch_size: usize,
    pub lr: f64,
    pub tsampler: String,
    pub masking: String,
    pub eligibility: Eligibility,
    pub control_variate: ControlVariate,
    /// Evaluate the fixed held-in objective every this many steps (0 = never).
    pub eval_every: usize,
    pub corpus: CorpusSpec,
    pub d: usize,
    pub h: usize,
    pub ppots: PpotsSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 200,
            epochs: None,
            batch_size: 32,
            lr: 1.0,
            tsampler: "uniform".into(),
            masking: "standard".into(),
            eligibility: Eligibility::Sft,
            control_variate: ControlVariate::None,
            eval_every: 0,
            corpus: CorpusSpec::default(),
            d: 16,
            h: 64,
            ppots: PpotsSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(TSamplerSpec, MaskingSpec)> {
        if self.batch_size < 1 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return invalid("lr must be a finite non-negative number");
        }
        if self.d < 1 || self.h < 1 {
            return invalid("model sizes must be positive");
        }
        if let ControlVariate::Ema { m, eta } = self.control_variate {
            EmaBinState::new(m, eta)?;
        }
        let ts: TSamplerSpec = self.tsampler.parse()?;
        if let TSamplerSpec::Strata(Some(k)) = ts {
            if k > self.batch_size {
                return invalid("stratum count exceeds batch size");
            }
        }
        Ok((ts, self.masking.parse()?))
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        match self.epochs {
            Some(e) => (e * corpus_len as f64 / self.batch_size as f64).ceil() as usize,
            None => self.steps,
        }
    }
}

/// Resolved rate sampler.
enum RateSampler {
    Uniform,
    Clipped(f64, f64),
    Strata(usize),
    Density(TabulatedDensity),
}

impl RateSampler {
    fn draw(&self, n: usize, stream: &RngStream) -> Result<Vec<WeightedT>> {
        match self {
            Self::Uniform => Ok(sample_uniform(n, stream)),
            Self::Clipped(b, o) => sample_clipped(n, *b, *o, stream),
            Self::Strata(k) => sample_stratified(n, *k, stream),
            Self::Density(d) => Ok(d.sample(n, stream)),
        }
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Batch mean of importance-weighted sample losses.
    pub loss: f64,
    pub weight_mean: f64,
    /// Batch mean after the control-variate adjustment.
    pub adjusted_loss: f64,
    /// Cumulative model evaluations.
    pub evals: u64,
    pub eval_loss: Option<f64>,
    pub acc: OnlineVarAccumulator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub first5_mean: f64,
    pub last5_mean: f64,
    /// Streaming weighted variance estimate over every sample of the run.
    pub final_variance: f64,
    /// Sample variance of the importance-weighted per-sample losses.
    pub estimator_variance: f64,
    pub evals: u64,
    pub final_eval_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
    /// EPR fit used by the run, when the sampler was fitted.
    pub fit: Option<FitArtifact>,
}

impl RunLog {
    /// `step,loss,weight_mean,adjusted_loss,evals` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,weight_mean,adjusted_loss,evals\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt_f64(r.loss),
                fmt_f64(r.weight_mean),
                fmt_f64(r.adjusted_loss),
                r.evals
            ));
        }
        out
    }
}

/// Round-trip float formatting used in every CSV artifact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Everything a run needs besides its configuration.
pub struct TrainSetup {
    pub vocab: Vocab,
    pub corpus: Vec<TokenSeq>,
    pub model: Denoiser,
}

impl TrainSetup {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let vocab = Vocab::default();
        let corpus = config.corpus.build()?;
        let max_len = corpus.iter().map(TokenSeq::len).max().unwrap_or(1);
        let shape = Shape { vocab: vocab.size, max_len, d: config.d, h: config.h };
        let model = Denoiser::init(shape, &RngStream::root(config.seed).derive("model", 0));
        Ok(Self { vocab, corpus, model })
    }
}

struct SampleOut {
    weighted: f64,
    weight: f64,
    t: f64,
    grad: Option<Vec<f64>>,
}

/// Train from the configuration's own corpus and initialization.
pub fn train(config: &TrainConfig) -> Result<(Denoiser, RunLog)> {
    let setup = TrainSetup::new(config)?;
    train_from(config, setup)
}

/// Resolve the rate sampler, fitting EPR on the initial model when asked.
fn resolve_sampler(
    spec: &TSamplerSpec,
    config: &TrainConfig,
    setup: &TrainSetup,
) -> Result<(RateSampler, Option<FitArtifact>)> {
    Ok(match spec {
        TSamplerSpec::Uniform => (RateSampler::Uniform, None),
        TSamplerSpec::Clipped { beta, omega } => (RateSampler::Clipped(*beta, *omega), None),
        TSamplerSpec::Strata(k) => (
            RateSampler::Strata(k.unwrap_or_else(|| default_strata(config.batch_size))),
            None,
        ),
        TSamplerSpec::Epr(path) if path == "auto" => {
            let p = config.ppots;
            let root = RngStream::root(config.seed);
            let scatter = estimate_scatter(
                &setup.model,
                &setup.corpus,
                &setup.vocab,
                config.eligibility,
                p.a.min(setup.corpus.len()),
                p.b,
                p.c,
                &root.derive("ppots-scatter", 0),
            )?;
            let fit = fit_epr(&scatter.points, p.restarts, &root.derive("ppots-fit", 0))?;
            let art = FitArtifact::new(&fit, &scatter.points);
            (RateSampler::Density(fit.params.density()?), Some(art))
        }
        TSamplerSpec::Epr(path) => {
            let art = FitArtifact::load(Path::new(path))?;
            (RateSampler::Density(art.params.density()?), Some(art))
        }
    })
}

/// Train starting from a prepared corpus and model.
pub fn train_from(config: &TrainConfig, setup: TrainSetup) -> Result<(Denoiser, RunLog)> {
    let (ts_spec, masking) = config.validate()?;
    let (sampler, fit) = resolve_sampler(&ts_spec, config, &setup)?;
    let TrainSetup { vocab, corpus, mut model } = setup;
    let n = corpus.len();
    let batch = config.batch_size;
    let steps = config.total_steps(n);
    let root = RngStream::root(config.seed);
    let mut ema = match config.control_variate {
        ControlVariate::None => None,
        ControlVariate::Ema { m, eta } => Some(EmaBinState::new(m, eta)?),
    };
    let want_grad = config.lr > 0.0;
    let eligible: Vec<Vec<usize>> = corpus.iter().map(|s| s.eligibility(config.eligibility)).collect();
    let eval_set = EvalSet::new(&corpus, config.eligibility, &root);

    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    let mut acc = OnlineVarAccumulator::new();
    let mut weighted_all: Vec<f64> = Vec::with_capacity(steps * batch);
    let mut records = Vec::with_capacity(steps);
    let mut evals: u64 = 0;

    for step in 0..steps {
        let mut picks = Vec::with_capacity(batch);
        for k in 0..batch {
            let g = step * batch + k;
            let epoch = g / n;
            if epoch != perm_epoch {
                perm = epoch_permutation(n, &root.derive("epoch-perm", epoch as u64));
                perm_epoch = epoch;
            }
            picks.push((g, perm[g % n]));
        }
        let rates = sampler.draw(batch, &root.derive("t", step as u64))?;

        let outs: Vec<Result<SampleOut>> = picks
            .par_iter()
            .zip(rates.par_iter())
            .map(|(&(g, idx), wt)| {
                let seq = &corpus[idx];
                let stream = root.derive("mask", g as u64);
                let patterns = build_patterns(seq, &eligible[idx], wt.t, masking, &stream)?;
                let k = patterns.len() as f64;
                let mut loss = 0.0;
                let mut grad: Option<Vec<f64>> = None;
                for p in &patterns {
                    if want_grad {
                        let (l, gr) = model.loss_and_grad(seq, p, &vocab)?;
                        loss += l;
                        match grad.as_mut() {
                            None => grad = Some(gr),
                            Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b),
                        }
                    } else {
                        loss += model.loss(seq, p, &vocab)?;
                    }
                }
                let scale = wt.weight / k;
                if let Some(gr) = grad.as_mut() {
                    gr.iter_mut().for_each(|x| *x *= scale);
                }
                let weighted = wt.weight * loss / k;
                if !weighted.is_finite() {
                    return Err(LabError::Numerical(format!(
                        "non-finite loss at step {step}, sample {g} (sequence {idx}, t = {}, weight = {})",
                        wt.t, wt.weight
                    )));
                }
                Ok(SampleOut { weighted, weight: wt.weight, t: wt.t, grad })
            })
            .collect();

        let mut sum_loss = 0.0;
        let mut sum_adj = 0.0;
        let mut sum_w = 0.0;
        let mut grad_sum = want_grad.then(|| vec![0.0; model.params.len()]);
        for out in outs {
            let out = out?;
            let adjusted = match ema.as_mut() {
                Some(e) => e.adjust(out.t, out.weighted)?,
                None => out.weighted,
            };
            sum_loss += out.weighted;
            sum_adj += adjusted;
            sum_w += out.weight;
            acc.update(out.weighted / out.weight, out.weight)?;
            weighted_all.push(out.weighted);
            if let (Some(gs), Some(g)) = (grad_sum.as_mut(), out.grad.as_ref()) {
                gs.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        evals += (batch * masking.passes()) as u64;
        if let Some(mut gs) = grad_sum {
            let inv = 1.0 / batch as f64;
            gs.iter_mut().for_each(|x| *x *= inv);
            model.sgd_step(&gs, config.lr)?;
        }
        let bf = batch as f64;
        let eval_loss = (config.eval_every > 0 && (step + 1) % config.eval_every == 0)
            .then(|| eval_set.loss(&model, &corpus, &vocab))
            .transpose()?;
        records.push(StepRecord {
            step,
            loss: sum_loss / bf,
            weight_mean: sum_w / bf,
            adjusted_loss: sum_adj / bf,
            evals,
            eval_loss,
            acc,
        });
    }

    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let (first5, last5) = if losses.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        stats::head_tail_means(&losses, 5)
    };
    let summary = RunSummary {
        steps,
        first5_mean: first5,
        last5_mean: last5,
        final_variance: acc.finalize().unwrap_or(f64::NAN),
        estimator_variance: stats::var(&weighted_all),
        evals,
        final_eval_loss: records.iter().rev().find_map(|r| r.eval_loss),
    };
    Ok((model, RunLog { steps: records, summary, fit }))
}

fn epoch_permutation(n: usize, stream: &RngStream) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut s = stream.clone();
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut s);
    p
}

/// Mask patterns for one sample under the configured scheme.
pub fn build_patterns(
    seq: &TokenSeq,
    eligible: &[usize],
    t: f64,
    masking: MaskingSpec,
    stream: &RngStream,
) -> Result<Vec<MaskPattern>> {
    Ok(match masking {
        MaskingSpec::Standard => vec![mask_standard(eligible, t, stream)?],
        MaskingSpec::Mirror => {
            let (a, b) = mask_mirror(eligible, t, stream)?;
            vec![a, b]
        }
        MaskingSpec::Multisample(k) => mask_multisample(eligible, t, k, stream)?,
        MaskingSpec::Isad(delta) => vec![mask_isad(seq, eligible, t, delta, stream)?],
    })
}

/// A fixed set of (sequence, rate, mask) triples for a low-noise objective
/// estimate that is identical across methods.
struct EvalSet {
    items: Vec<(usize, MaskPattern)>,
}

impl EvalSet {
    fn new(corpus: &[TokenSeq], mode: Eligibility, root: &RngStream) -> Self {
        let base = root.derive("eval", 0);
        let rates: Vec<f64> = (0..8).map(|j| (j as f64 + 0.5) / 8.0).collect();
        let mut items = Vec::new();
        for (i, seq) in corpus.iter().enumerate().take(64) {
            let elig = seq.eligibility(mode);
            for (j, &t) in rates.iter().enumerate() {
                let s = base.derive("eval-mask", (i * rates.len() + j) as u64);
                items.push((i, mask_standard(&elig, t, &s).expect("grid rate is valid")));
            }
        }
        Self { items }
    }

    fn loss(&self, model: &Denoiser, corpus: &[TokenSeq], vocab: &Vocab) -> Result<f64> {
        let ls: Vec<f64> = self
            .items
            .par_iter()
            .map(|(i, p)| model.loss(&corpus[*i], p, vocab))
            .collect::<Result<_>>()?;
        Ok(stats::mean(&ls))
    }
}

/// Named method presets used by the comparison harness.
pub const METHODS: &[&str] = &[
    "standard",
    "clipped",
    "strats",
    "ema",
    "isad",
    "syrm",
    "ppots",
    "mirror",
    "ppots+mirror",
    "multisample2",
];

/// Apply a named preset on top of `base`.
pub fn method_config(base: &TrainConfig, method: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match method {
        "standard" => {}
        "clipped" => c.tsampler = "clipped:0.3:0.8".into(),
        "strats" => c.tsampler = "strata".into(),
        "ema" => c.control_variate = ControlVariate::Ema { m: 10, eta: 0.01 },
        "isad" => c.masking = "isad:0.2".into(),
        "syrm" => c.eligibility = Eligibility::Syrm,
        "ppots" => c.tsampler = "epr:auto".into(),
        "mirror" => c.masking = "mirror".into(),
        "ppots+mirror" => {
            c.tsampler = "epr:auto".into();
            c.masking = "mirror".into();
        }
        "multisample2" => c.masking = "multisample:2".into(),
        other => return invalid(format!("unknown method `{other}`")),
    }
    Ok(c)
}

/// One (method, seed, budget view) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub method: String,
    pub seed: u64,
    /// `matched` for single-pass methods; `normalized` (steps divided by the
    /// pass count) or `raw` (same steps) for multi-pass methods.
    pub budget: String,
    pub summary: RunSummary,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub log: Option<RunLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

/// Train every (method, seed) pair. Multi-pass methods run twice: at the
/// base step count and at the step count divided by their pass count.
pub fn run_matrix(methods: &[String], seeds: &[u64], base: &TrainConfig) -> Result<MatrixReport> {
    if methods.is_empty() || seeds.is_empty() {
        return invalid("run_matrix needs at least one method and one seed");
    }
    let mut rows = Vec::new();
    for method in methods {
        for &seed in seeds {
            let mut cfg = method_config(base, method)?;
            cfg.seed = seed;
            let passes = cfg.masking.parse::<MaskingSpec>()?.passes();
            let base_steps = cfg.total_steps(cfg.corpus.build()?.len());
            cfg.epochs = None;
            let views: Vec<(&str, usize)> = if passes > 1 {
                vec![("normalized", (base_steps / passes).max(1)), ("raw", base_steps)]
            } else {
                vec![("matched", base_steps)]
            };
            for (budget, steps) in views {
                let mut run = cfg.clone();
                run.steps = steps;
                let start = Instant::now();
                let (_, log) = train(&run)?;
                rows.push(MatrixRow {
                    method: method.clone(),
                    seed,
                    budget: budget.into(),
                    summary: log.summary.clone(),
                    wall_seconds: start.elapsed().as_secs_f64(),
                    log: Some(log),
                });
            }
        }
    }
    Ok(MatrixReport { rows })
}

impl MatrixReport {
    /// Rows used for budget-matched comparison (`matched` or `normalized`).
    pub fn matched(&self) -> impl Iterator<Item = &MatrixRow> {
        self.rows.iter().filter(|r| r.budget != "raw")
    }

    /// Mean `last5_mean` over seeds for a method in the matched view.
    pub fn mean_last5(&self, method: &str) -> Option<f64> {
        let xs: Vec<f64> = self
            .matched()
            .filter(|r| r.method == method)
            .map(|r| r.summary.last5_mean)
            .collect();
        (!xs.is_empty()).then(|| stats::mean(&xs))
    }

    /// `max − min` of `last5_mean` over seeds in the matched view.
    pub fn spread_last5(&self, method: &str) -> Option<f64> {
        let xs: Vec<f64> = self
            .matched()
            .filter(|r| r.method == method)
            .map(|r| r.summary.last5_mean)
            .collect();
        if xs.is_empty() {
            return None;
        }
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    /// Per-seed CSV in the matched view plus raw rows, without wall clock.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,seed,budget,steps,evals,first5_mean,last5_mean,final_variance,estimator_variance\n",
        );
        for r in &self.rows {
            let s = &r.summary;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.seed,
                r.budget,
                s.steps,
                s.evals,
                fmt_f64(s.first5_mean),
                fmt_f64(s.last5_mean),
                fmt_f64(s.final_variance),
                fmt_f64(s.estimator_variance)
            ));
        }
        out
    }

    /// Loss reduction relative to `standard` for the three synergy methods:
    /// `(gain(ppots), gain(mirror), gain(ppots+mirror))`.
    pub fn synergy(&self) -> Option<Synergy> {
        let base = self.mean_last5("standard")?;
        let gp = base - self.mean_last5("ppots")?;
        let gm = base - self.mean_last5("mirror")?;
        let gpm = base - self.mean_last5("ppots+mirror")?;
        Some(Synergy { gain_ppots: gp, gain_mirror: gm, gain_combined: gpm, additive: gp + gm })
    }
}

/// Descriptive comparison of combined and individual gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synergy {
    pub gain_ppots: f64,
    pub gain_mirror: f64,
    pub gain_combined: f64,
    pub additive: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            corpus: CorpusSpec { n: 40, seq_len: 16, ..CorpusSpec::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn frozen_model_is_untouched() {
        let mut c = small(3);
        c.lr = 0.0;
        let setup = TrainSetup::new(&c).unwrap();
        let before = setup.model.clone();
        let (after, log) = train_from(&c, setup).unwrap();
        assert_eq!(before, after);
        assert_eq!(log.steps.len(), 3);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut c = small(4);
        c.masking = "mirror".into();
        c.control_variate = ControlVariate::Ema { m: 4, eta: 0.1 };
        let (m1, l1) = train(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (m2, l2) = pool.install(|| train(&c)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn evaluation_counts_follow_passes() {
        let mut c = small(2);
        c.masking = "multisample:3".into();
        let (_, log) = train(&c).unwrap();
        assert_eq!(log.summary.evals, 2 * 8 * 3);
    }

    #[test]
    fn epochs_override_steps() {
        let mut c = small(1000);
        c.epochs = Some(1.0);
        assert_eq!(c.total_steps(40), 5);
        c.epochs = Some(0.5);
        assert_eq!(c.total_steps(40), 3);
    }

    #[test]
    fn ema_changes_only_the_adjusted_column() {
        let c = small(5);
        let mut e = c.clone();
        e.control_variate = ControlVariate::Ema { m: 2, eta: 0.5 };
        let (_, a) = train(&c).unwrap();
        let (_, b) = train(&e).unwrap();
        // Fresh state adjusts nothing on the first sample; the adjusted
        // column then departs while the model update ignores the baseline.
        assert_eq!(a.steps[0].loss, b.steps[0].loss);
        assert_eq!(a.steps.last().unwrap().loss, b.steps.last().unwrap().loss);
        assert!(a.steps.iter().zip(&b.steps).any(|(x, y)| x.adjusted_loss != y.adjusted_loss));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let c = small(2);
        let mut setup = TrainSetup::new(&c).unwrap();
        setup.model.params.iter_mut().for_each(|p| *p = f64::NAN);
        match train_from(&c, setup) {
            Err(LabError::Numerical(msg)) => assert!(msg.contains("step 0")),
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(1);
        c.batch_size = 0;
        assert!(train(&c).is_err());
        let mut c = small(1);
        c.lr = f64::NAN;
        assert!(train(&c).is_err());
        let mut c = small(1);
        c.tsampler = "strata:9".into();
        assert!(train(&c).is_err());
        assert!(method_config(&c, "adamw").is_err());
    }

    #[test]
    fn matrix_rows_and_budgets() {
        let base = small(4);
        let r = run_matrix(&["standard".into(), "mirror".into()], &[1], &base).unwrap();
        let views: Vec<(&str, &str, usize)> =
            r.rows.iter().map(|x| (x.method.as_str(), x.budget.as_str(), x.summary.steps)).collect();
        assert_eq!(views, vec![("standard", "matched", 4), ("mirror", "normalized", 2), ("mirror", "raw", 4)]);
        assert_eq!(r.rows[0].summary.evals, r.rows[1].summary.evals);
        assert!(run_matrix(&[], &[1], &base).is_err());
    }

    #[test]
    fn eval_column_is_method_independent_at_start() {
        let mut c = small(1);
        c.lr = 0.0;
        c.eval_every = 1;
        let mut m = c.clone();
        m.masking = "mirror".into();
        let (_, a) = train(&c).unwrap();
        let (_, b) = train(&m).unwrap();
        assert_eq!(a.summary.final_eval_loss, b.summary.final_eval_loss);
        assert!(a.summary.final_eval_loss.unwrap().is_finite());
    }
}
