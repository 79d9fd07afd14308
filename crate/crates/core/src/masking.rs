//! Mask-pattern samplers.
//!
//! Every sampler draws one uniform `U_i` per sequence position from
//! `stream.uniform_at(i)`, so the draw for a position does not depend on
//! which other positions are eligible. Antithetic pairs reuse the same
//! uniforms; independent replicas use derived child streams.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Standard,
    MirrorA,
    MirrorB,
    Multisample,
    Isad,
}

/// A realized set of masked positions at rate `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub t: f64,
    /// Masked positions, sorted ascending.
    pub masked: Vec<usize>,
    /// Per-token loss weight for each entry of `masked`.
    pub token_weights: Vec<f64>,
    pub scheme: Scheme,
    /// Size of the eligibility set; the loss normalizer `P`.
    pub eligible_count: usize,
}

impl MaskPattern {
    /// Copy of `seq.tokens` with masked positions replaced by the mask id.
    pub fn apply(&self, seq: &TokenSeq, vocab: &Vocab) -> Vec<u32> {
        let mut xt = seq.tokens.clone();
        for &i in &self.masked {
            xt[i] = vocab.mask_id;
        }
        xt
    }
}

/// Masking-scheme configuration, parsed from `standard`, `mirror`,
/// `multisample:k` or `isad` (optionally `isad:delta`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskingSpec {
    Standard,
    Mirror,
    Multisample(usize),
    Isad(f64),
}

impl MaskingSpec {
    /// Model evaluations consumed per training sample.
    pub fn passes(&self) -> usize {
        match self {
            Self::Mirror => 2,
            Self::Multisample(k) => *k,
            _ => 1,
        }
    }
}

impl std::fmt::Display for MaskingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Standard => write!(f, "standard"),
            Self::Mirror => write!(f, "mirror"),
            Self::Multisample(k) => write!(f, "multisample:{k}"),
            Self::Isad(d) => write!(f, "isad:{d}"),
        }
    }
}

impl std::str::FromStr for MaskingSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let arg = parts.next();
        if parts.next().is_some() {
            return invalid(format!("masking spec `{s}` has too many fields"));
        }
        let spec = match (head, arg) {
            ("standard", None) => Self::Standard,
            ("mirror", None) => Self::Mirror,
            ("multisample", Some(k)) => Self::Multisample(
                k.parse()
                    .map_err(|_| LabError::Invalid(format!("bad multisample count `{k}`")))?,
            ),
            ("isad", None) => Self::Isad(0.2),
            ("isad", Some(d)) => Self::Isad(
                d.parse()
                    .map_err(|_| LabError::Invalid(format!("bad isad delta `{d}`")))?,
            ),
            _ => return invalid(format!("unknown masking spec `{s}`")),
        };
        match spec {
            Self::Multisample(0) => invalid("multisample count must be at least 1"),
            Self::Isad(d) if !(d > 0.0 && d < 1.0) => invalid("isad delta must lie in (0, 1)"),
            ok => Ok(ok),
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        invalid(format!("masking rate must lie in (0, 1], got {t}"))
    }
}

fn threshold_mask(
    eligible: &[usize],
    t: f64,
    stream: &RngStream,
    scheme: Scheme,
    keep: impl Fn(f64) -> bool,
) -> MaskPattern {
    let masked: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&i| keep(stream.uniform_at(i as u64)))
        .collect();
    MaskPattern {
        t,
        token_weights: vec![1.0; masked.len()],
        masked,
        scheme,
        eligible_count: eligible.len(),
    }
}

/// Mask each eligible position independently with probability `t`.
pub fn mask_standard(eligible: &[usize], t: f64, stream: &RngStream) -> Result<MaskPattern> {
    check_t(t)?;
    Ok(threshold_mask(eligible, t, stream, Scheme::Standard, |u| u < t))
}

/// Complementary pair sharing the same uniforms: `U_i < t` and `U_i > 1 - t`.
pub fn mask_mirror(
    eligible: &[usize],
    t: f64,
    stream: &RngStream,
) -> Result<(MaskPattern, MaskPattern)> {
    check_t(t)?;
    let a = threshold_mask(eligible, t, stream, Scheme::MirrorA, |u| u < t);
    let b = threshold_mask(eligible, t, stream, Scheme::MirrorB, |u| u > 1.0 - t);
    Ok((a, b))
}

/// `k` masks with independent uniforms at the same rate.
pub fn mask_multisample(
    eligible: &[usize],
    t: f64,
    k: usize,
    stream: &RngStream,
) -> Result<Vec<MaskPattern>> {
    check_t(t)?;
    if k < 1 {
        return invalid("multisample count must be at least 1");
    }
    Ok((0..k)
        .map(|r| {
            let s = stream.derive("multisample", r as u64);
            threshold_mask(eligible, t, &s, Scheme::Multisample, |u| u < t)
        })
        .collect())
}

/// Delimiter-boosted masking: rare positions are masked with probability
/// `min(1, t + delta)` and carry weight `t / q` so the `1/(P t)`-normalized
/// loss weights them by `1/q`.
pub fn mask_isad(
    seq: &TokenSeq,
    eligible: &[usize],
    t: f64,
    delta: f64,
    stream: &RngStream,
) -> Result<MaskPattern> {
    check_t(t)?;
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("isad delta must lie in (0, 1), got {delta}"));
    }
    let q_rare = (t + delta).min(1.0);
    let mut masked = Vec::new();
    let mut token_weights = Vec::new();
    for &i in eligible {
        let rare = seq.rare_positions.binary_search(&i).is_ok();
        let q = if rare { q_rare } else { t };
        if stream.uniform_at(i as u64) < q {
            masked.push(i);
            token_weights.push(if rare { t / q } else { 1.0 });
        }
    }
    Ok(MaskPattern {
        t,
        masked,
        token_weights,
        scheme: Scheme::Isad,
        eligible_count: eligible.len(),
    })
}

/// Rare-token masking probability under the delimiter boost.
pub fn isad_rate(t: f64, delta: f64) -> f64 {
    (t + delta).min(1.0)
}

pub fn validate_pattern(pattern: &MaskPattern, eligible: &[usize]) -> Result<()> {
    if pattern.masked.len() != pattern.token_weights.len() {
        return Err(LabError::Invalid("token weights misaligned with mask".into()));
    }
    if pattern.masked.iter().any(|i| eligible.binary_search(i).is_err()) {
        return Err(LabError::Invalid("pattern masks an ineligible position".into()));
    }
    Ok(())
}
