//! A two-layer masked-token predictor with exact hand-derived gradients.
//!
//! Position `i` is represented by `[E[x_t(i)] + Pos[i] ; ctx]` where `ctx`
//! is the mean embedding of the unmasked positions of `x_t`. One tanh hidden
//! layer and a linear read-out produce logits over the vocabulary.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, LabError, Result};
use crate::masking::MaskPattern;
use crate::rng::RngStream;

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub vocab: usize,
    pub max_len: usize,
    pub d: usize,
    pub h: usize,
}

impl Shape {
    pub fn new(vocab: usize, max_len: usize) -> Self {
        Self { vocab, max_len, d: 16, h: 64 }
    }

    fn offsets(&self) -> Offsets {
        let tok = 0;
        let pos = tok + self.vocab * self.d;
        let w1 = pos + self.max_len * self.d;
        let b1 = w1 + 2 * self.d * self.h;
        let w2 = b1 + self.h;
        let b2 = w2 + self.h * self.vocab;
        let len = b2 + self.vocab;
        Offsets { tok, pos, w1, b1, w2, b2, len }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.offsets().len
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    tok: usize,
    pos: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

/// Flat parameter vector plus its shape.
///
/// Layout: token embeddings `[vocab × d]`, position embeddings
/// `[max_len × d]`, `W1 [2d × h]`, `b1 [h]`, `W2 [h × vocab]`, `b2 [vocab]`,
/// all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub shape: Shape,
    pub params: Vec<f64>,
}

/// Gradient with the same layout as [`Denoiser::params`].
pub type Gradients = Vec<f64>;

struct Forward {
    z: Vec<f64>,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
    ctx_count: usize,
}

impl Denoiser {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, params: vec![0.0; shape.num_params()] }
    }

    /// Entries drawn from `U(-0.05, 0.05)`.
    pub fn init(shape: Shape, stream: &RngStream) -> Self {
        let mut s = stream.derive("denoiser-init", 0);
        let params = (0..shape.num_params())
            .map(|_| (s.uniform() - 0.5) * 0.1)
            .collect();
        Self { shape, params }
    }

    /// Default architecture for the synthetic vocabulary.
    pub fn for_vocab(vocab: &Vocab, max_len: usize) -> Shape {
        Shape::new(vocab.size, max_len)
    }

    fn check_input(&self, xt: &[u32]) -> Result<()> {
        if xt.len() > self.shape.max_len {
            return invalid(format!(
                "sequence length {} exceeds max_len {}",
                xt.len(),
                self.shape.max_len
            ));
        }
        if let Some(&bad) = xt.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return invalid(format!("token id {bad} outside the vocabulary"));
        }
        Ok(())
    }

    /// Mean embedding of unmasked positions and the number of such positions.
    fn context(&self, xt: &[u32], mask_id: u32) -> (Vec<f64>, usize) {
        let Shape { d, .. } = self.shape;
        let o = self.shape.offsets();
        let mut ctx = vec![0.0; d];
        let mut count = 0;
        for &tok in xt {
            if tok != mask_id {
                let e = &self.params[o.tok + tok as usize * d..][..d];
                for (c, x) in ctx.iter_mut().zip(e) {
                    *c += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            ctx.iter_mut().for_each(|c| *c *= inv);
        }
        (ctx, count)
    }

    /// Forward pass for the listed positions only.
    fn forward(&self, xt: &[u32], positions: &[usize], mask_id: u32) -> Forward {
        let Shape { vocab, d, h, .. } = self.shape;
        let o = self.shape.offsets();
        let p = &self.params;
        let (ctx, ctx_count) = self.context(xt, mask_id);
        let n = positions.len();
        let mut z = vec![0.0; n * 2 * d];
        let mut hidden = vec![0.0; n * h];
        let mut log_probs = vec![0.0; n * vocab];
        for (r, &i) in positions.iter().enumerate() {
            let zi = &mut z[r * 2 * d..][..2 * d];
            let e = &p[o.tok + xt[i] as usize * d..][..d];
            let pe = &p[o.pos + i * d..][..d];
            for k in 0..d {
                zi[k] = e[k] + pe[k];
            }
            zi[d..].copy_from_slice(&ctx);

            let hi = &mut hidden[r * h..][..h];
            hi.copy_from_slice(&p[o.b1..o.b1 + h]);
            for (k, &zk) in zi.iter().enumerate() {
                let row = &p[o.w1 + k * h..][..h];
                for (acc, w) in hi.iter_mut().zip(row) {
                    *acc += zk * w;
                }
            }
            hi.iter_mut().for_each(|x| *x = x.tanh());

            let lp = &mut log_probs[r * vocab..][..vocab];
            lp.copy_from_slice(&p[o.b2..o.b2 + vocab]);
            for (k, &hk) in hi.iter().enumerate() {
                let row = &p[o.w2 + k * vocab..][..vocab];
                for (acc, w) in lp.iter_mut().zip(row) {
                    *acc += hk * w;
                }
            }
            let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lp.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lp.iter_mut().for_each(|x| *x -= lse);
        }
        Forward { z, hidden, log_probs, ctx_count }
    }

    /// Row-major `[len × vocab]` log-probabilities for every position of `xt`.
    pub fn log_probs(&self, xt: &[u32], mask_id: u32) -> Result<Vec<f64>> {
        self.check_input(xt)?;
        let all: Vec<usize> = (0..xt.len()).collect();
        Ok(self.forward(xt, &all, mask_id).log_probs)
    }

    /// The masked-token loss `-(1/(P t)) Σ_masked w_i log p(x0(i) | x_t)`.
    pub fn loss(&self, x0: &TokenSeq, pattern: &MaskPattern, vocab: &Vocab) -> Result<f64> {
        let (nll, _) = self.eval(x0, pattern, vocab, false)?;
        Ok(nll)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        x0: &TokenSeq,
        pattern: &MaskPattern,
        vocab: &Vocab,
    ) -> Result<(f64, Gradients)> {
        let (loss, grad) = self.eval(x0, pattern, vocab, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn eval(
        &self,
        x0: &TokenSeq,
        pattern: &MaskPattern,
        vocab: &Vocab,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        if !(pattern.t > 0.0) {
            return invalid(format!("masking rate must be positive, got {}", pattern.t));
        }
        if pattern.masked.is_empty() {
            let g = want_grad.then(|| vec![0.0; self.params.len()]);
            return Ok((0.0, g));
        }
        let xt = pattern.apply(x0, vocab);
        self.check_input(&xt)?;
        let norm = 1.0 / (pattern.eligible_count as f64 * pattern.t);
        let fw = self.forward(&xt, &pattern.masked, vocab.mask_id);
        let Shape { vocab: nv, d, h, .. } = self.shape;

        let mut loss = 0.0;
        for (r, &i) in pattern.masked.iter().enumerate() {
            loss -= pattern.token_weights[r] * fw.log_probs[r * nv + x0.tokens[i] as usize];
        }
        loss *= norm;
        if !want_grad {
            return Ok((loss, None));
        }

        let o = self.shape.offsets();
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let mut dctx = vec![0.0; d];
        let mut dlogit = vec![0.0; nv];
        let mut dh = vec![0.0; h];
        let mut dz = vec![0.0; 2 * d];
        for (r, &i) in pattern.masked.iter().enumerate() {
            let coef = norm * pattern.token_weights[r];
            let lp = &fw.log_probs[r * nv..][..nv];
            for (dl, &l) in dlogit.iter_mut().zip(lp) {
                *dl = coef * l.exp();
            }
            dlogit[x0.tokens[i] as usize] -= coef;

            let hi = &fw.hidden[r * h..][..h];
            for (k, &hk) in hi.iter().enumerate() {
                let grow = &mut g[o.w2 + k * nv..][..nv];
                for (gw, &dl) in grow.iter_mut().zip(&dlogit) {
                    *gw += hk * dl;
                }
                let prow = &p[o.w2 + k * nv..][..nv];
                let s: f64 = prow.iter().zip(&dlogit).map(|(w, dl)| w * dl).sum();
                dh[k] = s * (1.0 - hk * hk);
            }
            for (gb, &dl) in g[o.b2..o.b2 + nv].iter_mut().zip(&dlogit) {
                *gb += dl;
            }

            let zi = &fw.z[r * 2 * d..][..2 * d];
            for (k, &zk) in zi.iter().enumerate() {
                let grow = &mut g[o.w1 + k * h..][..h];
                for (gw, &da) in grow.iter_mut().zip(&dh) {
                    *gw += zk * da;
                }
                let prow = &p[o.w1 + k * h..][..h];
                dz[k] = prow.iter().zip(&dh).map(|(w, da)| w * da).sum();
            }
            for (gb, &da) in g[o.b1..o.b1 + h].iter_mut().zip(&dh) {
                *gb += da;
            }

            let te = o.tok + xt[i] as usize * d;
            let pe = o.pos + i * d;
            for k in 0..d {
                g[te + k] += dz[k];
                g[pe + k] += dz[k];
                dctx[k] += dz[d + k];
            }
        }
        if fw.ctx_count > 0 {
            let inv = 1.0 / fw.ctx_count as f64;
            for &tok in &xt {
                if tok != vocab.mask_id {
                    let te = o.tok + tok as usize * d;
                    for k in 0..d {
                        g[te + k] += dctx[k] * inv;
                    }
                }
            }
        }
        Ok((loss, Some(g)))
    }

    /// `params - lr * grad`, in place.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return invalid(format!("learning rate must be non-negative, got {lr}"));
        }
        if grad.len() != self.params.len() {
            return invalid("gradient length does not match parameters");
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Numerical("non-finite gradient".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Write a checkpoint: magic, header length, JSON shape header, then
    /// little-endian f64 values.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.shape)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in &self.params {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return invalid("not a denoiser checkpoint");
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let shape: Shape = serde_json::from_slice(&header)?;
        let mut params = Vec::with_capacity(shape.num_params());
        let mut buf = [0u8; 8];
        for _ in 0..shape.num_params() {
            input.read_exact(&mut buf)?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(LabError::Numerical("checkpoint holds a non-finite value".into()));
            }
            params.push(v);
        }
        Ok(Self { shape, params })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VLDNOIS1";
