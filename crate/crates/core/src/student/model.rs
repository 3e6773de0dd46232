//! Dual-head causal transformer over a flat parameter buffer. Parameters are
//! stored f32 (the checkpoint format) while all forward/backward arithmetic
//! runs in f64, with explicit activation caches for the hand-written
//! backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StudentConfig, StudentError};
use crate::scene::{DecisionDistribution, N_ACTIONS};

pub const KL_EPSILON: f64 = 1e-8;
const LN_EPSILON: f64 = 1e-5;

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean negative log-likelihood of each next token over the masked positions.
pub fn lm_loss(
    lm_logits: &[Vec<f64>],
    tokens: &[u32],
    lm_mask: &[usize],
) -> Result<f64, StudentError> {
    if lm_mask.is_empty() {
        return Err(StudentError::EmptyMask);
    }
    let mut total = 0.0;
    for &m in lm_mask {
        assert!(m + 1 < tokens.len(), "mask position {m} has no next token");
        let probs = softmax(&lm_logits[m]);
        total -= probs[tokens[m + 1] as usize].ln();
    }
    Ok(total / lm_mask.len() as f64)
}

/// KL(target || predicted) with the predicted entries floored at
/// [`KL_EPSILON`]; zero-probability target entries contribute nothing and the
/// result is clamped at zero.
pub fn dpp_loss(predicted: &DecisionDistribution, target: &DecisionDistribution) -> f64 {
    let mut kl = 0.0;
    for (&t, &p) in target.probs().iter().zip(predicted.probs()) {
        if t > 0.0 {
            kl += t * (t.ln() - p.max(KL_EPSILON).ln());
        }
    }
    kl.max(0.0)
}

pub fn total_loss(lm: f64, dpp: f64, lambda: f64) -> f64 {
    lm + lambda * dpp
}

/// Flat-buffer offsets for every tensor, in checkpoint declaration order.
#[derive(Debug, Clone)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub lm_w: usize,
    pub lm_b: usize,
    pub cls_w1: usize,
    pub cls_b1: usize,
    pub cls_w2: usize,
    pub cls_b2: usize,
    pub total: usize,
}

fn build_offsets(cfg: &StudentConfig, vocab: usize) -> Offsets {
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let c = cfg.classifier_hidden;
    let a = cfg.n_actions;
    let mut next = 0usize;
    let mut alloc = |len: usize| {
        let at = next;
        next += len;
        at
    };
    let tok_emb = alloc(vocab * d);
    let pos_emb = alloc(cfg.max_seq_len * d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerOffsets {
            ln1_g: alloc(d),
            ln1_b: alloc(d),
            wq: alloc(d * d),
            bq: alloc(d),
            wk: alloc(d * d),
            bk: alloc(d),
            wv: alloc(d * d),
            bv: alloc(d),
            wo: alloc(d * d),
            bo: alloc(d),
            ln2_g: alloc(d),
            ln2_b: alloc(d),
            w1: alloc(d * f),
            b1: alloc(f),
            w2: alloc(f * d),
            b2: alloc(d),
        })
        .collect();
    let lnf_g = alloc(d);
    let lnf_b = alloc(d);
    let lm_w = alloc(d * vocab);
    let lm_b = alloc(vocab);
    let cls_w1 = alloc(d * c);
    let cls_b1 = alloc(c);
    let cls_w2 = alloc(c * a);
    let cls_b2 = alloc(a);
    Offsets {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        lm_w,
        lm_b,
        cls_w1,
        cls_b1,
        cls_w2,
        cls_b2,
        total: next,
    }
}

/// Per-position logits and hidden states from one forward pass, plus the
/// decision logits read at the prompt-termination position.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub lm_logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub decision_logits: Vec<f64>,
}

impl ForwardOutput {
    pub fn decision_probs(&self) -> DecisionDistribution {
        let probs = softmax(&self.decision_logits);
        let arr: [f64; N_ACTIONS] = probs.as_slice().try_into().expect("ten actions");
        DecisionDistribution::from_probs(arr).expect("softmax output is normalized")
    }
}

struct LnCache {
    /// Normalized pre-scale activations, M x d.
    xhat: Vec<f64>,
    /// Reciprocal standard deviation per position.
    rstd: Vec<f64>,
    /// Post-scale output, M x d.
    out: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Causal attention weights, head-major: H x M x M.
    probs: Vec<f64>,
    /// Concatenated head outputs before the output projection, M x d.
    ctx: Vec<f64>,
    ln2: LnCache,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
}

pub(super) struct Cache {
    m: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    lm_logits: Vec<f64>,
    cls_hidden_pre: Vec<f64>,
    cls_hidden: Vec<f64>,
    pub decision_logits: Vec<f64>,
    pub decision_probs: Vec<f64>,
}

/// The transformer itself: configuration, vocabulary size, flat parameters.
pub struct Model {
    pub config: StudentConfig,
    pub vocab: usize,
    pub offsets: Offsets,
    pub params: Vec<f32>,
}

fn fill_uniform(rng: &mut ChaCha8Rng, slice: &mut [f32], bound: f64) {
    for v in slice {
        *v = rng.gen_range(-bound..bound) as f32;
    }
}

impl Model {
    pub fn new(config: StudentConfig, vocab: usize) -> Result<Model, StudentError> {
        config.validate()?;
        let offsets = build_offsets(&config, vocab);
        let mut model =
            Model { params: vec![0.0; offsets.total], config, vocab, offsets };
        model.init_params();
        Ok(model)
    }

    /// Default initialization: Xavier-style bounds for projections, ones for
    /// norm gains, zeros for biases and for the classifier output layer (so
    /// the untrained decision distribution is exactly uniform).
    fn init_params(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let d = self.config.embed_dim;
        let f = self.config.ffn_dim;
        let c = self.config.classifier_hidden;
        let v = self.vocab;
        let o = self.offsets.clone();
        let p = &mut self.params;
        fill_uniform(&mut rng, &mut p[o.tok_emb..o.tok_emb + v * d], 0.08);
        fill_uniform(&mut rng, &mut p[o.pos_emb..o.pos_emb + self.config.max_seq_len * d], 0.08);
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        for l in &o.layers {
            for g in [l.ln1_g, l.ln2_g] {
                p[g..g + d].fill(1.0);
            }
            for w in [l.wq, l.wk, l.wv, l.wo] {
                fill_uniform(&mut rng, &mut p[w..w + d * d], xavier(d, d));
            }
            fill_uniform(&mut rng, &mut p[l.w1..l.w1 + d * f], xavier(d, f));
            fill_uniform(&mut rng, &mut p[l.w2..l.w2 + f * d], xavier(f, d));
        }
        p[o.lnf_g..o.lnf_g + d].fill(1.0);
        fill_uniform(&mut rng, &mut p[o.lm_w..o.lm_w + d * v], xavier(d, v));
        fill_uniform(&mut rng, &mut p[o.cls_w1..o.cls_w1 + d * c], xavier(d, c));
        // cls_w2, cls_b2 stay zero.
    }

    /// Randomize every parameter, classifier output included; used by the
    /// gradient checker so no path has a degenerate zero gradient.
    pub fn randomize_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = self.offsets.clone();
        let d = self.config.embed_dim;
        for i in 0..self.params.len() {
            self.params[i] = rng.gen_range(-0.1..0.1);
        }
        for l in &o.layers {
            for g in [l.ln1_g, l.ln2_g] {
                for i in 0..d {
                    self.params[g + i] = rng.gen_range(0.9..1.1);
                }
            }
        }
        for i in 0..d {
            self.params[o.lnf_g + i] = rng.gen_range(0.9..1.1);
        }
    }

    fn p64(&self, at: usize) -> f64 {
        self.params[at] as f64
    }

    /// y = x W + b, shapes M x din, din x dout.
    fn linear(&self, x: &[f64], m: usize, din: usize, dout: usize, w: usize, b: usize, out: &mut [f64]) {
        let wslice = &self.params[w..w + din * dout];
        let bslice = &self.params[b..b + dout];
        for row in 0..m {
            let xr = &x[row * din..row * din + din];
            let or = &mut out[row * dout..row * dout + dout];
            for (o, bo) in or.iter_mut().zip(bslice) {
                *o = *bo as f64;
            }
            for (i, &xi) in xr.iter().enumerate() {
                let wrow = &wslice[i * dout..i * dout + dout];
                for (o, &wv) in or.iter_mut().zip(wrow) {
                    *o += xi * wv as f64;
                }
            }
        }
    }

    fn layer_norm(&self, x: &[f64], m: usize, d: usize, g: usize, b: usize) -> LnCache {
        let gs = &self.params[g..g + d];
        let bs = &self.params[b..b + d];
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for row in 0..m {
            let xr = &x[row * d..row * d + d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPSILON).sqrt();
            rstd[row] = r;
            for i in 0..d {
                let h = (xr[i] - mean) * r;
                xhat[row * d + i] = h;
                out[row * d + i] = h * gs[i] as f64 + bs[i] as f64;
            }
        }
        LnCache { xhat, rstd, out }
    }

    /// Full forward pass with caches kept for backward.
    pub(super) fn forward_cached(
        &self,
        tokens: &[u32],
        m_star: usize,
    ) -> Result<Cache, StudentError> {
        let m = tokens.len();
        if m == 0 || m > self.config.max_seq_len {
            return Err(StudentError::SequenceTooLong { len: m, max: self.config.max_seq_len });
        }
        assert!(m_star < m, "termination position inside the sequence");
        let d = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let f = self.config.ffn_dim;
        let o = &self.offsets;

        let mut x = vec![0.0f64; m * d];
        for (row, &t) in tokens.iter().enumerate() {
            assert!((t as usize) < self.vocab, "token id {t} beyond vocabulary");
            let te = o.tok_emb + t as usize * d;
            let pe = o.pos_emb + row * d;
            for i in 0..d {
                x[row * d + i] = self.p64(te + i) + self.p64(pe + i);
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut layer_caches = Vec::with_capacity(self.config.n_layers);
        for l in &o.layers {
            let ln1 = self.layer_norm(&x, m, d, l.ln1_g, l.ln1_b);
            let mut q = vec![0.0; m * d];
            let mut k = vec![0.0; m * d];
            let mut v = vec![0.0; m * d];
            self.linear(&ln1.out, m, d, d, l.wq, l.bq, &mut q);
            self.linear(&ln1.out, m, d, d, l.wk, l.bk, &mut k);
            self.linear(&ln1.out, m, d, d, l.wv, l.bv, &mut v);

            let mut probs = vec![0.0; heads * m * m];
            let mut ctx = vec![0.0; m * d];
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..m {
                    let qi = &q[i * d + hoff..i * d + hoff + dh];
                    let mut row = vec![0.0; i + 1];
                    for (j, rj) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + hoff..j * d + hoff + dh];
                        *rj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<f64>() * scale;
                    }
                    let soft = softmax(&row);
                    let prow = &mut probs[h * m * m + i * m..h * m * m + i * m + i + 1];
                    prow.copy_from_slice(&soft);
                    let ci = &mut ctx[i * d + hoff..i * d + hoff + dh];
                    for (j, &pj) in soft.iter().enumerate() {
                        let vj = &v[j * d + hoff..j * d + hoff + dh];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += pj * vv;
                        }
                    }
                }
            }

            let mut attn_out = vec![0.0; m * d];
            self.linear(&ctx, m, d, d, l.wo, l.bo, &mut attn_out);
            for i in 0..m * d {
                x[i] += attn_out[i];
            }

            let ln2 = self.layer_norm(&x, m, d, l.ln2_g, l.ln2_b);
            let mut ffn_pre = vec![0.0; m * f];
            self.linear(&ln2.out, m, d, f, l.w1, l.b1, &mut ffn_pre);
            let ffn_act: Vec<f64> = ffn_pre.iter().map(|&v| v.max(0.0)).collect();
            let mut ffn_out = vec![0.0; m * d];
            self.linear(&ffn_act, m, f, d, l.w2, l.b2, &mut ffn_out);
            for i in 0..m * d {
                x[i] += ffn_out[i];
            }

            layer_caches.push(LayerCache { ln1, q, k, v, probs, ctx, ln2, ffn_pre, ffn_act });
        }

        let lnf = self.layer_norm(&x, m, d, o.lnf_g, o.lnf_b);
        let mut lm_logits = vec![0.0; m * self.vocab];
        self.linear(&lnf.out, m, d, self.vocab, o.lm_w, o.lm_b, &mut lm_logits);

        let c = self.config.classifier_hidden;
        let h_star = &lnf.out[m_star * d..m_star * d + d];
        let mut cls_hidden_pre = vec![0.0; c];
        self.linear(h_star, 1, d, c, o.cls_w1, o.cls_b1, &mut cls_hidden_pre);
        let cls_hidden: Vec<f64> = cls_hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut decision_logits = vec![0.0; self.config.n_actions];
        self.linear(&cls_hidden, 1, c, self.config.n_actions, o.cls_w2, o.cls_b2, &mut decision_logits);
        let decision_probs = softmax(&decision_logits);

        Ok(Cache {
            m,
            layers: layer_caches,
            lnf,
            lm_logits,
            cls_hidden_pre,
            cls_hidden,
            decision_logits,
            decision_probs,
        })
    }

    /// Public forward: structured logits, hidden states, decision logits.
    pub fn forward(&self, tokens: &[u32], m_star: usize) -> Result<ForwardOutput, StudentError> {
        let cache = self.forward_cached(tokens, m_star)?;
        let d = self.config.embed_dim;
        let v = self.vocab;
        let lm_logits = (0..cache.m)
            .map(|row| cache.lm_logits[row * v..row * v + v].to_vec())
            .collect();
        let hidden = (0..cache.m)
            .map(|row| cache.lnf.out[row * d..row * d + d].to_vec())
            .collect();
        Ok(ForwardOutput { lm_logits, hidden, decision_logits: cache.decision_logits.clone() })
    }

    fn ln_backward(
        &self,
        dout: &[f64],
        cache: &LnCache,
        m: usize,
        d: usize,
        g_at: usize,
        grads: &mut [f64],
        b_at: usize,
        dx: &mut [f64],
    ) {
        let gs = &self.params[g_at..g_at + d];
        for row in 0..m {
            let do_row = &dout[row * d..row * d + d];
            let xhat = &cache.xhat[row * d..row * d + d];
            let r = cache.rstd[row];
            let mut dxhat = vec![0.0; d];
            for i in 0..d {
                dxhat[i] = do_row[i] * gs[i] as f64;
                grads[g_at + i] += do_row[i] * xhat[i];
                grads[b_at + i] += do_row[i];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat =
                dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
            for i in 0..d {
                dx[row * d + i] += (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) * r;
            }
        }
    }

    fn linear_backward(
        &self,
        x: &[f64],
        dout: &[f64],
        m: usize,
        din: usize,
        dout_dim: usize,
        w_at: usize,
        b_at: usize,
        grads: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let w = &self.params[w_at..w_at + din * dout_dim];
        for row in 0..m {
            let dor = &dout[row * dout_dim..row * dout_dim + dout_dim];
            let xr = &x[row * din..row * din + din];
            for (o, &dv) in dor.iter().enumerate() {
                grads[b_at + o] += dv;
            }
            for (i, &xi) in xr.iter().enumerate() {
                let gw = &mut grads[w_at + i * dout_dim..w_at + (i + 1) * dout_dim];
                for (g, &dv) in gw.iter_mut().zip(dor) {
                    *g += xi * dv;
                }
            }
        }
        if let Some(dx) = dx {
            for row in 0..m {
                let dor = &dout[row * dout_dim..row * dout_dim + dout_dim];
                let dxr = &mut dx[row * din..row * din + din];
                for i in 0..din {
                    let wrow = &w[i * dout_dim..i * dout_dim + dout_dim];
                    let mut acc = 0.0;
                    for (j, &dv) in dor.iter().enumerate() {
                        acc += dv * wrow[j] as f64;
                    }
                    dxr[i] += acc;
                }
            }
        }
    }

    /// Backward pass for total_loss = lm + lambda * dpp. Gradients accumulate
    /// into `grads`, which must have the flat parameter length. Returns
    /// (lm, dpp) loss values.
    pub(super) fn backward(
        &self,
        tokens: &[u32],
        m_star: usize,
        lm_mask: &[usize],
        target: &[f64; N_ACTIONS],
        lambda: f64,
        cache: &Cache,
        grads: &mut [f64],
    ) -> Result<(f64, f64), StudentError> {
        if lm_mask.is_empty() {
            return Err(StudentError::EmptyMask);
        }
        let m = cache.m;
        let d = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let f = self.config.ffn_dim;
        let c = self.config.classifier_hidden;
        let v = self.vocab;
        let o = &self.offsets;

        // LM head: mean cross-entropy over the mask.
        let inv = 1.0 / lm_mask.len() as f64;
        let mut in_mask = vec![false; m];
        for &pos in lm_mask {
            assert!(pos + 1 < m, "mask position {pos} has no next token");
            in_mask[pos] = true;
        }
        let mut lm = 0.0;
        let mut dlm_logits = vec![0.0; m * v];
        for row in 0..m {
            if !in_mask[row] {
                continue;
            }
            let probs = softmax(&cache.lm_logits[row * v..row * v + v]);
            let tgt = tokens[row + 1] as usize;
            lm -= probs[tgt].ln() * inv;
            let drow = &mut dlm_logits[row * v..row * v + v];
            for (dv, &p) in drow.iter_mut().zip(&probs) {
                *dv = p * inv;
            }
            drow[tgt] -= inv;
        }

        // Decision head: KL(target || floored softmax).
        let probs = &cache.decision_probs;
        let mut kl = 0.0;
        for (i, &t) in target.iter().enumerate() {
            if t > 0.0 {
                kl += t * (t.ln() - probs[i].max(KL_EPSILON).ln());
            }
        }
        let mut ddec = vec![0.0; self.config.n_actions];
        if kl > 0.0 {
            let u: Vec<f64> = target
                .iter()
                .zip(probs)
                .map(|(&t, &p)| if p > KL_EPSILON { -t / p } else { 0.0 })
                .collect();
            let s: f64 = probs.iter().zip(&u).map(|(&p, &uu)| p * uu).sum();
            for i in 0..self.config.n_actions {
                ddec[i] = lambda * probs[i] * (u[i] - s);
            }
        }
        let kl = kl.max(0.0);

        // Backward through both heads into dh (gradient on final hidden).
        let mut dhidden = vec![0.0; m * d];
        self.linear_backward(
            &cache.lnf.out,
            &dlm_logits,
            m,
            d,
            v,
            o.lm_w,
            o.lm_b,
            grads,
            Some(&mut dhidden),
        );

        let mut dcls_hidden = vec![0.0; c];
        self.linear_backward(
            &cache.cls_hidden,
            &ddec,
            1,
            c,
            self.config.n_actions,
            o.cls_w2,
            o.cls_b2,
            grads,
            Some(&mut dcls_hidden),
        );
        let dcls_pre: Vec<f64> = dcls_hidden
            .iter()
            .zip(&cache.cls_hidden_pre)
            .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
            .collect();
        let h_star = &cache.lnf.out[m_star * d..m_star * d + d];
        let mut dh_star = vec![0.0; d];
        self.linear_backward(
            h_star,
            &dcls_pre,
            1,
            d,
            c,
            o.cls_w1,
            o.cls_b1,
            grads,
            Some(&mut dh_star),
        );
        for i in 0..d {
            dhidden[m_star * d + i] += dh_star[i];
        }

        // Final norm; its backward needs only the cached xhat/rstd.
        let mut dx = vec![0.0; m * d];
        self.ln_backward(&dhidden, &cache.lnf, m, d, o.lnf_g, grads, o.lnf_b, &mut dx);

        // Layers in reverse.
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, lc) in o.layers.iter().zip(&cache.layers).rev() {
            // FFN branch: x = x_after_attn + W2 relu(W1 ln2(x_after_attn)).
            let dffn_out = dx.clone();
            let mut dffn_act = vec![0.0; m * f];
            self.linear_backward(
                &lc.ffn_act,
                &dffn_out,
                m,
                f,
                d,
                l.w2,
                l.b2,
                grads,
                Some(&mut dffn_act),
            );
            let dffn_pre: Vec<f64> = dffn_act
                .iter()
                .zip(&lc.ffn_pre)
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
            let mut dln2_out = vec![0.0; m * d];
            self.linear_backward(
                &lc.ln2.out,
                &dffn_pre,
                m,
                d,
                f,
                l.w1,
                l.b1,
                grads,
                Some(&mut dln2_out),
            );
            self.ln_backward(&dln2_out, &lc.ln2, m, d, l.ln2_g, grads, l.ln2_b, &mut dx);

            // Attention branch: x_after_attn = x_in + Wo ctx.
            let dattn_stream = dx.clone();
            let mut dctx = vec![0.0; m * d];
            self.linear_backward(
                &lc.ctx,
                &dattn_stream,
                m,
                d,
                d,
                l.wo,
                l.bo,
                grads,
                Some(&mut dctx),
            );

            let mut dq = vec![0.0; m * d];
            let mut dk = vec![0.0; m * d];
            let mut dv = vec![0.0; m * d];
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..m {
                    let prow = &lc.probs[h * m * m + i * m..h * m * m + i * m + i + 1];
                    let dctx_i = &dctx[i * d + hoff..i * d + hoff + dh];
                    // dprobs and dV.
                    let mut dprow = vec![0.0; i + 1];
                    for j in 0..=i {
                        let vj = &lc.v[j * d + hoff..j * d + hoff + dh];
                        let mut acc = 0.0;
                        for (t, &dc) in dctx_i.iter().enumerate() {
                            acc += dc * vj[t];
                        }
                        dprow[j] = acc;
                        let dvj = &mut dv[j * d + hoff..j * d + hoff + dh];
                        let p = prow[j];
                        for (t, &dc) in dctx_i.iter().enumerate() {
                            dvj[t] += p * dc;
                        }
                    }
                    // Softmax backward to scores.
                    let dot: f64 = prow.iter().zip(&dprow).map(|(&p, &g)| p * g).sum();
                    let qi = &lc.q[i * d + hoff..i * d + hoff + dh];
                    let dqi = &mut dq[i * d + hoff..i * d + hoff + dh];
                    for j in 0..=i {
                        let dscore = prow[j] * (dprow[j] - dot) * scale;
                        if dscore == 0.0 {
                            continue;
                        }
                        let kj = &lc.k[j * d + hoff..j * d + hoff + dh];
                        for t in 0..dh {
                            dqi[t] += dscore * kj[t];
                        }
                        let dkj = &mut dk[j * d + hoff..j * d + hoff + dh];
                        for t in 0..dh {
                            dkj[t] += dscore * qi[t];
                        }
                    }
                }
            }

            let mut dln1_out = vec![0.0; m * d];
            self.linear_backward(&lc.ln1.out, &dq, m, d, d, l.wq, l.bq, grads, Some(&mut dln1_out));
            self.linear_backward(&lc.ln1.out, &dk, m, d, d, l.wk, l.bk, grads, Some(&mut dln1_out));
            self.linear_backward(&lc.ln1.out, &dv, m, d, d, l.wv, l.bv, grads, Some(&mut dln1_out));
            self.ln_backward(&dln1_out, &lc.ln1, m, d, l.ln1_g, grads, l.ln1_b, &mut dx);
        }

        // Embeddings.
        for (row, &t) in tokens.iter().enumerate() {
            let te = o.tok_emb + t as usize * d;
            let pe = o.pos_emb + row * d;
            for i in 0..d {
                grads[te + i] += dx[row * d + i];
                grads[pe + i] += dx[row * d + i];
            }
        }
        Ok((lm, kl))
    }

    /// One SGD step: w -= lr * g, elementwise over the flat buffer.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) {
        for (w, &g) in self.params.iter_mut().zip(grads) {
            *w = (*w as f64 - lr * g) as f32;
        }
    }
}
