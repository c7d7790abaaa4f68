use super::{layer_idx, Model, ModelError, ProbeCapture, Result, RMS_EPS};
use crate::linalg::{gemm, Matrix, Real, Strided};

/// `φ(z) = max(0, z)²`.
#[inline]
pub fn squared_relu<T: Real>(z: T) -> T {
    if z > T::zero() {
        z * z
    } else {
        T::zero()
    }
}

/// Logits plus the mean next-token cross-entropy when targets were given.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real> {
    /// `(batch·seq)×vocab`, row `b·seq + t`.
    pub logits: Matrix<T>,
    pub loss: Option<f64>,
}

/// Query rows per causal attention block.
const QUERY_BLOCK: usize = 32;

struct RmsCache<T> {
    xhat: Vec<T>,
    inv: Vec<T>,
}

fn rmsnorm_fwd<T: Real>(x: &[T], width: usize, gain: Option<&[T]>) -> (Vec<T>, RmsCache<T>) {
    let rows = x.len() / width;
    let eps = T::lit(RMS_EPS);
    let wn = T::lit(width as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / wn;
        let s = T::one() / (ms + eps).sqrt();
        inv[r] = s;
        for (o, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = v * s;
        }
    }
    let out = match gain {
        Some(g) => {
            let mut out = xhat.clone();
            for row in out.chunks_mut(width) {
                row.iter_mut().zip(g).for_each(|(a, &b)| *a *= b);
            }
            out
        }
        None => xhat.clone(),
    };
    (out, RmsCache { xhat, inv })
}

fn rmsnorm_bwd<T: Real>(dy: &[T], cache: &RmsCache<T>, width: usize, gain: Option<&[T]>, dgain: Option<&mut [T]>) -> Vec<T> {
    let rows = dy.len() / width;
    let wn = T::lit(width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut u = vec![T::zero(); width];
    let mut dgain = dgain;
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        match gain {
            Some(g) => u.iter_mut().zip(dyr.iter().zip(g)).for_each(|(o, (&a, &b))| *o = a * b),
            None => u.copy_from_slice(dyr),
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for ((o, &a), &b) in dg.iter_mut().zip(dyr).zip(xh) {
                *o += a * b;
            }
        }
        let mean = u.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / wn;
        let s = cache.inv[r];
        for ((o, &ui), &xi) in dx[r * width..(r + 1) * width].iter_mut().zip(&u).zip(xh) {
            *o = s * (ui - xi * mean);
        }
    }
    dx
}

/// `y = x·Wᵀ` for `x: rows×in`, `W: out×in`.
fn linear_fwd<T: Real>(x: &[T], rows: usize, w: &Matrix<T>) -> Vec<T> {
    let (out, inp) = w.shape();
    let mut y = vec![T::zero(); rows * out];
    gemm(rows, inp, out, T::one(), Strided::rows(x, inp), w.as_strided_t(), T::zero(), &mut y, out);
    y
}

/// Returns `dx = dy·W` and writes `dW = dyᵀ·x`.
fn linear_bwd<T: Real>(dy: &[T], x: &[T], rows: usize, w: &Matrix<T>, dw: &mut Matrix<T>) -> Vec<T> {
    let (out, inp) = w.shape();
    gemm(out, rows, inp, T::one(), Strided::transposed(dy, out), Strided::rows(x, inp), T::zero(), dw.data_mut(), inp);
    let mut dx = vec![T::zero(); rows * inp];
    gemm(rows, out, inp, T::one(), Strided::rows(dy, out), w.as_strided(), T::zero(), &mut dx, inp);
    dx
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

fn all_finite<T: Real>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Real> Rope<T> {
    fn new(seq: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for t in 0..seq {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = t as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }
}

struct AttnCache<T> {
    input: Vec<T>,
    qhat: Vec<T>,
    khat: Vec<T>,
    v: Vec<T>,
    qnorm: RmsCache<T>,
    knorm: RmsCache<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

struct LayerCache<T> {
    attn: AttnCache<T>,
    norm1: RmsCache<T>,
    norm2: RmsCache<T>,
    ffn_in: Vec<T>,
    z: Vec<T>,
    a: Vec<T>,
}

struct Cache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    final_norm: RmsCache<T>,
    final_out: Vec<T>,
    dlogits: Vec<T>,
}

struct Dims {
    batch: usize,
    seq: usize,
    rows: usize,
    d: usize,
    heads: usize,
    hd: usize,
    vocab: usize,
}

impl<T: Real> Model<T> {
    fn dims(&self, tokens: &[u32], batch: usize) -> Result<Dims> {
        let cfg = self.config();
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(ModelError::BadBatch { len: tokens.len(), batch });
        }
        let seq = tokens.len() / batch;
        if seq > cfg.seq_len {
            return Err(ModelError::SequenceTooLong { len: seq, max: cfg.seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
        Ok(Dims {
            batch,
            seq,
            rows: tokens.len(),
            d: cfg.d_model,
            heads: cfg.n_heads,
            hd: cfg.head_dim(),
            vocab: cfg.vocab_size,
        })
    }

    /// Logits for a flat batch of `batch` equal-length sequences. When a
    /// capture is supplied, every position's FFN pre-activation `z` and
    /// post-activation `φ(z)` is folded into it.
    pub fn forward(&self, tokens: &[u32], batch: usize, capture: Option<&mut ProbeCapture>) -> Result<Matrix<T>> {
        Ok(self.run(tokens, None, batch, capture, false)?.0.logits)
    }

    /// Mean next-token cross-entropy; `targets[i]` is the token following
    /// `tokens[i]`.
    pub fn loss(&self, tokens: &[u32], targets: &[u32], batch: usize, capture: Option<&mut ProbeCapture>) -> Result<f64> {
        let (out, _) = self.run(tokens, Some(targets), batch, capture, false)?;
        Ok(out.loss.expect("targets supplied"))
    }

    /// Loss and gradients for every parameter, in declaration order.
    pub fn loss_and_grads(&self, tokens: &[u32], targets: &[u32], batch: usize) -> Result<(f64, Vec<Matrix<T>>)> {
        let (out, cache) = self.run(tokens, Some(targets), batch, None, true)?;
        let cache = cache.expect("cache kept");
        let grads = self.backward(&cache, batch)?;
        Ok((out.loss.expect("targets supplied"), grads))
    }

    fn run(
        &self,
        tokens: &[u32],
        targets: Option<&[u32]>,
        batch: usize,
        mut capture: Option<&mut ProbeCapture>,
        keep: bool,
    ) -> Result<(ForwardOutput<T>, Option<Cache<T>>)> {
        let dm = self.dims(tokens, batch)?;
        if let Some(t) = targets {
            if t.len() != tokens.len() {
                return Err(ModelError::BadBatch { len: t.len(), batch });
            }
            self.dims(t, batch)?;
        }
        let cfg = self.config();
        let p = self.params();
        let rope = cfg.use_rope.then(|| Rope::<T>::new(dm.seq, dm.hd, cfg.rope_base));

        let emb = &p[0];
        let mut x: Vec<T> = Vec::with_capacity(dm.rows * dm.d);
        for &t in tokens {
            x.extend_from_slice(emb.row(t as usize));
        }

        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let ix = layer_idx(l);
            let post = cfg.is_postln(l);
            let g1 = p[ix.attn_norm].data();
            let g2 = p[ix.ffn_norm].data();

            let (attn_input, norm1_pre) = if post {
                (x.clone(), None)
            } else {
                let (h, c) = rmsnorm_fwd(&x, dm.d, Some(g1));
                (h, Some(c))
            };
            let (attn_out, attn_cache) = self.attention_fwd(attn_input, &dm, l, rope.as_ref());
            add_into(&mut x, &attn_out);
            drop(attn_out);
            let norm1 = match norm1_pre {
                Some(c) => c,
                None => {
                    let (h, c) = rmsnorm_fwd(&x, dm.d, Some(g1));
                    x = h;
                    c
                }
            };

            let (ffn_in, norm2_pre) = if post {
                (x.clone(), None)
            } else {
                let (h, c) = rmsnorm_fwd(&x, dm.d, Some(g2));
                (h, Some(c))
            };
            let z = linear_fwd(&ffn_in, dm.rows, &p[ix.w_in]);
            let a: Vec<T> = z.iter().map(|&v| squared_relu(v)).collect();
            if let Some(cap) = capture.as_deref_mut() {
                cap.observe(l, tokens, dm.seq, &z, &a);
            }
            let f = linear_fwd(&a, dm.rows, &p[ix.w_out]);
            add_into(&mut x, &f);
            let norm2 = match norm2_pre {
                Some(c) => c,
                None => {
                    let (h, c) = rmsnorm_fwd(&x, dm.d, Some(g2));
                    x = h;
                    c
                }
            };
            if !all_finite(&x) {
                return Err(ModelError::NonFinite { layer: l });
            }
            if keep {
                layers.push(LayerCache { attn: attn_cache, norm1, norm2, ffn_in, z, a });
            }
        }

        let nf = 1 + cfg.n_layers * 8;
        let (final_out, final_norm) = rmsnorm_fwd(&x, dm.d, Some(p[nf].data()));
        let logits = linear_fwd(&final_out, dm.rows, &p[nf + 1]);
        if !all_finite(&logits) {
            return Err(ModelError::NonFinite { layer: cfg.n_layers });
        }

        let mut loss = None;
        let mut dlogits = Vec::new();
        if let Some(targets) = targets {
            let (l, d) = cross_entropy(&logits, targets, dm.vocab, keep);
            if !l.is_finite() {
                return Err(ModelError::NonFinite { layer: cfg.n_layers });
            }
            loss = Some(l);
            dlogits = d;
        }
        let logits = Matrix::new(dm.rows, dm.vocab, logits).map_err(|_| ModelError::NonFinite { layer: cfg.n_layers })?;
        let cache = keep.then(|| Cache { tokens: tokens.to_vec(), layers, final_norm, final_out, dlogits });
        Ok((ForwardOutput { logits, loss }, cache))
    }

    fn attention_fwd(&self, input: Vec<T>, dm: &Dims, layer: usize, rope: Option<&Rope<T>>) -> (Vec<T>, AttnCache<T>) {
        let p = self.params();
        let ix = layer_idx(layer);
        let mut q = linear_fwd(&input, dm.rows, &p[ix.wq]);
        let mut k = linear_fwd(&input, dm.rows, &p[ix.wk]);
        let v = linear_fwd(&input, dm.rows, &p[ix.wv]);
        if let Some(rope) = rope {
            rope_apply(rope, &mut q, dm, false);
            rope_apply(rope, &mut k, dm, false);
        }
        let (qhat, qnorm) = rmsnorm_fwd(&q, dm.hd, None);
        let (khat, knorm) = rmsnorm_fwd(&k, dm.hd, None);
        drop((q, k));

        let (t, d, hd) = (dm.seq, dm.d, dm.hd);
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); dm.batch * dm.heads * t * t];
        let mut ctx = vec![T::zero(); dm.rows * d];
        for b in 0..dm.batch {
            for h in 0..dm.heads {
                let off = b * t * d + h * hd;
                let pb = &mut probs[(b * dm.heads + h) * t * t..(b * dm.heads + h + 1) * t * t];
                // Query blocks only touch keys up to their last row.
                for i0 in (0..t).step_by(QUERY_BLOCK) {
                    let i1 = (i0 + QUERY_BLOCK).min(t);
                    let (q_rows, scores) = (&qhat[off + i0 * d..], &mut pb[i0 * t..]);
                    gemm(i1 - i0, hd, i1, scale, Strided::rows(q_rows, d), Strided::transposed(&khat[off..], d), T::zero(), scores, t);
                    causal_softmax_rows(pb, t, i0, i1);
                    let out = &mut ctx[off + i0 * d..];
                    gemm(i1 - i0, i1, hd, T::one(), Strided::rows(&pb[i0 * t..], t), Strided::rows(&v[off..], d), T::zero(), out, d);
                }
            }
        }
        let out = linear_fwd(&ctx, dm.rows, &p[ix.wo]);
        (out, AttnCache { input, qhat, khat, v, qnorm, knorm, probs, ctx })
    }

    fn attention_bwd(&self, dout: &[T], c: &AttnCache<T>, dm: &Dims, layer: usize, rope: Option<&Rope<T>>, grads: &mut [Matrix<T>]) -> Vec<T> {
        let p = self.params();
        let ix = layer_idx(layer);
        let dctx = linear_bwd(dout, &c.ctx, dm.rows, &p[ix.wo], &mut grads[ix.wo]);

        let (t, d, hd) = (dm.seq, dm.d, dm.hd);
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut dqhat = vec![T::zero(); dm.rows * d];
        let mut dkhat = vec![T::zero(); dm.rows * d];
        let mut dv = vec![T::zero(); dm.rows * d];
        let mut dp = vec![T::zero(); t * t];
        for b in 0..dm.batch {
            for h in 0..dm.heads {
                let off = b * t * d + h * hd;
                let pb = &c.probs[(b * dm.heads + h) * t * t..(b * dm.heads + h + 1) * t * t];
                for i0 in (0..t).step_by(QUERY_BLOCK) {
                    let i1 = (i0 + QUERY_BLOCK).min(t);
                    let rows = i1 - i0;
                    let dctx_rows = Strided::rows(&dctx[off + i0 * d..], d);
                    gemm(rows, hd, i1, T::one(), dctx_rows, Strided::transposed(&c.v[off..], d), T::zero(), &mut dp[i0 * t..], t);
                    gemm(i1, rows, hd, T::one(), Strided::transposed(&pb[i0 * t..], t), dctx_rows, T::one(), &mut dv[off..], d);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), in place in dp.
                    for i in i0..i1 {
                        let row = &mut dp[i * t..i * t + i1];
                        let prow = &pb[i * t..i * t + i1];
                        let dot = row[..=i].iter().zip(&prow[..=i]).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..i1 {
                            row[j] = if j <= i { prow[j] * (row[j] - dot) } else { T::zero() };
                        }
                    }
                    let ds = &dp[i0 * t..];
                    gemm(rows, i1, hd, scale, Strided::rows(ds, t), Strided::rows(&c.khat[off..], d), T::zero(), &mut dqhat[off + i0 * d..], d);
                    let q_rows = Strided::rows(&c.qhat[off + i0 * d..], d);
                    gemm(i1, rows, hd, scale, Strided::transposed(ds, t), q_rows, T::one(), &mut dkhat[off..], d);
                }
            }
        }
        let mut dq = rmsnorm_bwd(&dqhat, &c.qnorm, hd, None, None);
        let mut dk = rmsnorm_bwd(&dkhat, &c.knorm, hd, None, None);
        if let Some(rope) = rope {
            rope_apply(rope, &mut dq, dm, true);
            rope_apply(rope, &mut dk, dm, true);
        }
        let mut dinput = linear_bwd(&dq, &c.input, dm.rows, &p[ix.wq], &mut grads[ix.wq]);
        add_into(&mut dinput, &linear_bwd(&dk, &c.input, dm.rows, &p[ix.wk], &mut grads[ix.wk]));
        add_into(&mut dinput, &linear_bwd(&dv, &c.input, dm.rows, &p[ix.wv], &mut grads[ix.wv]));
        dinput
    }

    fn backward(&self, cache: &Cache<T>, batch: usize) -> Result<Vec<Matrix<T>>> {
        let dm = self.dims(&cache.tokens, batch)?;
        let cfg = self.config();
        let p = self.params();
        let rope = cfg.use_rope.then(|| Rope::<T>::new(dm.seq, dm.hd, cfg.rope_base));
        let mut grads: Vec<Matrix<T>> = p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();

        let nf = 1 + cfg.n_layers * 8;
        let dfinal = linear_bwd(&cache.dlogits, &cache.final_out, dm.rows, &p[nf + 1], &mut grads[nf + 1]);
        let mut dx = rmsnorm_bwd(&dfinal, &cache.final_norm, dm.d, Some(p[nf].data()), Some(grads[nf].data_mut()));

        for l in (0..cfg.n_layers).rev() {
            let lc = &cache.layers[l];
            let ix = layer_idx(l);
            let post = cfg.is_postln(l);
            let g1 = p[ix.attn_norm].data();
            let g2 = p[ix.ffn_norm].data();

            // FFN sub-block.
            let dy2 = if post {
                rmsnorm_bwd(&dx, &lc.norm2, dm.d, Some(g2), Some(grads[ix.ffn_norm].data_mut()))
            } else {
                dx
            };
            let da = linear_bwd(&dy2, &lc.a, dm.rows, &p[ix.w_out], &mut grads[ix.w_out]);
            let dz: Vec<T> = da.iter().zip(&lc.z).map(|(&g, &z)| if z > T::zero() { g * T::lit(2.0) * z } else { T::zero() }).collect();
            let dffn_in = linear_bwd(&dz, &lc.ffn_in, dm.rows, &p[ix.w_in], &mut grads[ix.w_in]);
            let mut dmid = dy2;
            if post {
                add_into(&mut dmid, &dffn_in);
            } else {
                add_into(&mut dmid, &rmsnorm_bwd(&dffn_in, &lc.norm2, dm.d, Some(g2), Some(grads[ix.ffn_norm].data_mut())));
            }

            // Attention sub-block.
            let dy1 = if post {
                rmsnorm_bwd(&dmid, &lc.norm1, dm.d, Some(g1), Some(grads[ix.attn_norm].data_mut()))
            } else {
                dmid
            };
            let dattn_in = self.attention_bwd(&dy1, &lc.attn, &dm, l, rope.as_ref(), &mut grads);
            let mut din = dy1;
            if post {
                add_into(&mut din, &dattn_in);
            } else {
                add_into(&mut din, &rmsnorm_bwd(&dattn_in, &lc.norm1, dm.d, Some(g1), Some(grads[ix.attn_norm].data_mut())));
            }
            dx = din;
        }

        let demb = grads[0].data_mut();
        for (r, &t) in cache.tokens.iter().enumerate() {
            let dst = &mut demb[t as usize * dm.d..(t as usize + 1) * dm.d];
            add_into(dst, &dx[r * dm.d..(r + 1) * dm.d]);
        }
        Ok(grads)
    }
}

fn rope_apply<T: Real>(rope: &Rope<T>, x: &mut [T], dm: &Dims, inverse: bool) {
    let half = rope.half;
    for (r, row) in x.chunks_mut(dm.d).enumerate() {
        let t = r % dm.seq;
        let cos = &rope.cos[t * half..(t + 1) * half];
        let sin = &rope.sin[t * half..(t + 1) * half];
        for head in row.chunks_mut(dm.hd) {
            let (lo, hi) = head.split_at_mut(half);
            for i in 0..half {
                let (a, b) = (lo[i], hi[i]);
                if inverse {
                    lo[i] = a * cos[i] + b * sin[i];
                    hi[i] = b * cos[i] - a * sin[i];
                } else {
                    lo[i] = a * cos[i] - b * sin[i];
                    hi[i] = a * sin[i] + b * cos[i];
                }
            }
        }
    }
}

/// Row-wise softmax over `j ≤ i` for rows `i0..i1` of a `t×t` score block;
/// entries above the diagonal become zero.
fn causal_softmax_rows<T: Real>(s: &mut [T], t: usize, i0: usize, i1: usize) {
    for i in i0..i1 {
        let (live, dead) = s[i * t..(i + 1) * t].split_at_mut(i + 1);
        softmax_in_place(live);
        dead.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Max-shifted softmax; returns the log of the shifted normalizer plus the
/// shift, i.e. log-sum-exp of the input.
fn softmax_in_place<T: Real>(x: &mut [T]) -> T {
    let max = x.iter().fold(x[0], |m, &v| if v > m { v } else { m });
    x.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(x);
    let sum = x.iter().copied().sum::<T>();
    let inv = T::one() / sum;
    x.iter_mut().for_each(|v| *v *= inv);
    max + sum.ln()
}

/// Mean cross-entropy and, if requested, `∂loss/∂logits`.
fn cross_entropy<T: Real>(logits: &[T], targets: &[u32], vocab: usize, want_grad: bool) -> (f64, Vec<T>) {
    let rows = targets.len();
    let mut total = 0.0f64;
    let mut grad = if want_grad { logits.to_vec() } else { vec![T::zero(); vocab] };
    let inv_n = T::lit(1.0 / rows as f64);
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let g = if want_grad {
            &mut grad[r * vocab..(r + 1) * vocab]
        } else {
            grad.copy_from_slice(row);
            &mut grad[..]
        };
        let lse = softmax_in_place(g);
        total += (lse - row[tgt as usize]).as_f64();
        if want_grad {
            g.iter_mut().for_each(|o| *o *= inv_n);
            g[tgt as usize] -= inv_n;
        }
    }
    let grad = if want_grad { grad } else { Vec::new() };
    (total / rows as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn squared_relu_values() {
        assert_eq!(squared_relu(2.0), 4.0);
        assert_eq!(squared_relu(-1.0), 0.0);
        assert_eq!(squared_relu(0.0), 0.0);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let rope = Rope::<f64>::new(4, 4, 10_000.0);
        let dm = Dims { batch: 1, seq: 4, rows: 1, d: 4, heads: 1, hd: 4, vocab: 4 };
        let mut x = vec![0.3, -1.2, 2.5, 0.7];
        let orig = x.clone();
        rope_apply(&rope, &mut x, &dm, false);
        assert_eq!(x, orig);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let rope = Rope::<f64>::new(3, 4, 10_000.0);
        let dm = Dims { batch: 1, seq: 3, rows: 3, d: 8, heads: 2, hd: 4, vocab: 4 };
        let mut x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let orig = x.clone();
        rope_apply(&rope, &mut x, &dm, false);
        assert_ne!(x, orig);
        rope_apply(&rope, &mut x, &dm, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (loss, _) = cross_entropy(&[0.5f64; 16], &[1, 3], 8, false);
        assert!((loss - (8f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn single_token_forward_is_finite_and_counts() {
        let cfg = ModelConfig { d_model: 16, seq_len: 4, ..Default::default() };
        let m = Model::<f32>::init(&cfg).unwrap();
        let mut cap = ProbeCapture::new(&cfg, None, false);
        let logits = m.forward(&[5, 7, 9], 3, Some(&mut cap)).unwrap();
        assert_eq!(logits.shape(), (3, 256));
        assert!(logits.is_finite());
        assert_eq!(cap.count(0), 3);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let cfg = ModelConfig { d_model: 16, seq_len: 4, vocab_size: 10, ..Default::default() };
        let m = Model::<f32>::init(&cfg).unwrap();
        assert!(matches!(m.forward(&[1, 10], 1, None), Err(ModelError::TokenOutOfRange { token: 10, .. })));
        assert!(matches!(m.forward(&[1; 8], 1, None), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn non_finite_weights_report_layer() {
        let cfg = ModelConfig { d_model: 16, seq_len: 4, ..Default::default() };
        let mut m = Model::<f32>::init(&cfg).unwrap();
        let ix = layer_idx(1);
        m.params_mut()[ix.w_out].data_mut()[0] = f32::NAN;
        assert!(matches!(m.forward(&[1, 2], 1, None), Err(ModelError::NonFinite { layer: 1 })));
    }
}
