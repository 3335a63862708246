//! Multi-head attention with mask-aware softmax and analytic gradients.

use crate::conditioning::uniform_tensor;
use crate::mask::{AttentionMask, MaskError};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// Stabilizer inside the root-mean-square of the normalization variant.
pub const RMS_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask covers {mask_n} tokens but input has {input_n}")]
    MaskMismatch { mask_n: usize, input_n: usize },
    #[error("layout expects {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid perturbation target: {0}")]
    PerturbIndex(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Conditioning(#[from] crate::conditioning::ConditioningError),
    #[error(transparent)]
    Geometry(#[from] crate::camera::GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Projection weights of one attention layer.
///
/// Each projection maps `[d_model] → [d_model]` as `y = W·x + b` with `W`
/// stored row-major `[d_model, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Gradients of a scalar loss with respect to every [`AttentionParams`]
/// tensor, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    /// Seeded init: all projections uniform in `±1/√d_model`.
    pub fn new(d_model: usize, n_heads: usize, seed: u64) -> Result<Self, AttentionError> {
        if d_model < 1 || n_heads < 1 {
            return Err(AttentionError::InvalidDims(format!(
                "d_model {d_model} and n_heads {n_heads} must be at least 1"
            )));
        }
        if d_model % n_heads != 0 {
            return Err(AttentionError::InvalidDims(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = || uniform_tensor(&mut rng, vec![d_model, d_model], bound);
        let (wq, wk, wv, wo) = (mat(), mat(), mat(), mat());
        let mut vec_ = || uniform_tensor(&mut rng, vec![d_model], bound);
        let (bq, bk, bv, bo) = (vec_(), vec_(), vec_(), vec_());
        Ok(Self {
            d_model,
            n_heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn zero_gradients(&self) -> AttentionGradients {
        let d = self.d_model;
        AttentionGradients {
            wq: Tensor::zeros(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: Tensor::zeros(vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: Tensor::zeros(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: Tensor::zeros(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
        }
    }

    /// Parameter tensors in serialization order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
            self.wv.clone(),
            self.bv.clone(),
            self.wo.clone(),
            self.bo.clone(),
        ]
    }

    /// Rebuild from [`AttentionParams::to_tensors`] order.
    pub fn from_tensors(n_heads: usize, tensors: Vec<Tensor>) -> Result<Self, AttentionError> {
        if tensors.len() != 8 {
            return Err(AttentionError::ShapeMismatch(format!(
                "expected 8 parameter tensors, got {}",
                tensors.len()
            )));
        }
        let d = match tensors[0].shape() {
            [a, b] if a == b => *a,
            s => {
                return Err(AttentionError::ShapeMismatch(format!(
                    "wq shape {s:?} is not square"
                )))
            }
        };
        let mut it = tensors.into_iter();
        let mut take = |shape: &[usize], name: &str| {
            let t = it.next().expect("length checked above");
            t.expect_shape(shape)
                .map_err(|e| AttentionError::ShapeMismatch(format!("{name}: {e}")))?;
            Ok::<Tensor, AttentionError>(t)
        };
        let params = Self {
            d_model: d,
            n_heads,
            wq: take(&[d, d], "wq")?,
            bq: take(&[d], "bq")?,
            wk: take(&[d, d], "wk")?,
            bk: take(&[d], "bk")?,
            wv: take(&[d, d], "wv")?,
            bv: take(&[d], "bv")?,
            wo: take(&[d, d], "wo")?,
            bo: take(&[d], "bo")?,
        };
        if d % n_heads != 0 || n_heads < 1 {
            return Err(AttentionError::InvalidDims(format!(
                "d_model {d} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(params)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), AttentionError> {
        Ok(write_tensor_file(path, &self.to_tensors())?)
    }

    pub fn load<P: AsRef<Path>>(path: P, n_heads: usize) -> Result<Self, AttentionError> {
        Self::from_tensors(n_heads, read_tensor_file(path)?)
    }

    pub fn apply_gradients(&mut self, grads: &AttentionGradients, learning_rate: f64) {
        let pairs = [
            (&mut self.wq, &grads.wq),
            (&mut self.bq, &grads.bq),
            (&mut self.wk, &grads.wk),
            (&mut self.bk, &grads.bk),
            (&mut self.wv, &grads.wv),
            (&mut self.bv, &grads.bv),
            (&mut self.wo, &grads.wo),
            (&mut self.bo, &grads.bo),
        ];
        for (p, g) in pairs {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= learning_rate * gv;
            }
        }
    }
}

/// `y[t] = W·x[t] + b` over rows of `x`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(vec![n, d]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for t in 0..n {
        for i in 0..d {
            let mut acc = bd[i];
            for j in 0..d {
                acc += wd[i * d + j] * xd[t * d + j];
            }
            out.data_mut()[t * d + i] = acc;
        }
    }
    out
}

/// Backward of [`linear`]: accumulates into `g_w`/`g_b`, returns `dL/dx`.
fn linear_backward(x: &Tensor, w: &Tensor, d_y: &Tensor, g_w: &mut Tensor, g_b: &mut Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut d_x = Tensor::zeros(vec![n, d]);
    let (xd, wd, gd) = (x.data(), w.data(), d_y.data());
    for t in 0..n {
        for i in 0..d {
            let g = gd[t * d + i];
            g_b.data_mut()[i] += g;
            for j in 0..d {
                g_w.data_mut()[i * d + j] += g * xd[t * d + j];
                d_x.data_mut()[t * d + j] += g * wd[i * d + j];
            }
        }
    }
    d_x
}

/// Intermediate state of one attention evaluation, kept for the backward
/// pass and for weight inspection in tests.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub x: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head attention weights, each `[n, n]`; masked pairs hold exact 0.
    pub weights: Vec<Tensor>,
    pub ctx: Tensor,
    pub out: Tensor,
}

fn check_attention_inputs(
    params: &AttentionParams,
    x: &Tensor,
    mask: &AttentionMask,
) -> Result<usize, AttentionError> {
    let n = match x.shape() {
        [n, d] if *d == params.d_model => *n,
        s => {
            return Err(AttentionError::ShapeMismatch(format!(
                "input shape {s:?} is not [n, {}]",
                params.d_model
            )))
        }
    };
    if mask.n() != n {
        return Err(AttentionError::MaskMismatch {
            mask_n: mask.n(),
            input_n: n,
        });
    }
    Ok(n)
}

/// Masked multi-head attention, returning the full cache.
///
/// Masked keys are excluded from the logit and softmax reductions entirely,
/// so their weights are exactly zero. Reductions iterate keys in ascending
/// index order for bit-reproducibility.
pub fn masked_attention_cached(
    params: &AttentionParams,
    x: &Tensor,
    mask: &AttentionMask,
) -> Result<AttentionCache, AttentionError> {
    let n = check_attention_inputs(params, x, mask)?;
    let d = params.d_model;
    let nh = params.n_heads;
    let dh = params.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(x, &params.wq, &params.bq);
    let k = linear(x, &params.wk, &params.bk);
    let v = linear(x, &params.wv, &params.bv);

    let mut weights = vec![Tensor::zeros(vec![n, n]); nh];
    let mut ctx = Tensor::zeros(vec![n, d]);
    let mut logits = vec![0.0; n];
    for h in 0..nh {
        let off = h * dh;
        for qi in 0..n {
            let mut max = f64::NEG_INFINITY;
            for ki in 0..n {
                if !mask.visible(qi, ki) {
                    continue;
                }
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q.data()[qi * d + off + c] * k.data()[ki * d + off + c];
                }
                let logit = dot * scale;
                logits[ki] = logit;
                max = max.max(logit);
            }
            let mut sum = 0.0;
            for ki in 0..n {
                if mask.visible(qi, ki) {
                    let e = (logits[ki] - max).exp();
                    logits[ki] = e;
                    sum += e;
                }
            }
            for ki in 0..n {
                if !mask.visible(qi, ki) {
                    continue;
                }
                let a = logits[ki] / sum;
                weights[h].data_mut()[qi * n + ki] = a;
                for c in 0..dh {
                    ctx.data_mut()[qi * d + off + c] += a * v.data()[ki * d + off + c];
                }
            }
        }
    }
    let out = linear(&ctx, &params.wo, &params.bo);
    Ok(AttentionCache {
        x: x.clone(),
        q,
        k,
        v,
        weights,
        ctx,
        out,
    })
}

/// Masked multi-head attention output, shape `[n, d_model]`.
pub fn masked_attention(
    params: &AttentionParams,
    x: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor, AttentionError> {
    Ok(masked_attention_cached(params, x, mask)?.out)
}

/// Backward through one attention evaluation.
///
/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub fn masked_attention_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    mask: &AttentionMask,
    d_out: &Tensor,
    grads: &mut AttentionGradients,
) -> Tensor {
    let n = cache.x.shape()[0];
    let d = params.d_model;
    let nh = params.n_heads;
    let dh = params.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let d_ctx = linear_backward(&cache.ctx, &params.wo, d_out, &mut grads.wo, &mut grads.bo);

    let mut d_q = Tensor::zeros(vec![n, d]);
    let mut d_k = Tensor::zeros(vec![n, d]);
    let mut d_v = Tensor::zeros(vec![n, d]);
    let mut d_a = vec![0.0; n];
    for h in 0..nh {
        let off = h * dh;
        let aw = cache.weights[h].data();
        for qi in 0..n {
            // dA[qi][ki] = dctx_h[qi] · V_h[ki]; dV accumulates A·dctx.
            let mut dot_a_da = 0.0;
            for ki in 0..n {
                if !mask.visible(qi, ki) {
                    continue;
                }
                let a = aw[qi * n + ki];
                let mut da = 0.0;
                for c in 0..dh {
                    let g = d_ctx.data()[qi * d + off + c];
                    da += g * cache.v.data()[ki * d + off + c];
                    d_v.data_mut()[ki * d + off + c] += a * g;
                }
                d_a[ki] = da;
                dot_a_da += a * da;
            }
            // Softmax backward, then into Q and K.
            for ki in 0..n {
                if !mask.visible(qi, ki) {
                    continue;
                }
                let a = aw[qi * n + ki];
                let d_logit = a * (d_a[ki] - dot_a_da) * scale;
                for c in 0..dh {
                    d_q.data_mut()[qi * d + off + c] += d_logit * cache.k.data()[ki * d + off + c];
                    d_k.data_mut()[ki * d + off + c] += d_logit * cache.q.data()[qi * d + off + c];
                }
            }
        }
    }

    let mut d_x = linear_backward(&cache.x, &params.wq, &d_q, &mut grads.wq, &mut grads.bq);
    let d_x_k = linear_backward(&cache.x, &params.wk, &d_k, &mut grads.wk, &mut grads.bk);
    let d_x_v = linear_backward(&cache.x, &params.wv, &d_v, &mut grads.wv, &mut grads.bv);
    for i in 0..d_x.len() {
        d_x.data_mut()[i] += d_x_k.data()[i] + d_x_v.data()[i];
    }
    d_x
}

/// Row-wise RMS normalization without a learnable gain; returns the
/// normalized rows and each row's root mean square.
fn rms_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    let mut rms = Vec::with_capacity(n);
    for t in 0..n {
        let row = &x.data()[t * d..(t + 1) * d];
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (mean_sq + RMS_NORM_EPS).sqrt();
        for c in 0..d {
            out.data_mut()[t * d + c] = row[c] / r;
        }
        rms.push(r);
    }
    (out, rms)
}

/// Backward of [`rms_norm`] for one batch of rows.
fn rms_norm_backward(x: &Tensor, rms: &[f64], d_y: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut d_x = Tensor::zeros(vec![n, d]);
    for t in 0..n {
        let r = rms[t];
        let row = &x.data()[t * d..(t + 1) * d];
        let grad = &d_y.data()[t * d..(t + 1) * d];
        let dot: f64 = grad.iter().zip(row).map(|(g, v)| g * v).sum();
        for c in 0..d {
            d_x.data_mut()[t * d + c] = grad[c] / r - row[c] * dot / (d as f64 * r * r * r);
        }
    }
    d_x
}

/// Per-layer forward state.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub attn: AttentionCache,
    /// Present only in the residual variant: pre-norm input and per-row RMS.
    pub norm: Option<(Tensor, Vec<f64>)>,
    pub out: Tensor,
}

/// One transformer layer: plain masked attention, or the residual variant
/// `x + attention(rms_norm(x))` when `residual_norm` is set.
pub fn layer_forward(
    params: &AttentionParams,
    x: &Tensor,
    mask: &AttentionMask,
    residual_norm: bool,
) -> Result<LayerCache, AttentionError> {
    if !residual_norm {
        let attn = masked_attention_cached(params, x, mask)?;
        let out = attn.out.clone();
        return Ok(LayerCache {
            attn,
            norm: None,
            out,
        });
    }
    let (normed, rms) = rms_norm(x);
    let attn = masked_attention_cached(params, &normed, mask)?;
    let mut out = x.clone();
    for (o, a) in out.data_mut().iter_mut().zip(attn.out.data()) {
        *o += a;
    }
    Ok(LayerCache {
        attn,
        norm: Some((x.clone(), rms)),
        out,
    })
}

/// Backward through [`layer_forward`]; accumulates into `grads`, returns
/// `dL/dx`.
pub fn layer_backward(
    params: &AttentionParams,
    cache: &LayerCache,
    mask: &AttentionMask,
    d_out: &Tensor,
    grads: &mut AttentionGradients,
) -> Tensor {
    let d_attn_in = masked_attention_backward(params, &cache.attn, mask, d_out, grads);
    match &cache.norm {
        None => d_attn_in,
        Some((x, rms)) => {
            let mut d_x = rms_norm_backward(x, rms, &d_attn_in);
            for (dx, g) in d_x.data_mut().iter_mut().zip(d_out.data()) {
                *dx += g;
            }
            d_x
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::seeded_uniform;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::seq::SliceRandom;

    fn small_params(d_model: usize, n_heads: usize, seed: u64) -> AttentionParams {
        AttentionParams::new(d_model, n_heads, seed).unwrap()
    }

    /// Reference single-token formula: `Wo·(Wv·x + bv) + bo`.
    fn single_token_reference(params: &AttentionParams, x_row: &[f64]) -> Vec<f64> {
        let d = params.d_model;
        let v: Vec<f64> = (0..d)
            .map(|i| {
                params.bv.data()[i]
                    + (0..d)
                        .map(|j| params.wv.data()[i * d + j] * x_row[j])
                        .sum::<f64>()
            })
            .collect();
        (0..d)
            .map(|i| {
                params.bo.data()[i]
                    + (0..d)
                        .map(|j| params.wo.data()[i * d + j] * v[j])
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionParams::new(6, 4, 0).is_err());
        assert!(AttentionParams::new(0, 1, 0).is_err());
    }

    #[test]
    fn single_token_attention_is_linear() {
        let params = small_params(4, 2, 5);
        let x = seeded_uniform(vec![1, 4], 1.0, 6);
        let out = masked_attention(&params, &x, &crate::mask::AttentionMask::all_true(1)).unwrap();
        let expected = single_token_reference(&params, x.data());
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mask_applies_single_token_formula_rowwise() {
        let params = small_params(6, 3, 7);
        let x = seeded_uniform(vec![4, 6], 1.0, 8);
        let out =
            masked_attention(&params, &x, &crate::mask::AttentionMask::identity(4)).unwrap();
        for t in 0..4 {
            let expected = single_token_reference(&params, x.row(t));
            for (a, b) in out.row(t).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_projection_gives_uniform_weights() {
        let mut params = small_params(4, 2, 9);
        params.wq = Tensor::zeros(vec![4, 4]);
        params.bq = Tensor::zeros(vec![4]);
        let x = seeded_uniform(vec![5, 4], 1.0, 10);
        let cache =
            masked_attention_cached(&params, &x, &crate::mask::AttentionMask::all_true(5)).unwrap();
        for head in &cache.weights {
            for w in head.data() {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked_pairs_exactly_zero() {
        let params = small_params(4, 2, 11);
        let layout = crate::mask::TokenLayout::new(
            3,
            1,
            2,
            vec![
                crate::mask::ShotSpec {
                    shot_id: 0,
                    frame_start: 0,
                    frame_end: 1,
                    local_text_start: 0,
                    local_text_end: 1,
                },
                crate::mask::ShotSpec {
                    shot_id: 1,
                    frame_start: 1,
                    frame_end: 3,
                    local_text_start: 1,
                    local_text_end: 2,
                },
            ],
            2,
            2,
        )
        .unwrap();
        let mask = crate::mask::build_mask(&layout);
        let n = mask.n();
        let x = seeded_uniform(vec![n, 4], 1.0, 12);
        let cache = masked_attention_cached(&params, &x, &mask).unwrap();
        for head in &cache.weights {
            for q in 0..n {
                let mut sum = 0.0;
                for k in 0..n {
                    let w = head.data()[q * n + k];
                    if !mask.visible(q, k) {
                        assert_eq!(w.to_bits(), 0.0_f64.to_bits());
                    }
                    sum += w;
                }
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_consistency() {
        let params = small_params(8, 2, 13);
        let n = 6;
        let x = seeded_uniform(vec![n, 8], 1.0, 14);
        // A mask with structure: identity plus visibility of token 0,
        // permuted alongside the tokens.
        let mut bits = vec![false; n * n];
        for q in 0..n {
            bits[q * n + q] = true;
            bits[q * n] = true;
            bits[q * n + (q + 1) % n] = true;
        }
        let mask = crate::mask::AttentionMask::new(n, bits.clone()).unwrap();
        let out = masked_attention(&params, &x, &mask).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut xp = Tensor::zeros(vec![n, 8]);
        let mut bp = vec![false; n * n];
        for t in 0..n {
            xp.row_mut(t).copy_from_slice(x.row(perm[t]));
            for k in 0..n {
                bp[t * n + k] = bits[perm[t] * n + perm[k]];
            }
        }
        let maskp = crate::mask::AttentionMask::new(n, bp).unwrap();
        let outp = masked_attention(&params, &xp, &maskp).unwrap();
        for t in 0..n {
            for c in 0..8 {
                assert!((outp.row(t)[c] - out.row(perm[t])[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_mismatched_mask_or_width() {
        let params = small_params(4, 2, 16);
        let x = seeded_uniform(vec![3, 4], 1.0, 17);
        assert!(matches!(
            masked_attention(&params, &x, &crate::mask::AttentionMask::all_true(2)),
            Err(AttentionError::MaskMismatch { .. })
        ));
        let bad = seeded_uniform(vec![3, 5], 1.0, 18);
        assert!(masked_attention(&params, &bad, &crate::mask::AttentionMask::all_true(3)).is_err());
    }

    fn flatten_params(params: &AttentionParams) -> Vec<f64> {
        params
            .to_tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn unflatten_params(template: &AttentionParams, flat: &[f64]) -> AttentionParams {
        let mut out = template.clone();
        let mut cursor = 0;
        for t in [
            &mut out.wq,
            &mut out.bq,
            &mut out.wk,
            &mut out.bk,
            &mut out.wv,
            &mut out.bv,
            &mut out.wo,
            &mut out.bo,
        ] {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[cursor..cursor + len]);
            cursor += len;
        }
        out
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for residual in [false, true] {
            let params = small_params(4, 2, 19);
            let n = 3;
            let x = seeded_uniform(vec![n, 4], 1.0, 20);
            let mask = crate::mask::AttentionMask::identity(n);

            let cache = layer_forward(&params, &x, &mask, residual).unwrap();
            let mut grads = params.zero_gradients();
            let d_out = cache.out.clone();
            layer_backward(&params, &cache, &mask, &d_out, &mut grads);
            let analytic: Vec<f64> = [
                &grads.wq, &grads.bq, &grads.wk, &grads.bk, &grads.wv, &grads.bv, &grads.wo,
                &grads.bo,
            ]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();

            let mut flat = flatten_params(&params);
            let numeric = central_difference(&mut flat, 1e-5, |p| {
                let probe = unflatten_params(&params, p);
                let out = layer_forward(&probe, &x, &mask, residual).unwrap().out;
                out.data().iter().map(|v| 0.5 * v * v).sum()
            });
            assert!(
                max_relative_error(&analytic, &numeric) < 1e-5,
                "residual={residual}"
            );
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for residual in [false, true] {
            let params = small_params(4, 2, 21);
            let n = 3;
            let x = seeded_uniform(vec![n, 4], 1.0, 22);
            let mask = crate::mask::AttentionMask::all_true(n);

            let cache = layer_forward(&params, &x, &mask, residual).unwrap();
            let mut grads = params.zero_gradients();
            let d_x = layer_backward(&params, &cache, &mask, &cache.out.clone(), &mut grads);

            let mut flat = x.data().to_vec();
            let numeric = central_difference(&mut flat, 1e-5, |p| {
                let probe = Tensor::new(vec![n, 4], p.to_vec()).unwrap();
                let out = layer_forward(&params, &probe, &mask, residual).unwrap().out;
                out.data().iter().map(|v| 0.5 * v * v).sum()
            });
            assert!(
                max_relative_error(d_x.data(), &numeric) < 1e-5,
                "residual={residual}"
            );
        }
    }

    #[test]
    fn params_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.bin");
        let params = small_params(6, 2, 23);
        params.save(&path).unwrap();
        assert_eq!(AttentionParams::load(&path, 2).unwrap(), params);
    }
}
