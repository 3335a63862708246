//! Dual-branch camera conditioning: an extrinsic MLP encoder, a Plücker
//! convolutional encoder, and additive injection into visual tokens.
//!
//! The MLP branch maps the flattened 3x4 extrinsic matrix through one hidden
//! GELU layer into model space. Its final projection is the transfer layer,
//! initialized to exactly zero so a freshly constructed branch is a no-op and
//! fine-tuning starts from the unconditioned model. The convolutional branch
//! patchifies a Plücker ray map with a stride-equals-kernel convolution, one
//! output token per patch.
//!
//! Both branches expose analytic parameter gradients so the toy training
//! loop and the finite-difference checks can exercise them without an
//! autograd framework.

use crate::camera::{CameraExtrinsics, PluckerMap};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// Width of the flattened `[R | t]` extrinsic input.
pub const EXTRINSIC_DIM: usize = 12;

/// Channel count of a Plücker ray map (moment followed by direction).
pub const PLUCKER_CHANNELS: usize = 6;

/// Default model width for desk-scale demos.
pub const DEFAULT_D_MODEL: usize = 64;

/// Default hidden width of the MLP branch.
pub fn default_hidden(d_model: usize) -> usize {
    4 * d_model
}

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("dimension must be at least 1: {0}")]
    InvalidDim(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("map size {h}x{w} is not divisible by kernel size {k}")]
    Indivisible { h: usize, w: usize, k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// GELU with the tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// Seeded uniform tensor in `±bound`, for reproducible demo inputs.
pub fn seeded_uniform(shape: Vec<usize>, bound: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform_tensor(&mut rng, shape, bound)
}

/// Two-layer perceptron `12 → hidden → d_model` with GELU.
///
/// `w2`/`b2` form the transfer layer. [`MlpBranch::new`] zeroes them so the
/// branch output is identically zero until the first parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBranch {
    pub d_model: usize,
    pub hidden: usize,
    /// First layer weights, shape `[hidden, 12]`.
    pub w1: Tensor,
    /// First layer bias, shape `[hidden]`.
    pub b1: Tensor,
    /// Transfer layer weights, shape `[d_model, hidden]`.
    pub w2: Tensor,
    /// Transfer layer bias, shape `[d_model]`.
    pub b2: Tensor,
}

/// Gradients of a scalar loss with respect to every [`MlpBranch`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpBranch {
    /// Seeded init: first layer uniform in `±1/√12`, transfer layer zero.
    pub fn new(d_model: usize, hidden: usize, seed: u64) -> Result<Self, ConditioningError> {
        Self::check_dims(d_model, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (EXTRINSIC_DIM as f64).sqrt();
        Ok(Self {
            d_model,
            hidden,
            w1: uniform_tensor(&mut rng, vec![hidden, EXTRINSIC_DIM], bound),
            b1: uniform_tensor(&mut rng, vec![hidden], bound),
            w2: Tensor::zeros(vec![d_model, hidden]),
            b2: Tensor::zeros(vec![d_model]),
        })
    }

    /// Seeded init with every layer random, including the transfer layer.
    ///
    /// The contract-conformant [`MlpBranch::new`] zeroes the transfer layer,
    /// which also zeroes the loss gradient of the first layer; gradient
    /// verification therefore uses this constructor.
    pub fn random_all(d_model: usize, hidden: usize, seed: u64) -> Result<Self, ConditioningError> {
        let mut branch = Self::new(d_model, hidden, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let bound = 1.0 / (hidden as f64).sqrt();
        branch.w2 = uniform_tensor(&mut rng, vec![d_model, hidden], bound);
        branch.b2 = uniform_tensor(&mut rng, vec![d_model], bound);
        Ok(branch)
    }

    fn check_dims(d_model: usize, hidden: usize) -> Result<(), ConditioningError> {
        if d_model < 1 {
            return Err(ConditioningError::InvalidDim("d_model".into()));
        }
        if hidden < 1 {
            return Err(ConditioningError::InvalidDim("hidden".into()));
        }
        Ok(())
    }

    /// Pre-activations of the hidden layer for input `x`.
    fn hidden_pre(&self, x: &[f64; EXTRINSIC_DIM]) -> Vec<f64> {
        let w1 = self.w1.data();
        let b1 = self.b1.data();
        (0..self.hidden)
            .map(|j| {
                let row = &w1[j * EXTRINSIC_DIM..(j + 1) * EXTRINSIC_DIM];
                b1[j] + row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Forward pass on a flattened extrinsic vector.
    pub fn forward(&self, x: &[f64; EXTRINSIC_DIM]) -> Tensor {
        let h: Vec<f64> = self.hidden_pre(x).iter().map(|&p| gelu(p)).collect();
        let w2 = self.w2.data();
        let b2 = self.b2.data();
        let y = (0..self.d_model)
            .map(|i| {
                let row = &w2[i * self.hidden..(i + 1) * self.hidden];
                b2[i] + row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Tensor::new(vec![self.d_model], y).expect("output length matches d_model")
    }

    /// Gradients of a scalar loss given `dL/dy` for the forward pass on `x`.
    pub fn backward(&self, x: &[f64; EXTRINSIC_DIM], upstream: &[f64]) -> MlpGradients {
        assert_eq!(upstream.len(), self.d_model, "upstream gradient width");
        let h_pre = self.hidden_pre(x);
        let h: Vec<f64> = h_pre.iter().map(|&p| gelu(p)).collect();

        let mut g_w2 = Tensor::zeros(vec![self.d_model, self.hidden]);
        let mut g_b2 = Tensor::zeros(vec![self.d_model]);
        let mut g_h = vec![0.0; self.hidden];
        let w2 = self.w2.data();
        for i in 0..self.d_model {
            let g = upstream[i];
            g_b2.data_mut()[i] = g;
            for j in 0..self.hidden {
                g_w2.data_mut()[i * self.hidden + j] = g * h[j];
                g_h[j] += g * w2[i * self.hidden + j];
            }
        }

        let mut g_w1 = Tensor::zeros(vec![self.hidden, EXTRINSIC_DIM]);
        let mut g_b1 = Tensor::zeros(vec![self.hidden]);
        for j in 0..self.hidden {
            let g_pre = g_h[j] * gelu_derivative(h_pre[j]);
            g_b1.data_mut()[j] = g_pre;
            for k in 0..EXTRINSIC_DIM {
                g_w1.data_mut()[j * EXTRINSIC_DIM + k] = g_pre * x[k];
            }
        }

        MlpGradients {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
        }
    }

    /// Parameter tensors in serialization order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    /// Rebuild from [`MlpBranch::to_tensors`] order, validating shapes.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, ConditioningError> {
        let [w1, b1, w2, b2]: [Tensor; 4] = tensors.try_into().map_err(|t: Vec<Tensor>| {
            ConditioningError::ShapeMismatch(format!("expected 4 parameter tensors, got {}", t.len()))
        })?;
        let (hidden, d_model) = match (w1.shape(), w2.shape()) {
            ([h, EXTRINSIC_DIM], [d, h2]) if h == h2 => (*h, *d),
            _ => {
                return Err(ConditioningError::ShapeMismatch(format!(
                    "weight shapes {:?} / {:?} are not [hidden, 12] / [d_model, hidden]",
                    w1.shape(),
                    w2.shape()
                )))
            }
        };
        Self::check_dims(d_model, hidden)?;
        b1.expect_shape(&[hidden])
            .map_err(|e| ConditioningError::ShapeMismatch(e.to_string()))?;
        b2.expect_shape(&[d_model])
            .map_err(|e| ConditioningError::ShapeMismatch(e.to_string()))?;
        Ok(Self {
            d_model,
            hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ConditioningError> {
        Ok(write_tensor_file(path, &self.to_tensors())?)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConditioningError> {
        Self::from_tensors(read_tensor_file(path)?)
    }

    pub fn apply_gradients(&mut self, grads: &MlpGradients, learning_rate: f64) {
        step(&mut self.w1, &grads.w1, learning_rate);
        step(&mut self.b1, &grads.b1, learning_rate);
        step(&mut self.w2, &grads.w2, learning_rate);
        step(&mut self.b2, &grads.b2, learning_rate);
    }

    pub fn zero_gradients(&self) -> MlpGradients {
        MlpGradients {
            w1: Tensor::zeros(vec![self.hidden, EXTRINSIC_DIM]),
            b1: Tensor::zeros(vec![self.hidden]),
            w2: Tensor::zeros(vec![self.d_model, self.hidden]),
            b2: Tensor::zeros(vec![self.d_model]),
        }
    }
}

impl MlpGradients {
    /// Elementwise accumulation of another gradient set.
    pub fn accumulate(&mut self, other: &MlpGradients) {
        add_into(&mut self.w1, &other.w1);
        add_into(&mut self.b1, &other.b1);
        add_into(&mut self.w2, &other.w2);
        add_into(&mut self.b2, &other.b2);
    }
}

/// Patchify convolution over a Plücker map: 6 channels in, `d_model` out,
/// kernel and stride both `k`, no padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    pub d_model: usize,
    pub kernel: usize,
    /// Weights, shape `[d_model, 6, k, k]`.
    pub weight: Tensor,
    /// Bias, shape `[d_model]`.
    pub bias: Tensor,
}

/// Gradients of a scalar loss with respect to every [`ConvBranch`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvBranch {
    /// Seeded init: uniform in `±1/√(6·k·k)`.
    pub fn new(d_model: usize, kernel: usize, seed: u64) -> Result<Self, ConditioningError> {
        Self::check_dims(d_model, kernel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (PLUCKER_CHANNELS * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            d_model,
            kernel,
            weight: uniform_tensor(
                &mut rng,
                vec![d_model, PLUCKER_CHANNELS, kernel, kernel],
                bound,
            ),
            bias: uniform_tensor(&mut rng, vec![d_model], bound),
        })
    }

    /// All-zero parameters; the branch contributes nothing until updated.
    pub fn zeros(d_model: usize, kernel: usize) -> Result<Self, ConditioningError> {
        Self::check_dims(d_model, kernel)?;
        Ok(Self {
            d_model,
            kernel,
            weight: Tensor::zeros(vec![d_model, PLUCKER_CHANNELS, kernel, kernel]),
            bias: Tensor::zeros(vec![d_model]),
        })
    }

    fn check_dims(d_model: usize, kernel: usize) -> Result<(), ConditioningError> {
        if d_model < 1 {
            return Err(ConditioningError::InvalidDim("d_model".into()));
        }
        if kernel < 1 {
            return Err(ConditioningError::InvalidDim("kernel".into()));
        }
        Ok(())
    }

    fn output_grid(&self, map: &PluckerMap) -> Result<(usize, usize), ConditioningError> {
        let (h, w, k) = (map.h(), map.w(), self.kernel);
        if h % k != 0 || w % k != 0 {
            return Err(ConditioningError::Indivisible { h, w, k });
        }
        Ok((h / k, w / k))
    }

    /// Cross-correlation with stride = kernel, output shape `[h/k, w/k, d_model]`.
    pub fn forward(&self, map: &PluckerMap) -> Result<Tensor, ConditioningError> {
        let (oh, ow) = self.output_grid(map)?;
        let k = self.kernel;
        let wgt = self.weight.data();
        let bias = self.bias.data();
        let mut out = Tensor::zeros(vec![oh, ow, self.d_model]);
        for oi in 0..oh {
            for oj in 0..ow {
                for c in 0..self.d_model {
                    let mut acc = bias[c];
                    for ch in 0..PLUCKER_CHANNELS {
                        for di in 0..k {
                            for dj in 0..k {
                                let w_idx = ((c * PLUCKER_CHANNELS + ch) * k + di) * k + dj;
                                acc += wgt[w_idx] * map.cell(oi * k + di, oj * k + dj)[ch];
                            }
                        }
                    }
                    out.data_mut()[(oi * ow + oj) * self.d_model + c] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss given `dL/dy` of shape `[h/k, w/k, d_model]`.
    pub fn backward(
        &self,
        map: &PluckerMap,
        upstream: &Tensor,
    ) -> Result<ConvGradients, ConditioningError> {
        let (oh, ow) = self.output_grid(map)?;
        upstream
            .expect_shape(&[oh, ow, self.d_model])
            .map_err(|e| ConditioningError::ShapeMismatch(e.to_string()))?;
        let k = self.kernel;
        let g = upstream.data();
        let mut g_weight = Tensor::zeros(vec![self.d_model, PLUCKER_CHANNELS, k, k]);
        let mut g_bias = Tensor::zeros(vec![self.d_model]);
        for oi in 0..oh {
            for oj in 0..ow {
                for c in 0..self.d_model {
                    let gy = g[(oi * ow + oj) * self.d_model + c];
                    g_bias.data_mut()[c] += gy;
                    for ch in 0..PLUCKER_CHANNELS {
                        for di in 0..k {
                            for dj in 0..k {
                                let w_idx = ((c * PLUCKER_CHANNELS + ch) * k + di) * k + dj;
                                g_weight.data_mut()[w_idx] +=
                                    gy * map.cell(oi * k + di, oj * k + dj)[ch];
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGradients {
            weight: g_weight,
            bias: g_bias,
        })
    }

    /// Parameter tensors in serialization order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    /// Rebuild from [`ConvBranch::to_tensors`] order, validating shapes.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, ConditioningError> {
        let [weight, bias]: [Tensor; 2] = tensors.try_into().map_err(|t: Vec<Tensor>| {
            ConditioningError::ShapeMismatch(format!("expected 2 parameter tensors, got {}", t.len()))
        })?;
        let (d_model, kernel) = match weight.shape() {
            [d, PLUCKER_CHANNELS, k, k2] if k == k2 => (*d, *k),
            _ => {
                return Err(ConditioningError::ShapeMismatch(format!(
                    "conv weight shape {:?} is not [d_model, 6, k, k]",
                    weight.shape()
                )))
            }
        };
        Self::check_dims(d_model, kernel)?;
        bias.expect_shape(&[d_model])
            .map_err(|e| ConditioningError::ShapeMismatch(e.to_string()))?;
        Ok(Self {
            d_model,
            kernel,
            weight,
            bias,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ConditioningError> {
        Ok(write_tensor_file(path, &self.to_tensors())?)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConditioningError> {
        Self::from_tensors(read_tensor_file(path)?)
    }

    pub fn apply_gradients(&mut self, grads: &ConvGradients, learning_rate: f64) {
        step(&mut self.weight, &grads.weight, learning_rate);
        step(&mut self.bias, &grads.bias, learning_rate);
    }

    pub fn zero_gradients(&self) -> ConvGradients {
        ConvGradients {
            weight: Tensor::zeros(vec![self.d_model, PLUCKER_CHANNELS, self.kernel, self.kernel]),
            bias: Tensor::zeros(vec![self.d_model]),
        }
    }
}

impl ConvGradients {
    /// Elementwise accumulation of another gradient set.
    pub fn accumulate(&mut self, other: &ConvGradients) {
        add_into(&mut self.weight, &other.weight);
        add_into(&mut self.bias, &other.bias);
    }
}

fn add_into(acc: &mut Tensor, grad: &Tensor) {
    debug_assert_eq!(acc.shape(), grad.shape());
    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
        *a += g;
    }
}

fn step(param: &mut Tensor, grad: &Tensor, learning_rate: f64) {
    debug_assert_eq!(param.shape(), grad.shape());
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= learning_rate * g;
    }
}

/// Extrinsic branch output `MLP(flatten([R | t]))`, shape `[d_model]`.
pub fn encode_extrinsic(branch: &MlpBranch, extrinsics: &CameraExtrinsics) -> Tensor {
    branch.forward(&extrinsics.flatten())
}

/// Plücker branch output, shape `[h/k, w/k, d_model]`.
pub fn encode_plucker(branch: &ConvBranch, map: &PluckerMap) -> Result<Tensor, ConditioningError> {
    branch.forward(map)
}

/// Additive camera injection `z + c_ext + c_plk`, with `c_ext` broadcast over
/// the token axis.
///
/// A contribution tensor that is exactly zero everywhere is skipped rather
/// than added, so a disabled or freshly initialized branch leaves `z`
/// bit-for-bit unchanged (IEEE addition of 0.0 would flip the sign of
/// negative zeros).
pub fn inject(z: &Tensor, c_ext: &Tensor, c_plk: &Tensor) -> Result<Tensor, ConditioningError> {
    let (n, d) = match z.shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(ConditioningError::ShapeMismatch(format!(
                "visual tokens must be rank 2 [n_tokens, d_model], got {s:?}"
            )))
        }
    };
    c_ext
        .expect_shape(&[d])
        .map_err(|e| ConditioningError::ShapeMismatch(format!("extrinsic contribution: {e}")))?;
    c_plk
        .expect_shape(&[n, d])
        .map_err(|e| ConditioningError::ShapeMismatch(format!("Plücker contribution: {e}")))?;

    let add_ext = !c_ext.is_all_zero();
    let add_plk = !c_plk.is_all_zero();
    if !add_ext && !add_plk {
        return Ok(z.clone());
    }
    let mut out = z.clone();
    let ext = c_ext.data();
    let plk = c_plk.data();
    for t in 0..n {
        for i in 0..d {
            let idx = t * d + i;
            if add_ext {
                out.data_mut()[idx] += ext[i];
            }
            if add_plk {
                out.data_mut()[idx] += plk[idx];
            }
        }
    }
    Ok(out)
}
