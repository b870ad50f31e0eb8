//! Layer kinds. Per-sample shapes are `[features]` for dense layers and
//! `[length, channels]` (channels last) for the 1-D convolutions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

/// Hyperparameters of one layer, without its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
        l2: f64,
    },
    Conv1d {
        in_len: usize,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        l2: f64,
    },
    ConvTranspose1d {
        in_len: usize,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        l2: f64,
    },
    Dropout {
        rate: f64,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::ConvTranspose1d { .. } => "conv_transpose1d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            LayerSpec::Dense { inputs, units, l2 } => {
                if *inputs == 0 || *units == 0 {
                    return Err("dense layer needs non-zero inputs and units".into());
                }
                check_l2(*l2)
            }
            LayerSpec::Conv1d {
                in_len,
                in_channels,
                filters,
                kernel,
                stride,
                l2,
            }
            | LayerSpec::ConvTranspose1d {
                in_len,
                in_channels,
                filters,
                kernel,
                stride,
                l2,
            } => {
                if *kernel < 1 || *stride < 1 {
                    return Err("kernel and stride must be ≥ 1".into());
                }
                if *in_len == 0 || *in_channels == 0 || *filters == 0 {
                    return Err("convolution dimensions must be non-zero".into());
                }
                check_l2(*l2)
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(())
            }
            LayerSpec::Reshape { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err("reshape target must be non-empty".into());
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Flatten => Ok(()),
        }
    }

    /// Per-sample output shape for a given per-sample input shape, if the
    /// input is acceptable.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, units, .. } => (input == [*inputs]).then(|| vec![*units]),
            LayerSpec::Conv1d {
                in_len,
                in_channels,
                filters,
                stride,
                ..
            } => (input == [*in_len, *in_channels]).then(|| vec![in_len.div_ceil(*stride), *filters]),
            LayerSpec::ConvTranspose1d {
                in_len,
                in_channels,
                filters,
                stride,
                ..
            } => (input == [*in_len, *in_channels]).then(|| vec![in_len * stride, *filters]),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                (input.iter().product::<usize>() == shape.iter().product::<usize>()).then(|| shape.clone())
            }
            _ => Some(input.to_vec()),
        }
    }

    /// Shape this layer insists on, if any.
    pub fn input_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, .. } => Some(vec![*inputs]),
            LayerSpec::Conv1d {
                in_len,
                in_channels,
                ..
            }
            | LayerSpec::ConvTranspose1d {
                in_len,
                in_channels,
                ..
            } => Some(vec![*in_len, *in_channels]),
            _ => None,
        }
    }
}

fn check_l2(l2: f64) -> Result<(), String> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(format!("l2 coefficient {l2} must be ≥ 0"));
    }
    Ok(())
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    /// L2 coefficient λ; the penalty is λ·Σw².
    pub l2: f64,
}

impl<T: Real> Param<T> {
    fn zeros(shape: Vec<usize>, l2: f64) -> Self {
        let n = shape.iter().product();
        Param {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            shape,
            l2,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform ±√(6/fan_in), for layers feeding a ReLU.
    He,
    /// Uniform ±√(6/(fan_in+fan_out)), for the sigmoid output layer.
    Glorot,
}

fn fill_uniform<T: Real>(p: &mut [T], limit: f64, rng: &mut ChaCha8Rng) {
    for v in p.iter_mut() {
        *v = T::of(rng.random_range(-limit..limit));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub units: usize,
    /// `[inputs, units]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_len: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[kernel, in_channels, filters]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T> Conv<T> {
    /// Zero padding on the low side. Both directions share it so the
    /// transpose layer is the exact adjoint of the forward one.
    fn pad_left(&self, long_len: usize) -> usize {
        let short = long_len.div_ceil(self.stride);
        ((short - 1) * self.stride + self.kernel).saturating_sub(long_len) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activation<T> {
    out: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub target: Option<Vec<usize>>,
    input: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv1d(Conv<T>),
    ConvTranspose1d(Conv<T>),
    Dropout(Dropout<T>),
    Relu(Activation<T>),
    Sigmoid(Activation<T>),
    Flatten(Shape),
    Reshape(Shape),
}

/// Sigmoid outputs are clamped so they stay strictly inside (0, 1).
pub const SIGMOID_EPS: f64 = 1e-7;

impl<T: Real> Layer<T> {
    pub fn from_spec(spec: &LayerSpec) -> Result<Self, String> {
        spec.validate()?;
        Ok(match spec {
            LayerSpec::Dense { inputs, units, l2 } => Layer::Dense(Dense {
                inputs: *inputs,
                units: *units,
                weight: Param::zeros(vec![*inputs, *units], *l2),
                bias: Param::zeros(vec![*units], 0.0),
                cache: None,
            }),
            LayerSpec::Conv1d {
                in_len,
                in_channels,
                filters,
                kernel,
                stride,
                l2,
            } => Layer::Conv1d(Conv {
                in_len: *in_len,
                in_channels: *in_channels,
                filters: *filters,
                kernel: *kernel,
                stride: *stride,
                weight: Param::zeros(vec![*kernel, *in_channels, *filters], *l2),
                bias: Param::zeros(vec![*filters], 0.0),
                cache: None,
            }),
            LayerSpec::ConvTranspose1d {
                in_len,
                in_channels,
                filters,
                kernel,
                stride,
                l2,
            } => Layer::ConvTranspose1d(Conv {
                in_len: *in_len,
                in_channels: *in_channels,
                filters: *filters,
                kernel: *kernel,
                stride: *stride,
                weight: Param::zeros(vec![*kernel, *in_channels, *filters], *l2),
                bias: Param::zeros(vec![*filters], 0.0),
                cache: None,
            }),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout {
                rate: *rate,
                mask: None,
            }),
            LayerSpec::Relu => Layer::Relu(Activation { out: None }),
            LayerSpec::Sigmoid => Layer::Sigmoid(Activation { out: None }),
            LayerSpec::Flatten => Layer::Flatten(Shape {
                target: None,
                input: None,
            }),
            LayerSpec::Reshape { shape } => Layer::Reshape(Shape {
                target: Some(shape.clone()),
                input: None,
            }),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                units: d.units,
                l2: d.weight.l2,
            },
            Layer::Conv1d(c) => LayerSpec::Conv1d {
                in_len: c.in_len,
                in_channels: c.in_channels,
                filters: c.filters,
                kernel: c.kernel,
                stride: c.stride,
                l2: c.weight.l2,
            },
            Layer::ConvTranspose1d(c) => LayerSpec::ConvTranspose1d {
                in_len: c.in_len,
                in_channels: c.in_channels,
                filters: c.filters,
                kernel: c.kernel,
                stride: c.stride,
                l2: c.weight.l2,
            },
            Layer::Dropout(d) => LayerSpec::Dropout { rate: d.rate },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Sigmoid(_) => LayerSpec::Sigmoid,
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Reshape(s) => LayerSpec::Reshape {
                shape: s.target.clone().unwrap_or_default(),
            },
        }
    }

    pub fn name(&self) -> &'static str {
        self.spec().name()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv1d(c) | Layer::ConvTranspose1d(c) => vec![&c.weight, &c.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv1d(c) | Layer::ConvTranspose1d(c) => vec![&mut c.weight, &mut c.bias],
            _ => vec![],
        }
    }

    pub(crate) fn init(&mut self, init: Init, rng: &mut ChaCha8Rng) {
        let (fan_in, fan_out, w) = match self {
            Layer::Dense(d) => (d.inputs, d.units, &mut d.weight),
            Layer::Conv1d(c) | Layer::ConvTranspose1d(c) => {
                (c.kernel * c.in_channels, c.kernel * c.filters, &mut c.weight)
            }
            _ => return,
        };
        let limit = match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        fill_uniform(&mut w.value, limit, rng);
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.cache = None,
            Layer::Conv1d(c) | Layer::ConvTranspose1d(c) => c.cache = None,
            Layer::Dropout(d) => d.mask = None,
            Layer::Relu(a) | Layer::Sigmoid(a) => a.out = None,
            Layer::Flatten(s) | Layer::Reshape(s) => s.input = None,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<Vec<usize>, NnError> {
        self.spec()
            .output_shape(x.sample_shape())
            .ok_or_else(|| NnError::ShapeMismatch {
                layer: 0,
                kind: self.name(),
                expected: self.spec().input_shape().unwrap_or_default(),
                got: x.sample_shape().to_vec(),
            })
    }

    /// Forward pass without caching; dropout is the identity.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let out_shape = self.check_input(x)?;
        let batch = x.batch();
        let mut shape = vec![batch];
        shape.extend_from_slice(&out_shape);
        Ok(match self {
            Layer::Dense(d) => dense_forward(d, x, shape),
            Layer::Conv1d(c) => conv_forward(c, x, shape),
            Layer::ConvTranspose1d(c) => convt_forward(c, x, shape),
            Layer::Dropout(_) | Layer::Flatten(_) | Layer::Reshape(_) => x.clone().reshaped(shape),
            Layer::Relu(_) => {
                let data = x.data().iter().map(|v| v.max(T::zero())).collect();
                Tensor::new(shape, data)?
            }
            Layer::Sigmoid(_) => {
                let lo = T::of(SIGMOID_EPS);
                let hi = T::one() - lo;
                let data = x
                    .data()
                    .iter()
                    .map(|v| (T::one() / (T::one() + (-*v).exp())).max(lo).min(hi))
                    .collect();
                Tensor::new(shape, data)?
            }
        })
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<T>, NnError> {
        if let Layer::Dropout(d) = self {
            if train && d.rate > 0.0 {
                let keep = T::of(1.0 / (1.0 - d.rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < d.rate { T::zero() } else { keep })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                d.mask = Some(mask);
                return Tensor::new(x.shape().to_vec(), data);
            }
            d.mask = None;
            return Ok(x.clone());
        }
        let y = self.infer(x)?;
        match self {
            Layer::Dense(d) => d.cache = Some(x.clone()),
            Layer::Conv1d(c) | Layer::ConvTranspose1d(c) => c.cache = Some(x.clone()),
            Layer::Relu(a) | Layer::Sigmoid(a) => a.out = Some(y.clone()),
            Layer::Flatten(s) | Layer::Reshape(s) => s.input = Some(x.shape().to_vec()),
            Layer::Dropout(_) => unreachable!(),
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>, NnError> {
        let missing = || NnError::MissingCache { layer: 0 };
        Ok(match self {
            Layer::Dense(d) => {
                let x = d.cache.take().ok_or_else(missing)?;
                let dx = dense_backward(d, &x, dy, need_input_grad);
                d.cache = Some(x);
                dx
            }
            Layer::Conv1d(c) => {
                let x = c.cache.take().ok_or_else(missing)?;
                let dx = conv_backward(c, &x, dy, need_input_grad);
                c.cache = Some(x);
                dx
            }
            Layer::ConvTranspose1d(c) => {
                let x = c.cache.take().ok_or_else(missing)?;
                let dx = convt_backward(c, &x, dy, need_input_grad);
                c.cache = Some(x);
                dx
            }
            Layer::Dropout(d) => match &d.mask {
                Some(mask) => {
                    let data = dy.data().iter().zip(mask).map(|(g, m)| *g * *m).collect();
                    Some(Tensor::new(dy.shape().to_vec(), data)?)
                }
                None => Some(dy.clone()),
            },
            Layer::Relu(a) => {
                let y = a.out.as_ref().ok_or_else(missing)?;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                Some(Tensor::new(dy.shape().to_vec(), data)?)
            }
            Layer::Sigmoid(a) => {
                let y = a.out.as_ref().ok_or_else(missing)?;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| *g * *v * (T::one() - *v))
                    .collect();
                Some(Tensor::new(dy.shape().to_vec(), data)?)
            }
            Layer::Flatten(s) | Layer::Reshape(s) => {
                let shape = s.input.clone().ok_or_else(missing)?;
                Some(dy.clone().reshaped(shape))
            }
        })
    }
}

// ---------------------------------------------------------------- kernels
//
// All products go through `Real::gemm` on strided views; batches are folded
// into the row dimension where the layout allows it.

fn dense_forward<T: Real>(d: &Dense<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let b = x.batch();
    let mut y = Tensor::zeros(shape);
    for row in y.data_mut().chunks_exact_mut(d.units) {
        row.copy_from_slice(&d.bias.value);
    }
    unsafe {
        T::gemm(
            b,
            d.inputs,
            d.units,
            x.data().as_ptr(),
            d.inputs as isize,
            1,
            d.weight.value.as_ptr(),
            d.units as isize,
            1,
            T::one(),
            y.data_mut().as_mut_ptr(),
            d.units as isize,
            1,
        );
    }
    y
}

fn dense_backward<T: Real>(d: &mut Dense<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    let b = x.batch();
    // dW (in×units) += Xᵀ (in×b) · dY (b×units)
    unsafe {
        T::gemm(
            d.inputs,
            b,
            d.units,
            x.data().as_ptr(),
            1,
            d.inputs as isize,
            dy.data().as_ptr(),
            d.units as isize,
            1,
            T::one(),
            d.weight.grad.as_mut_ptr(),
            d.units as isize,
            1,
        );
    }
    for row in dy.data().chunks_exact(d.units) {
        for (g, v) in d.bias.grad.iter_mut().zip(row) {
            *g += *v;
        }
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        // dX (b×in) = dY (b×units) · Wᵀ (units×in)
        unsafe {
            T::gemm(
                b,
                d.units,
                d.inputs,
                dy.data().as_ptr(),
                d.units as isize,
                1,
                d.weight.value.as_ptr(),
                1,
                d.units as isize,
                T::zero(),
                dx.data_mut().as_mut_ptr(),
                d.inputs as isize,
                1,
            );
        }
        dx
    })
}

/// Output rows `t` whose tap `k` lands inside `[0, long_len)` at
/// position `t·stride + k − pad`.
fn valid_rows(k: usize, pad: usize, stride: usize, short_len: usize, long_len: usize) -> Option<(usize, usize)> {
    // t·s + k − pad ≥ 0  →  t ≥ ceil((pad − k)/s)
    let t0 = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // t·s + k − pad ≤ long_len − 1
    let limit = long_len + pad;
    if limit <= k {
        return None;
    }
    let t1 = ((limit - 1 - k) / stride + 1).min(short_len);
    (t0 < t1).then_some((t0, t1))
}

fn conv_forward_taps<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let (l_in, ci, co, s) = (c.in_len, c.in_channels, c.filters, c.stride);
    let l_out = l_in.div_ceil(s);
    let pad = c.pad_left(l_in);
    let mut y = Tensor::zeros(shape);
    for row in y.data_mut().chunks_exact_mut(co) {
        row.copy_from_slice(&c.bias.value);
    }
    for b in 0..x.batch() {
        let xb = x.sample(b).as_ptr();
        let yb = unsafe { y.data_mut().as_mut_ptr().add(b * l_out * co) };
        for k in 0..c.kernel {
            let Some((t0, t1)) = valid_rows(k, pad, s, l_out, l_in) else {
                continue;
            };
            let p0 = t0 * s + k - pad;
            unsafe {
                T::gemm(
                    t1 - t0,
                    ci,
                    co,
                    xb.add(p0 * ci),
                    (s * ci) as isize,
                    1,
                    c.weight.value.as_ptr().add(k * ci * co),
                    co as isize,
                    1,
                    T::one(),
                    yb.add(t0 * co),
                    co as isize,
                    1,
                );
            }
        }
    }
    y
}

fn conv_backward_taps<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    let (l_in, ci, co, s) = (c.in_len, c.in_channels, c.filters, c.stride);
    let l_out = l_in.div_ceil(s);
    let pad = c.pad_left(l_in);
    let mut dx = need_dx.then(|| Tensor::<T>::zeros(x.shape().to_vec()));
    for b in 0..x.batch() {
        let xb = x.sample(b).as_ptr();
        let dyb = dy.sample(b);
        for row in dyb.chunks_exact(co) {
            for (g, v) in c.bias.grad.iter_mut().zip(row) {
                *g += *v;
            }
        }
        for k in 0..c.kernel {
            let Some((t0, t1)) = valid_rows(k, pad, s, l_out, l_in) else {
                continue;
            };
            let p0 = t0 * s + k - pad;
            let m = t1 - t0;
            unsafe {
                // dW_k (ci×co) += X_kᵀ (ci×m) · dY (m×co)
                T::gemm(
                    ci,
                    m,
                    co,
                    xb.add(p0 * ci),
                    1,
                    (s * ci) as isize,
                    dyb.as_ptr().add(t0 * co),
                    co as isize,
                    1,
                    T::one(),
                    c.weight.grad.as_mut_ptr().add(k * ci * co),
                    co as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    // dX_k (m×ci) += dY (m×co) · W_kᵀ (co×ci)
                    T::gemm(
                        m,
                        co,
                        ci,
                        dyb.as_ptr().add(t0 * co),
                        co as isize,
                        1,
                        c.weight.value.as_ptr().add(k * ci * co),
                        1,
                        co as isize,
                        T::one(),
                        dx.data_mut().as_mut_ptr().add(b * l_in * ci + p0 * ci),
                        (s * ci) as isize,
                        1,
                    );
                }
            }
        }
    }
    dx
}

fn convt_forward_taps<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let (l_in, ci, co, s) = (c.in_len, c.in_channels, c.filters, c.stride);
    let l_out = l_in * s;
    let pad = c.pad_left(l_out);
    let mut y = Tensor::zeros(shape);
    for row in y.data_mut().chunks_exact_mut(co) {
        row.copy_from_slice(&c.bias.value);
    }
    for b in 0..x.batch() {
        let xb = x.sample(b).as_ptr();
        let yb = unsafe { y.data_mut().as_mut_ptr().add(b * l_out * co) };
        for k in 0..c.kernel {
            let Some((t0, t1)) = valid_rows(k, pad, s, l_in, l_out) else {
                continue;
            };
            let p0 = t0 * s + k - pad;
            unsafe {
                // Y rows p = t·s + k − pad (stride s) += X (m×ci) · W_k (ci×co)
                T::gemm(
                    t1 - t0,
                    ci,
                    co,
                    xb.add(t0 * ci),
                    ci as isize,
                    1,
                    c.weight.value.as_ptr().add(k * ci * co),
                    co as isize,
                    1,
                    T::one(),
                    yb.add(p0 * co),
                    (s * co) as isize,
                    1,
                );
            }
        }
    }
    y
}

fn convt_backward_taps<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    let (l_in, ci, co, s) = (c.in_len, c.in_channels, c.filters, c.stride);
    let l_out = l_in * s;
    let pad = c.pad_left(l_out);
    let mut dx = need_dx.then(|| Tensor::<T>::zeros(x.shape().to_vec()));
    for b in 0..x.batch() {
        let xb = x.sample(b).as_ptr();
        let dyb = dy.sample(b);
        for row in dyb.chunks_exact(co) {
            for (g, v) in c.bias.grad.iter_mut().zip(row) {
                *g += *v;
            }
        }
        for k in 0..c.kernel {
            let Some((t0, t1)) = valid_rows(k, pad, s, l_in, l_out) else {
                continue;
            };
            let p0 = t0 * s + k - pad;
            let m = t1 - t0;
            unsafe {
                // dW_k (ci×co) += Xᵀ (ci×m) · dY_p (m×co)
                T::gemm(
                    ci,
                    m,
                    co,
                    xb.add(t0 * ci),
                    1,
                    ci as isize,
                    dyb.as_ptr().add(p0 * co),
                    (s * co) as isize,
                    1,
                    T::one(),
                    c.weight.grad.as_mut_ptr().add(k * ci * co),
                    co as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    // dX (m×ci) += dY_p (m×co) · W_kᵀ (co×ci)
                    T::gemm(
                        m,
                        co,
                        ci,
                        dyb.as_ptr().add(p0 * co),
                        (s * co) as isize,
                        1,
                        c.weight.value.as_ptr().add(k * ci * co),
                        1,
                        co as isize,
                        T::one(),
                        dx.data_mut().as_mut_ptr().add(b * l_in * ci + t0 * ci),
                        ci as isize,
                        1,
                    );
                }
            }
        }
    }
    dx
}

// Narrow layers (a handful of input or output channels) starve the per-tap
// products above, so they go through an explicit tap matrix instead: one
// `[short_len, kernel·ch]` buffer per sample and a single product.

const NARROW: usize = 8;

fn is_narrow<T>(c: &Conv<T>) -> bool {
    c.in_channels.min(c.filters) < NARROW
}

fn conv_forward<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    if is_narrow(c) {
        conv_forward_cols(c, x, shape)
    } else {
        conv_forward_taps(c, x, shape)
    }
}

fn conv_backward<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    if is_narrow(c) {
        conv_backward_cols(c, x, dy, need_dx)
    } else {
        conv_backward_taps(c, x, dy, need_dx)
    }
}

fn convt_forward<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    if is_narrow(c) {
        convt_forward_cols(c, x, shape)
    } else {
        convt_forward_taps(c, x, shape)
    }
}

fn convt_backward<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    if is_narrow(c) {
        convt_backward_cols(c, x, dy, need_dx)
    } else {
        convt_backward_taps(c, x, dy, need_dx)
    }
}

/// Geometry shared by the tap-matrix helpers: `long` rows are addressed as
/// `t·stride + j − pad` for short row `t` and tap `j`.
#[derive(Clone, Copy)]
struct Taps {
    kernel: usize,
    stride: usize,
    pad: usize,
    short: usize,
    long: usize,
    ch: usize,
}

impl Taps {
    fn width(&self) -> usize {
        self.kernel * self.ch
    }

    fn position(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j)
            .checked_sub(self.pad)
            .filter(|p| *p < self.long)
    }

    fn gather<T: Real>(&self, src: &[T], out: &mut [T]) {
        let ch = self.ch;
        for (t, row) in out.chunks_exact_mut(self.width()).enumerate() {
            for (j, cell) in row.chunks_exact_mut(ch).enumerate() {
                match self.position(t, j) {
                    Some(p) => cell.copy_from_slice(&src[p * ch..(p + 1) * ch]),
                    None => cell.fill(T::zero()),
                }
            }
        }
    }

    fn scatter_add<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        let ch = self.ch;
        for (t, row) in cols.chunks_exact(self.width()).enumerate() {
            for (j, cell) in row.chunks_exact(ch).enumerate() {
                if let Some(p) = self.position(t, j) {
                    for (d, v) in dst[p * ch..(p + 1) * ch].iter_mut().zip(cell) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn add_bias_grad<T: Real>(bias: &mut [T], dy: &[T]) {
    for row in dy.chunks_exact(bias.len()) {
        for (g, v) in bias.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

fn conv_forward_cols<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let (ci, co) = (c.in_channels, c.filters);
    let taps = Taps {
        kernel: c.kernel,
        stride: c.stride,
        pad: c.pad_left(c.in_len),
        short: c.in_len.div_ceil(c.stride),
        long: c.in_len,
        ch: ci,
    };
    let w = taps.width();
    let mut y = Tensor::zeros(shape);
    for row in y.data_mut().chunks_exact_mut(co) {
        row.copy_from_slice(&c.bias.value);
    }
    let mut cols = vec![T::zero(); taps.short * w];
    for b in 0..x.batch() {
        taps.gather(x.sample(b), &mut cols);
        unsafe {
            T::gemm(
                taps.short,
                w,
                co,
                cols.as_ptr(),
                w as isize,
                1,
                c.weight.value.as_ptr(),
                co as isize,
                1,
                T::one(),
                y.data_mut().as_mut_ptr().add(b * taps.short * co),
                co as isize,
                1,
            );
        }
    }
    y
}

fn conv_backward_cols<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    let (ci, co) = (c.in_channels, c.filters);
    let taps = Taps {
        kernel: c.kernel,
        stride: c.stride,
        pad: c.pad_left(c.in_len),
        short: c.in_len.div_ceil(c.stride),
        long: c.in_len,
        ch: ci,
    };
    let w = taps.width();
    let mut dx = need_dx.then(|| Tensor::<T>::zeros(x.shape().to_vec()));
    let mut cols = vec![T::zero(); taps.short * w];
    let mut dcols = vec![T::zero(); if need_dx { taps.short * w } else { 0 }];
    for b in 0..x.batch() {
        let dyb = dy.sample(b);
        add_bias_grad(&mut c.bias.grad, dyb);
        taps.gather(x.sample(b), &mut cols);
        unsafe {
            // dW (k·ci × co) += colsᵀ · dY
            T::gemm(
                w,
                taps.short,
                co,
                cols.as_ptr(),
                1,
                w as isize,
                dyb.as_ptr(),
                co as isize,
                1,
                T::one(),
                c.weight.grad.as_mut_ptr(),
                co as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            unsafe {
                // dcols (short × k·ci) = dY · Wᵀ
                T::gemm(
                    taps.short,
                    co,
                    w,
                    dyb.as_ptr(),
                    co as isize,
                    1,
                    c.weight.value.as_ptr(),
                    1,
                    co as isize,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    w as isize,
                    1,
                );
            }
            let n = c.in_len * ci;
            taps.scatter_add(&dcols, &mut dx.data_mut()[b * n..(b + 1) * n]);
        }
    }
    dx
}

/// `[kernel, ci, co]` weights as a `[ci, kernel·co]` matrix.
fn channel_major<T: Real>(w: &[T], kernel: usize, ci: usize, co: usize) -> Vec<T> {
    let mut v = vec![T::zero(); w.len()];
    for j in 0..kernel {
        for r in 0..ci {
            let src = &w[(j * ci + r) * co..(j * ci + r + 1) * co];
            v[r * kernel * co + j * co..][..co].copy_from_slice(src);
        }
    }
    v
}

fn convt_forward_cols<T: Real>(c: &Conv<T>, x: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let (ci, co) = (c.in_channels, c.filters);
    let l_out = c.in_len * c.stride;
    let taps = Taps {
        kernel: c.kernel,
        stride: c.stride,
        pad: c.pad_left(l_out),
        short: c.in_len,
        long: l_out,
        ch: co,
    };
    let w = taps.width();
    let v = channel_major(&c.weight.value, c.kernel, ci, co);
    let mut y = Tensor::zeros(shape);
    for row in y.data_mut().chunks_exact_mut(co) {
        row.copy_from_slice(&c.bias.value);
    }
    let mut z = vec![T::zero(); taps.short * w];
    for b in 0..x.batch() {
        unsafe {
            T::gemm(
                taps.short,
                ci,
                w,
                x.sample(b).as_ptr(),
                ci as isize,
                1,
                v.as_ptr(),
                w as isize,
                1,
                T::zero(),
                z.as_mut_ptr(),
                w as isize,
                1,
            );
        }
        let n = l_out * co;
        taps.scatter_add(&z, &mut y.data_mut()[b * n..(b + 1) * n]);
    }
    y
}

fn convt_backward_cols<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
    let (ci, co) = (c.in_channels, c.filters);
    let l_out = c.in_len * c.stride;
    let taps = Taps {
        kernel: c.kernel,
        stride: c.stride,
        pad: c.pad_left(l_out),
        short: c.in_len,
        long: l_out,
        ch: co,
    };
    let w = taps.width();
    let v = channel_major(&c.weight.value, c.kernel, ci, co);
    let mut dv = vec![T::zero(); v.len()];
    let mut dx = need_dx.then(|| Tensor::<T>::zeros(x.shape().to_vec()));
    let mut g = vec![T::zero(); taps.short * w];
    for b in 0..x.batch() {
        let dyb = dy.sample(b);
        add_bias_grad(&mut c.bias.grad, dyb);
        taps.gather(dyb, &mut g);
        unsafe {
            // dV (ci × k·co) += Xᵀ · G
            T::gemm(
                ci,
                taps.short,
                w,
                x.sample(b).as_ptr(),
                1,
                ci as isize,
                g.as_ptr(),
                w as isize,
                1,
                T::one(),
                dv.as_mut_ptr(),
                w as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                // dX (short × ci) = G · Vᵀ
                T::gemm(
                    taps.short,
                    w,
                    ci,
                    g.as_ptr(),
                    w as isize,
                    1,
                    v.as_ptr(),
                    1,
                    w as isize,
                    T::zero(),
                    dx.data_mut().as_mut_ptr().add(b * taps.short * ci),
                    ci as isize,
                    1,
                );
            }
        }
    }
    for j in 0..c.kernel {
        for r in 0..ci {
            let src = &dv[r * w + j * co..][..co];
            for (d, s) in c.weight.grad[(j * ci + r) * co..][..co].iter_mut().zip(src) {
                *d += *s;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn valid_rows_cover_exactly_the_in_range_taps() {
        for (l_long, s, k) in [(16usize, 4usize, 16usize), (9, 2, 3), (10, 1, 16), (7, 3, 5)] {
            let l_short = l_long.div_ceil(s);
            let pad = ((l_short - 1) * s + k).saturating_sub(l_long) / 2;
            for tap in 0..k {
                let brute: Vec<usize> = (0..l_short)
                    .filter(|t| {
                        let p = (t * s + tap) as isize - pad as isize;
                        p >= 0 && (p as usize) < l_long
                    })
                    .collect();
                match valid_rows(tap, pad, s, l_short, l_long) {
                    Some((t0, t1)) => assert_eq!(brute, (t0..t1).collect::<Vec<_>>()),
                    None => assert!(brute.is_empty()),
                }
            }
        }
    }

    #[test]
    fn conv_same_padding_length() {
        let spec = LayerSpec::Conv1d {
            in_len: 4096,
            in_channels: 1,
            filters: 2,
            kernel: 16,
            stride: 4,
            l2: 0.0,
        };
        assert_eq!(spec.output_shape(&[4096, 1]), Some(vec![1024, 2]));
        let t = LayerSpec::ConvTranspose1d {
            in_len: 64,
            in_channels: 32,
            filters: 32,
            kernel: 16,
            stride: 4,
            l2: 0.0,
        };
        assert_eq!(t.output_shape(&[64, 32]), Some(vec![256, 32]));
    }

    fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (short, ci, co, k, s) in [(8usize, 2usize, 3usize, 16usize, 4usize), (5, 1, 2, 3, 2), (7, 3, 1, 5, 1), (4, 2, 2, 2, 3)] {
            let long = short * s;
            let conv_spec = LayerSpec::Conv1d { in_len: long, in_channels: ci, filters: co, kernel: k, stride: s, l2: 0.0 };
            let convt_spec = LayerSpec::ConvTranspose1d { in_len: short, in_channels: co, filters: ci, kernel: k, stride: s, l2: 0.0 };
            let mut conv = Layer::<f64>::from_spec(&conv_spec).unwrap();
            let mut convt = Layer::<f64>::from_spec(&convt_spec).unwrap();
            let w = uniform(k * ci * co, &mut rng);
            conv.params_mut()[0].value = w.clone();
            let wt = &mut convt.params_mut()[0].value;
            for tap in 0..k {
                for a in 0..ci {
                    for b in 0..co {
                        wt[(tap * co + b) * ci + a] = w[(tap * ci + a) * co + b];
                    }
                }
            }
            let x = Tensor::new(vec![1, long, ci], uniform(long * ci, &mut rng)).unwrap();
            let y = Tensor::new(vec![1, short, co], uniform(short * co, &mut rng)).unwrap();
            let cx = conv.infer(&x).unwrap();
            let ty = convt.infer(&y).unwrap();
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn dropout_mean_matches_inference() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Layer::<f64>::from_spec(&LayerSpec::Dropout { rate: 0.2 }).unwrap();
        let x = Tensor::new(vec![1, 8], vec![1.0, 2.0, -0.5, 3.0, 0.25, -1.5, 0.8, 4.0]).unwrap();
        let reference = layer.infer(&x).unwrap();
        let draws = 10_000;
        let mut sum = vec![0.0; 8];
        for _ in 0..draws {
            let y = layer.forward(&x, true, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, r) in sum.iter().zip(reference.data()) {
            let mean = s / draws as f64;
            assert!((mean - r).abs() <= 0.02 * r.abs(), "{mean} vs {r}");
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dense { inputs: 3, units: 2, l2: -1.0 }.validate().is_err());
        let zero_kernel = LayerSpec::Conv1d {
            in_len: 8,
            in_channels: 1,
            filters: 1,
            kernel: 0,
            stride: 1,
            l2: 0.0,
        };
        assert!(zero_kernel.validate().is_err());
    }

    #[test]
    fn tap_matrix_path_matches_per_tap_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let transpose = trial % 2 == 1;
            let in_len = rng.random_range(3..20);
            let ci = rng.random_range(1..6);
            let co = rng.random_range(1..6);
            let kernel = rng.random_range(1..7);
            let stride = rng.random_range(1..5);
            let spec = if transpose {
                LayerSpec::ConvTranspose1d { in_len, in_channels: ci, filters: co, kernel, stride, l2: 0.0 }
            } else {
                LayerSpec::Conv1d { in_len, in_channels: ci, filters: co, kernel, stride, l2: 0.0 }
            };
            let mut layer = Layer::<f64>::from_spec(&spec).unwrap();
            layer.init(Init::Glorot, &mut rng);
            let out_shape = spec.output_shape(&[in_len, ci]).unwrap();
            let batch = 2;
            let x = Tensor::new(vec![batch, in_len, ci], uniform(batch * in_len * ci, &mut rng)).unwrap();
            let mut ys = vec![batch];
            ys.extend(&out_shape);
            let dy = Tensor::new(ys.clone(), uniform(ys.iter().product(), &mut rng)).unwrap();
            let (Layer::Conv1d(c) | Layer::ConvTranspose1d(c)) = &mut layer else { unreachable!() };
            let mut a = c.clone();
            let mut b = c.clone();
            let (ya, yb, dxa, dxb) = if transpose {
                (
                    convt_forward_taps(&a, &x, ys.clone()),
                    convt_forward_cols(&b, &x, ys.clone()),
                    convt_backward_taps(&mut a, &x, &dy, true).unwrap(),
                    convt_backward_cols(&mut b, &x, &dy, true).unwrap(),
                )
            } else {
                (
                    conv_forward_taps(&a, &x, ys.clone()),
                    conv_forward_cols(&b, &x, ys.clone()),
                    conv_backward_taps(&mut a, &x, &dy, true).unwrap(),
                    conv_backward_cols(&mut b, &x, &dy, true).unwrap(),
                )
            };
            let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12);
            assert!(close(ya.data(), yb.data()), "forward, trial {trial}");
            assert!(close(dxa.data(), dxb.data()), "input grad, trial {trial}");
            assert!(close(&a.weight.grad, &b.weight.grad), "weight grad, trial {trial}");
            assert!(close(&a.bias.grad, &b.bias.grad), "bias grad, trial {trial}");
        }
    }
}
