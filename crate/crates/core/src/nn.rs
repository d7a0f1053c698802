//! Small layer toolkit on top of candle: a named parameter store with seeded
//! initialization, convolution/affine layers, frozen batch norm and
//! differentiable resampling expressed as matrix products.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers, initialized from a
/// seeded generator in creation order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let map = if buffer { &mut self.buffers } else { &mut self.vars };
        if map.insert(name.to_string(), var).is_some() {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        Ok(out)
    }

    /// Uniform in ±sqrt(6/fan_in) (He-uniform).
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, data, shape, false)
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn lecun_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, data, shape, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.insert(name, data, shape, false)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, true)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name).or_else(|| self.buffers.get(name))
    }

    /// Parameters and buffers, in name order.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters/buffers in place from `values`. Names absent from
    /// `values` are left untouched unless `strict`.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::shape(format!(
                            "{name}: stored {:?}, model expects {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
                None if strict => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Bit-exact copy of every value, for snapshots and comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = c_in * k * k;
        let weight = store.he_uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], fan_in)?;
        let bias = if spec.bias {
            Some(store.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_unfolded(x, &self.weight, self.padding, self.stride, self.dilation)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Convolution as shifted views plus one matmul. Same result as
/// `Tensor::conv2d`, but the backward pass is made of matmuls and slices,
/// which is much faster on CPU than candle's transposed convolution.
pub fn conv2d_unfolded(x: &Tensor, weight: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(Error::shape(format!("conv expects {ci} input channels, got {c}")));
    }
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || w + 2 * padding < span_w {
        return Err(Error::shape(format!("input {h}×{w} smaller than the kernel")));
    }
    let ho = (h + 2 * padding - span_h) / stride + 1;
    let wo = (w + 2 * padding - span_w) / stride + 1;
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        let y = weight.reshape((co, ci))?.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        return Ok(y.reshape((n, co, h, w))?);
    }
    // room for `stride·out` rows after the largest offset
    let extra_h = (dilation * (kh - 1) + stride * ho).saturating_sub(h + 2 * padding);
    let extra_w = (dilation * (kw - 1) + stride * wo).saturating_sub(w + 2 * padding);
    let xp = x
        .pad_with_zeros(2, padding, padding + extra_h)?
        .pad_with_zeros(3, padding, padding + extra_w)?;
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        let rows = xp.narrow(2, ky * dilation, stride * ho)?;
        let rows = if stride > 1 {
            let wp = rows.dim(3)?;
            rows.reshape((n, c, ho, stride, wp))?.narrow(3, 0, 1)?.reshape((n, c, ho, wp))?
        } else {
            rows
        };
        for kx in 0..kw {
            let t = rows.narrow(3, kx * dilation, stride * wo)?;
            let t = if stride > 1 {
                t.reshape((n, c, ho, wo, stride))?.narrow(4, 0, 1)?.reshape((n, c, ho, wo))?
            } else {
                t
            };
            taps.push(t);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((n, c * kh * kw, ho * wo))?;
    let y = weight.reshape((co, ci * kh * kw))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, co, ho, wo))?)
}

/// Affine map on the last dimension: `y = x Wᵀ + b`, `W` of shape (out, in).
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.lecun_uniform(&format!("{name}.weight"), &[d_out, d_in], d_in)?;
        let bias = store.lecun_uniform(&format!("{name}.bias"), &[d_out], d_in)?;
        Ok(Self { weight, bias })
    }

    pub fn with_values(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, weight: Vec<f64>) -> Result<Self> {
        let weight = store.from_values(&format!("{name}.weight"), &[d_out, d_in], weight)?;
        let bias = store.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x` of shape (M, in) → (M, out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch norm with frozen statistics (affine parameters remain trainable).
#[derive(Clone, Debug)]
pub struct FrozenBatchNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl FrozenBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let scale = self
            .weight
            .broadcast_div(&self.running_var.affine(1.0, self.eps)?.sqrt()?)?;
        let shift = self.bias.sub(&self.running_mean.mul(&scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.relu()?.sub(&x.neg()?.relu()?.affine(slope, 0.0)?)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `softplus(z) = log(1 + e^z)` computed without overflow.
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    Ok(z.relu()?.add(&z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?)
}

/// Bilinear interpolation weights (out × in), half-pixel centres, edge clamped.
pub fn bilinear_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0f64; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Adaptive average pooling weights (out × in): bin `o` averages
/// `floor(o·in/out) .. ceil((o+1)·in/out)`.
pub fn adaptive_pool_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0f64; out * input];
    for o in 0..out {
        let start = o * input / out;
        let end = ((o + 1) * input).div_ceil(out);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * input + i] = w;
        }
    }
    m
}

/// Applies separable resampling matrices to an (N, C, H, W) tensor:
/// `Y = R_h · X · R_wᵀ` per channel.
pub fn resample(x: &Tensor, rows: &[f64], out_h: usize, cols: &[f64], out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let dev = x.device();
    let rw = Tensor::from_vec(cols.to_vec(), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let rh = Tensor::from_vec(rows.to_vec(), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let t = x.reshape((n * c * h, w))?.matmul(&rw.t()?)?; // (N·C·H, out_w)
    let t = t.reshape((n * c, h, out_w))?.transpose(1, 2)?.contiguous()?; // (N·C, out_w, H)
    let t = t.reshape((n * c * out_w, h))?.matmul(&rh.t()?)?; // (N·C·out_w, out_h)
    Ok(t.reshape((n, c, out_w, out_h))?.transpose(2, 3)?.contiguous()?)
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    resample(x, &bilinear_matrix(out_h, h), out_h, &bilinear_matrix(out_w, w), out_w)
}

pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resample(x, &adaptive_pool_matrix(out_h, h), out_h, &adaptive_pool_matrix(out_w, w), out_w)
}

/// (N, C, H, W) → (N·H·W, C) pixel rows.
pub fn to_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?.reshape((n * h * w, c))?)
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = rows.dim(D::Minus1)?;
    Ok(rows.reshape((n, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Scalar value of a 0-d or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
