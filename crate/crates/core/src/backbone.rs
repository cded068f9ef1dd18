//! Small convolutional feature extractor with hand-written backward passes.
//!
//! The trunk is fully convolutional (conv, ReLU, max pool) and runs once per
//! image; the head (fully connected layers) runs once per pooled patch and
//! emits one descriptor per patch.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::patches::SppCache;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping `size×size` max pooling with stride `size`.
    MaxPool { size: usize },
    Fc { out_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv {
        /// out×in×k×k
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool { size: usize },
    Fc {
        /// out×in
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
}

impl<T: Scalar> Layer<T> {
    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv { weight, stride, padding, .. } => LayerSpec::Conv {
                out_channels: weight.shape()[0],
                kernel: weight.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size } => LayerSpec::MaxPool { size: *size },
            Layer::Fc { weight, .. } => LayerSpec::Fc { out_dim: weight.shape()[0] },
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Input(Tensor<T>),
    Relu(Tensor<T>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
}

/// Activations recorded by [`Stack::forward`].
#[derive(Debug, Clone)]
pub struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl<T: Scalar> StackCache<T> {
    /// Max-pool argmax indices and ReLU activity patterns, used to detect
    /// whether a perturbation crossed a non-differentiable point.
    pub fn routing_signature(&self, out: &mut Vec<u64>) {
        for c in &self.layers {
            match c {
                LayerCache::MaxPool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                LayerCache::Relu(y) => {
                    out.extend(y.data().iter().map(|&v| u64::from(v > T::zero())));
                }
                LayerCache::Input(_) => {}
            }
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Weight initialization of conv and fc layers. Biases always start at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, std^2)` for every layer.
    Gaussian(f64),
    /// `N(0, 2 / fan_in)`, keeping ReLU activations at a stable scale.
    He,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Gaussian(s) => s,
            Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

impl From<f64> for Init {
    fn from(std: f64) -> Self {
        Init::Gaussian(std)
    }
}

/// Sequential stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
}

fn conv_out(len: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if len + 2 * p < k {
        return Err(shape_err(format!(
            "input extent {len} (padding {p}) smaller than kernel {k}"
        )));
    }
    Ok((len + 2 * p - k) / s + 1)
}

impl<T: Scalar> Stack<T> {
    /// Builds the stack for a given input shape, drawing weights according
    /// to `init` and zeroing biases. For convolutional stacks the
    /// input shape is `[C, H, W]` with nominal `H, W`; the trunk accepts any
    /// spatial size afterwards.
    pub fn new<R: Rng>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        init: impl Into<Init>,
        rng: &mut R,
    ) -> Result<Self> {
        let init = init.into();
        let mut sample = |shape: &[usize], fan_in: usize| -> Result<Tensor<T>> {
            let normal = Normal::new(0.0, init.std(fan_in))
                .map_err(|e| Error::InvalidArgument(format!("init std: {e}")))?;
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
            Tensor::from_vec(shape, data)
        };
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            match *spec {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 {
                        return Err(shape_err("convolution needs a C×H×W input"));
                    }
                    if stride == 0 || kernel == 0 || out_channels == 0 {
                        return Err(Error::InvalidArgument("conv sizes must be positive".into()));
                    }
                    let h = conv_out(shape[1], kernel, stride, padding)?;
                    let w = conv_out(shape[2], kernel, stride, padding)?;
                    layers.push(Layer::Conv {
                        weight: sample(&[out_channels, shape[0], kernel, kernel], shape[0] * kernel * kernel)?,
                        bias: Tensor::zeros(&[out_channels]),
                        stride,
                        padding,
                    });
                    shape = vec![out_channels, h, w];
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 {
                        return Err(shape_err("max pool needs a C×H×W input and size >= 1"));
                    }
                    if shape[1] < size || shape[2] < size {
                        return Err(shape_err("input smaller than pooling window"));
                    }
                    layers.push(Layer::MaxPool { size });
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
                LayerSpec::Fc { out_dim } => {
                    if out_dim == 0 {
                        return Err(Error::InvalidArgument("fc output must be positive".into()));
                    }
                    let fan_in = shape.iter().product();
                    layers.push(Layer::Fc {
                        weight: sample(&[out_dim, fan_in], fan_in)?,
                        bias: Tensor::zeros(&[out_dim]),
                    });
                    shape = vec![out_dim];
                }
            }
        }
        Ok(Stack {
            layers,
            input_shape: input_shape.to_vec(),
        })
    }

    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer<T>>) -> Self {
        Stack {
            layers,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Product of all convolution strides and pooling sizes.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { stride, .. } => *stride,
                Layer::MaxPool { size } => *size,
                _ => 1,
            })
            .product()
    }

    /// Output shape for an input of the given shape, validating every layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv { weight, stride, padding, .. } => {
                    let [o, i, k, _] = weight.shape()[..] else { unreachable!() };
                    if shape.len() != 3 || shape[0] != i {
                        return Err(shape_err(format!("conv expects {i} channels, input {shape:?}")));
                    }
                    vec![o, conv_out(shape[1], k, *stride, *padding)?, conv_out(shape[2], k, *stride, *padding)?]
                }
                Layer::Relu => shape,
                Layer::MaxPool { size } => {
                    if shape.len() != 3 || shape[1] < *size || shape[2] < *size {
                        return Err(shape_err(format!("input {shape:?} too small for {size}×{size} pooling")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                Layer::Fc { weight, .. } => {
                    let n: usize = shape.iter().product();
                    if n != weight.shape()[1] {
                        return Err(shape_err(format!("fc expects {} inputs, got {n}", weight.shape()[1])));
                    }
                    vec![weight.shape()[0]]
                }
            };
        }
        Ok(shape)
    }

    /// Parameter tensors in a fixed order: `weight, bias` per parametric layer.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } = l {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } = l {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    /// Names matching [`Stack::params`]: `<prefix>.<layer index>.weight|bias`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, Layer::Conv { .. } | Layer::Fc { .. }) {
                out.push(format!("{prefix}.{i}.weight"));
                out.push(format!("{prefix}.{i}.bias"));
            }
        }
        out
    }

    /// Zeroed gradient buffers matching [`Stack::params`].
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, StackCache<T>)> {
        let output_shape = self.output_shape(input.shape())?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, stride, padding } => {
                    let y = conv_forward(&x, weight, bias, *stride, *padding)?;
                    caches.push(LayerCache::Input(std::mem::replace(&mut x, y)));
                }
                Layer::Relu => {
                    x.data_mut().iter_mut().for_each(|v| {
                        if !(*v > T::zero()) {
                            *v = T::zero();
                        }
                    });
                    caches.push(LayerCache::Relu(x.clone()));
                }
                Layer::MaxPool { size } => {
                    let (y, argmax) = maxpool_forward(&x, *size)?;
                    let in_shape = x.shape().to_vec();
                    x = y;
                    caches.push(LayerCache::MaxPool { argmax, in_shape });
                }
                Layer::Fc { weight, bias } => {
                    let y = fc_forward(&x, weight, bias)?;
                    caches.push(LayerCache::Input(std::mem::replace(&mut x, y)));
                }
            }
        }
        Ok((
            x,
            StackCache {
                layers: caches,
                input_shape: input.shape().to_vec(),
                output_shape,
            },
        ))
    }

    /// Backpropagates `d_out`, adding parameter gradients into `grads`
    /// (ordered as [`Stack::params`]). Returns the input gradient, or `None`
    /// when `want_input_grad` is false.
    pub fn backward(
        &self,
        cache: &StackCache<T>,
        d_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if d_out.shape() != cache.output_shape.as_slice() {
            return Err(shape_err(format!(
                "upstream gradient {:?}, expected {:?}",
                d_out.shape(),
                cache.output_shape
            )));
        }
        if cache.layers.len() != self.layers.len() || grads.len() != self.params().len() {
            return Err(shape_err("cache or gradient buffers do not match the stack"));
        }
        let mut g = d_out.clone();
        let mut slot = grads.len();
        for (idx, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let need_dx = want_input_grad || idx > 0;
            match (layer, c) {
                (Layer::Conv { weight, stride, padding, .. }, LayerCache::Input(x)) => {
                    slot -= 2;
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    let dx = conv_backward(x, weight, *stride, *padding, &g, &mut gw[0], &mut rest[0], need_dx)?;
                    match dx {
                        Some(dx) => g = dx,
                        None => return Ok(None),
                    }
                }
                (Layer::Fc { weight, .. }, LayerCache::Input(x)) => {
                    slot -= 2;
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    let dx = fc_backward(x, weight, &g, &mut gw[0], &mut rest[0], need_dx)?;
                    match dx {
                        Some(dx) => g = dx,
                        None => return Ok(None),
                    }
                }
                (Layer::Relu, LayerCache::Relu(y)) => {
                    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                        if !(yv > T::zero()) {
                            *gv = T::zero();
                        }
                    }
                }
                (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax, in_shape }) => {
                    if !need_dx {
                        return Ok(None);
                    }
                    let mut dx = Tensor::zeros(in_shape);
                    let d = dx.data_mut();
                    for (&i, &v) in argmax.iter().zip(g.data()) {
                        d[i] += v;
                    }
                    g = dx;
                }
                _ => return Err(shape_err("cache does not match layer kinds")),
            }
        }
        if want_input_grad {
            Ok(Some(g.reshape(&cache.input_shape)?))
        } else {
            Ok(None)
        }
    }

    pub fn routing_signature(cache: &StackCache<T>) -> Vec<u64> {
        let mut v = Vec::new();
        cache.routing_signature(&mut v);
        v
    }
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (ci, h, w) = x.dims3()?;
    let [co, wi, k, _] = weight.shape()[..] else {
        return Err(shape_err("conv weight must be 4-d"));
    };
    if wi != ci {
        return Err(shape_err(format!("conv expects {wi} channels, got {ci}")));
    }
    let oh = conv_out(h, k, stride, pad)?;
    let ow = conv_out(w, k, stride, pad)?;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for o in 0..co {
        let oplane = &mut od[o * oh * ow..(o + 1) * oh * ow];
        oplane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for i in 0..ci {
            let iplane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((o * ci + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            for (ov, &iv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output columns `ox` with `0 <= ox*stride + kx - pad < len`.
fn valid_range(out_len: usize, len: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= len - 1
    let hi = if len + pad < kx + 1 {
        0
    } else {
        ((len + pad - kx - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<T>,
    d_weight: &mut Tensor<T>,
    d_bias: &mut Tensor<T>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (ci, h, w) = x.dims3()?;
    let [co, _, k, _] = weight.shape()[..] else {
        return Err(shape_err("conv weight must be 4-d"));
    };
    let (_, oh, ow) = d_out.dims3()?;
    let xd = x.data();
    let wd = weight.data();
    let gd = d_out.data();
    let mut dx = if need_dx { Some(Tensor::zeros(&[ci, h, w])) } else { None };
    for o in 0..co {
        let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
        d_bias.data_mut()[o] += gplane.iter().copied().sum();
        for i in 0..ci {
            let iplane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = wd[widx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &gd[o * oh * ow + oy * ow..o * oh * ow + (oy + 1) * ow];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            for (&gv, &iv) in grow[ox_lo..ox_hi].iter().zip(&irow[ix0..]) {
                                acc += gv * iv;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let drow = &mut dx.data_mut()[i * h * w + iy * w..i * h * w + (iy + 1) * w];
                                for (dv, &gv) in drow[ix0..].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *dv += wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                acc += grow[ox] * irow[ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx.data_mut()[i * h * w + iy * w + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    d_weight.data_mut()[widx] += acc;
                }
            }
        }
    }
    Ok(dx)
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h / size, w / size);
    if oh == 0 || ow == 0 {
        return Err(shape_err(format!("{h}×{w} input too small for {size}×{size} pooling")));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * size * w + ox * size;
                for y in oy * size..(oy + 1) * size {
                    for x in ox * size..(ox + 1) * size {
                        let idx = ch * h * w + y * w + x;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, argmax))
}

fn fc_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, n) = weight.dims2()?;
    if x.len() != n {
        return Err(shape_err(format!("fc expects {n} inputs, got {}", x.len())));
    }
    let xd = x.data();
    let out = (0..o)
        .map(|r| {
            let row = weight.row(r);
            bias.data()[r] + row.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>()
        })
        .collect();
    Tensor::from_vec(&[o], out)
}

fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
    d_weight: &mut Tensor<T>,
    d_bias: &mut Tensor<T>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (o, n) = weight.dims2()?;
    let xd = x.data();
    let gd = d_out.data();
    for r in 0..o {
        let g = gd[r];
        d_bias.data_mut()[r] += g;
        if g != T::zero() {
            for (dw, &xv) in d_weight.row_mut(r).iter_mut().zip(xd) {
                *dw += g * xv;
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); n];
    for r in 0..o {
        let g = gd[r];
        if g != T::zero() {
            for (d, &wv) in dx.iter_mut().zip(weight.row(r)) {
                *d += g * wv;
            }
        }
    }
    Ok(Some(Tensor::from_vec(x.shape(), dx)?))
}

/// Per-image cache of the trunk.
pub type TrunkCache<T> = StackCache<T>;

/// Per-patch cache of the head: the pooled map's routing plus head activations.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pub spp: SppCache,
    pub stack: StackCache<T>,
}
