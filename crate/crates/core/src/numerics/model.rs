use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::archspec::{ArchSpec, LayerKind};
use crate::{Error, Result, Scalar};

/// One stage of a member network. Parameterized layers refer to entries of
/// [`MemberModel::params`] by index.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine {
        weight: usize,
        bias: usize,
        in_dim: usize,
        out_dim: usize,
    },
    /// 3×3 convolution with zero padding 1.
    Conv3x3 {
        weight: usize,
        bias: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Relu {
        size: usize,
    },
    GlobalAvg {
        channels: usize,
        hw: (usize, usize),
    },
}

impl Layer {
    fn in_size(&self) -> usize {
        match *self {
            Layer::Affine { in_dim, .. } => in_dim,
            Layer::Conv3x3 { in_ch, in_hw, .. } => in_ch * in_hw.0 * in_hw.1,
            Layer::Relu { size } => size,
            Layer::GlobalAvg { channels, hw } => channels * hw.0 * hw.1,
        }
    }

    fn out_size(&self) -> usize {
        match *self {
            Layer::Affine { out_dim, .. } => out_dim,
            Layer::Conv3x3 { out_ch, out_hw, .. } => out_ch * out_hw.0 * out_hw.1,
            Layer::Relu { size } => size,
            Layer::GlobalAvg { channels, .. } => channels,
        }
    }
}

/// A learnable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    /// Weight decay applies to conv and fully-connected weights only.
    pub decay: bool,
    pub fan_in: usize,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, shape: &[usize], decay: bool, fan_in: usize) -> Self {
        Param {
            name,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
            decay,
            fan_in,
        }
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    batch: usize,
    /// Input of every layer, flattened per sample.
    inputs: Vec<Vec<T>>,
}

/// Parameters, layer graph and seed of one member network.
#[derive(Clone, Debug)]
pub struct MemberModel<T> {
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    input_shape: Vec<usize>,
    num_classes: usize,
    member_index: usize,
    rng_seed: u64,
    cache: Option<Cache<T>>,
}

/// Incrementally assembles a [`MemberModel`].
struct Builder<T> {
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Builder<T> {
    fn affine(&mut self, in_dim: usize, out_dim: usize) {
        let i = self.layers.len();
        let weight = self.params.len();
        self.params
            .push(Param::new(format!("layer{i}.weight"), &[out_dim, in_dim], true, in_dim));
        self.params.push(Param::new(format!("layer{i}.bias"), &[out_dim], false, in_dim));
        self.layers.push(Layer::Affine {
            weight,
            bias: weight + 1,
            in_dim,
            out_dim,
        });
    }

    fn conv(&mut self, in_ch: usize, out_ch: usize, stride: usize, in_hw: (usize, usize)) -> (usize, usize) {
        let i = self.layers.len();
        let weight = self.params.len();
        let fan_in = in_ch * 9;
        self.params
            .push(Param::new(format!("layer{i}.weight"), &[out_ch, in_ch, 3, 3], true, fan_in));
        self.params.push(Param::new(format!("layer{i}.bias"), &[out_ch], false, fan_in));
        let out_hw = (in_hw.0.div_ceil(stride), in_hw.1.div_ceil(stride));
        self.layers.push(Layer::Conv3x3 {
            weight,
            bias: weight + 1,
            in_ch,
            out_ch,
            stride,
            in_hw,
            out_hw,
        });
        out_hw
    }

    fn relu(&mut self, size: usize) {
        self.layers.push(Layer::Relu { size });
    }
}

impl<T: Scalar> MemberModel<T> {
    /// Fully-connected ReLU network. Parameters start at zero; call
    /// [`MemberModel::init_params`].
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::validation("MLP widths must be positive"));
        }
        let mut b = Builder {
            layers: Vec::new(),
            params: Vec::new(),
        };
        let mut prev = input_dim;
        for &h in hidden {
            b.affine(prev, h);
            b.relu(h);
            prev = h;
        }
        b.affine(prev, num_classes);
        Ok(Self::assemble(b, vec![input_dim], num_classes))
    }

    /// Conv stages (3×3, ReLU; the first stage keeps resolution, later stages
    /// halve it), global average pooling and a linear classifier.
    pub fn conv_net(input_shape: [usize; 3], widths: &[usize], num_classes: usize) -> Result<Self> {
        if input_shape.contains(&0) || widths.is_empty() || widths.contains(&0) || num_classes == 0 {
            return Err(Error::validation("conv net dimensions must be positive"));
        }
        let mut b = Builder {
            layers: Vec::new(),
            params: Vec::new(),
        };
        let mut ch = input_shape[0];
        let mut hw = (input_shape[1], input_shape[2]);
        for (i, &w) in widths.iter().enumerate() {
            hw = b.conv(ch, w, if i == 0 { 1 } else { 2 }, hw);
            b.relu(w * hw.0 * hw.1);
            ch = w;
        }
        b.layers.push(Layer::GlobalAvg { channels: ch, hw });
        b.affine(ch, num_classes);
        Ok(Self::assemble(b, input_shape.to_vec(), num_classes))
    }

    /// Builds the toy network described by a generic-family spec: 3×3 convs,
    /// a global pool, and fully-connected layers, with ReLU after every
    /// layer except the last.
    pub fn from_arch(spec: &ArchSpec) -> Result<Self> {
        let layers = spec
            .explicit_layers
            .as_ref()
            .ok_or_else(|| Error::validation("member networks are built from explicit layer lists"))?;
        spec.validate()?;
        let mut b = Builder {
            layers: Vec::new(),
            params: Vec::new(),
        };
        let is_image = layers[0].kind != LayerKind::FullyConnected;
        let res = spec.input_resolution as usize;
        let input_shape = if is_image {
            vec![spec.input_channels as usize, res, res]
        } else {
            vec![layers[0].in_channels as usize]
        };
        let mut hw = (res, res);
        let mut flat = if is_image { None } else { Some(layers[0].in_channels as usize) };
        let mut channels = input_shape[0];
        for (i, l) in layers.iter().enumerate() {
            let last = i + 1 == layers.len();
            if l.in_channels as usize != channels {
                return Err(Error::validation(format!(
                    "layer {i} expects {} input channels, previous layer yields {channels}",
                    l.in_channels
                )));
            }
            match l.kind {
                LayerKind::Conv if l.kernel == 3 && l.groups == 1 && flat.is_none() => {
                    hw = b.conv(channels, l.out_channels as usize, l.stride as usize, hw);
                    channels = l.out_channels as usize;
                    if !last {
                        b.relu(channels * hw.0 * hw.1);
                    }
                }
                LayerKind::GlobalPool if flat.is_none() => {
                    b.layers.push(Layer::GlobalAvg { channels, hw });
                    flat = Some(channels);
                }
                LayerKind::FullyConnected if flat.is_some() => {
                    b.affine(channels, l.out_channels as usize);
                    channels = l.out_channels as usize;
                    flat = Some(channels);
                    if !last {
                        b.relu(channels);
                    }
                }
                _ => {
                    return Err(Error::validation(format!(
                        "layer {i} ({:?}, K={}, d={}) is not supported by the toy member runtime",
                        l.kind, l.kernel, l.groups
                    )))
                }
            }
        }
        if flat.is_none() || channels != spec.num_classes as usize {
            return Err(Error::validation("member network must end in a classifier over num_classes"));
        }
        Ok(Self::assemble(b, input_shape, spec.num_classes as usize))
    }

    fn assemble(b: Builder<T>, input_shape: Vec<usize>, num_classes: usize) -> Self {
        MemberModel {
            layers: b.layers,
            params: b.params,
            input_shape,
            num_classes,
            member_index: 0,
            rng_seed: 0,
            cache: None,
        }
    }

    pub fn with_member_index(mut self, index: usize) -> Self {
        self.member_index = index;
        self
    }

    /// Kaiming-normal weights (`std = √(2/fan_in)`), zero biases, drawn in
    /// parameter declaration order from a stream seeded by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.decay {
                let std = (2.0 / p.fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in p.value.data_mut() {
                    *x = T::of(normal.sample(&mut rng));
                }
            } else {
                p.value.fill(T::zero());
            }
            p.grad.fill(T::zero());
            p.momentum.fill(T::zero());
        }
        self.rng_seed = seed;
        self.cache = None;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn member_index(&self) -> usize {
        self.member_index
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.decay).collect()
    }

    /// Flattened final classifier weight.
    pub fn classifier_weights(&self) -> Vec<T> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Affine { weight, .. } => Some(self.params[*weight].value.data().to_vec()),
                _ => None,
            })
            .unwrap_or_default()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let per_sample: usize = self.input_shape.iter().product();
        if batch.shape().len() < 2 || batch.row_len() != per_sample {
            return Err(Error::validation(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(batch.rows())
    }

    /// Forward pass that caches activations for [`MemberModel::backward`].
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let out = self.run(batch.data().to_vec(), n, Some(&mut inputs));
        self.cache = Some(Cache { batch: n, inputs });
        Tensor::new(vec![n, self.num_classes], out)
    }

    /// Forward pass without caching; safe on a shared reference.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        let out = self.run(batch.data().to_vec(), n, None);
        Tensor::new(vec![n, self.num_classes], out)
    }

    fn run(&self, mut x: Vec<T>, n: usize, mut cache: Option<&mut Vec<Vec<T>>>) -> Vec<T> {
        for layer in &self.layers {
            let y = self.layer_forward(layer, &x, n);
            match cache.as_deref_mut() {
                Some(c) => c.push(std::mem::replace(&mut x, y)),
                None => x = y,
            }
        }
        x
    }

    fn layer_forward(&self, layer: &Layer, x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * layer.out_size()];
        match *layer {
            Layer::Affine {
                weight,
                bias,
                in_dim,
                out_dim,
            } => {
                let w = self.params[weight].value.data();
                let b = self.params[bias].value.data();
                for (xr, yr) in x.chunks_exact(in_dim).zip(y.chunks_exact_mut(out_dim)) {
                    for o in 0..out_dim {
                        yr[o] = b[o] + dot(xr, &w[o * in_dim..(o + 1) * in_dim]);
                    }
                }
            }
            Layer::Conv3x3 {
                weight,
                bias,
                in_ch,
                out_ch,
                stride,
                in_hw,
                out_hw,
            } => {
                let w = self.params[weight].value.data();
                let b = self.params[bias].value.data();
                let p = out_hw.0 * out_hw.1;
                let k = in_ch * 9;
                let mut cols = vec![T::zero(); k * p];
                for (xs, ys) in x.chunks_exact(layer.in_size()).zip(y.chunks_exact_mut(out_ch * p)) {
                    im2col(xs, in_ch, in_hw, out_hw, stride, &mut cols);
                    for o in 0..out_ch {
                        let yo = &mut ys[o * p..(o + 1) * p];
                        yo.iter_mut().for_each(|v| *v = b[o]);
                        for (kk, &wk) in w[o * k..(o + 1) * k].iter().enumerate() {
                            axpy(wk, &cols[kk * p..(kk + 1) * p], yo);
                        }
                    }
                }
            }
            Layer::Relu { .. } => {
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = if xi > T::zero() { xi } else { T::zero() };
                }
            }
            Layer::GlobalAvg { channels, hw } => {
                let area = hw.0 * hw.1;
                let scale = T::one() / T::of(area as f64);
                for (xs, ys) in x.chunks_exact(channels * area).zip(y.chunks_exact_mut(channels)) {
                    for c in 0..channels {
                        ys[c] = xs[c * area..(c + 1) * area].iter().copied().sum::<T>() * scale;
                    }
                }
            }
        }
        y
    }

    /// Backpropagates `upstream = ∂L/∂logits` through the cached forward pass
    /// and overwrites every parameter gradient. The cache is consumed.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        if upstream.shape() != [cache.batch, self.num_classes] {
            return Err(Error::validation(format!(
                "upstream gradient shape {:?} != [{}, {}]",
                upstream.shape(),
                cache.batch,
                self.num_classes
            )));
        }
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        let n = cache.batch;
        let mut g = upstream.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let need_input_grad = i > 0;
            g = layer_backward(layer, &mut self.params, x, &g, n, need_input_grad);
        }
        Ok(())
    }

    /// Nesterov SGD: decayed tensors get `g ← g + wd·θ`, then `v ← μv + g`,
    /// `θ ← θ − lr·(g + μv)`.
    pub fn sgd_step(&mut self, lr: T, momentum: T, wd: T, decay_mask: &[bool]) -> Result<()> {
        if decay_mask.len() != self.params.len() {
            return Err(Error::validation(format!(
                "decay mask has {} entries for {} parameter tensors",
                decay_mask.len(),
                self.params.len()
            )));
        }
        for (p, &decay) in self.params.iter_mut().zip(decay_mask) {
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            let vel = p.momentum.data_mut();
            for ((t, &g0), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = if decay { g0 + wd * *t } else { g0 };
                *v = momentum * *v + g;
                *t = *t - lr * (g + momentum * *v);
            }
        }
        Ok(())
    }
}

fn layer_backward<T: Scalar>(
    layer: &Layer,
    params: &mut [Param<T>],
    x: &[T],
    g: &[T],
    n: usize,
    need_input_grad: bool,
) -> Vec<T> {
    let mut dx = if need_input_grad {
        vec![T::zero(); n * layer.in_size()]
    } else {
        Vec::new()
    };
    match *layer {
        Layer::Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        } => {
            let mut dw = std::mem::take(&mut params[weight].grad).into_data();
            let db = params[bias].grad.data_mut();
            for (xr, gr) in x.chunks_exact(in_dim).zip(g.chunks_exact(out_dim)) {
                for (o, &go) in gr.iter().enumerate() {
                    db[o] = db[o] + go;
                    axpy(go, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
                }
            }
            let wt = params[weight].value.data();
            if need_input_grad {
                for (dxr, gr) in dx.chunks_exact_mut(in_dim).zip(g.chunks_exact(out_dim)) {
                    for (o, &go) in gr.iter().enumerate() {
                        axpy(go, &wt[o * in_dim..(o + 1) * in_dim], dxr);
                    }
                }
            }
            params[weight].grad = Tensor::new(vec![out_dim, in_dim], dw).expect("shape kept");
        }
        Layer::Conv3x3 {
            weight,
            bias,
            in_ch,
            out_ch,
            stride,
            in_hw,
            out_hw,
        } => {
            let p = out_hw.0 * out_hw.1;
            let k = in_ch * 9;
            let in_size = layer.in_size();
            let mut cols = vec![T::zero(); k * p];
            let mut dcols = vec![T::zero(); k * p];
            let shape = params[weight].grad.shape().to_vec();
            let mut dw = std::mem::take(&mut params[weight].grad).into_data();
            let mut db = std::mem::take(&mut params[bias].grad).into_data();
            {
                for (s, (xs, gs)) in x.chunks_exact(in_size).zip(g.chunks_exact(out_ch * p)).enumerate() {
                    im2col(xs, in_ch, in_hw, out_hw, stride, &mut cols);
                    for o in 0..out_ch {
                        let go = &gs[o * p..(o + 1) * p];
                        db[o] = db[o] + go.iter().copied().sum::<T>();
                        for kk in 0..k {
                            dw[o * k + kk] = dw[o * k + kk] + dot(go, &cols[kk * p..(kk + 1) * p]);
                        }
                    }
                    if need_input_grad {
                        let w = params[weight].value.data();
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        for o in 0..out_ch {
                            let go = &gs[o * p..(o + 1) * p];
                            for kk in 0..k {
                                axpy(w[o * k + kk], go, &mut dcols[kk * p..(kk + 1) * p]);
                            }
                        }
                        col2im(&dcols, in_ch, in_hw, out_hw, stride, &mut dx[s * in_size..(s + 1) * in_size]);
                    }
                }
            }
            params[weight].grad = Tensor::new(shape, dw).expect("shape kept");
            params[bias].grad = Tensor::new(vec![out_ch], db).expect("shape kept");
        }
        Layer::Relu { .. } => {
            if need_input_grad {
                for ((d, &xi), &gi) in dx.iter_mut().zip(x).zip(g) {
                    *d = if xi > T::zero() { gi } else { T::zero() };
                }
            }
        }
        Layer::GlobalAvg { channels, hw } => {
            if need_input_grad {
                let area = hw.0 * hw.1;
                let scale = T::one() / T::of(area as f64);
                for (ds, gs) in dx.chunks_exact_mut(channels * area).zip(g.chunks_exact(channels)) {
                    for c in 0..channels {
                        let v = gs[c] * scale;
                        ds[c * area..(c + 1) * area].iter_mut().for_each(|d| *d = v);
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Unfolds one `(C, H, W)` sample into `(C·9, OH·OW)` patch columns.
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * p..((c * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        row[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into a sample.
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    dx: &mut [T],
) {
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * p..((c * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < w {
                            let d = &mut plane[iy as usize * w + ix as usize];
                            *d = *d + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
