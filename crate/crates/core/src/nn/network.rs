use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, LayerSpec};
use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;

/// Samples per work unit in the convolution backward pass. Partial weight
/// gradients are summed in chunk order, which keeps results independent of
/// the thread count.
const CONV_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active (masks drawn from `dropout_seed`), batch-norm uses batch statistics.
    Train { dropout_seed: u64 },
    /// Dropout is the identity, batch-norm uses the stored statistics.
    Eval,
}

/// Frozen batch-norm statistics. Not counted as parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Copy, Default, Serialize, Deserialize)]
pub struct Penalty {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Tensor>,
    pub stats: Option<BnStats>,
}

/// One gradient tensor per parameter tensor, in `Network::params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

enum Cache {
    Dense { input: Tensor, output: Tensor },
    Conv { input: Tensor, output: Tensor },
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: Option<BnStats> },
    Dropout { mask: Option<Vec<f64>> },
    Activation { output: Tensor },
}

/// Intermediates recorded by `Network::forward` for the backward pass.
pub struct ForwardCache {
    version: u64,
    batch: usize,
    entries: Vec<Cache>,
}

impl ForwardCache {
    /// Batch statistics seen by each batch-norm layer (train mode only).
    pub fn batch_norm_stats(&self) -> Vec<Option<&BnStats>> {
        self.entries
            .iter()
            .filter_map(|c| match c {
                Cache::BatchNorm { batch_stats, .. } => Some(batch_stats.as_ref()),
                _ => None,
            })
            .collect()
    }
}

/// Source of input batches for whole-dataset passes.
pub trait BatchSource {
    fn for_each_batch(&self, f: &mut dyn FnMut(&Tensor) -> Result<()>) -> Result<()>;
}

impl BatchSource for [Tensor] {
    fn for_each_batch(&self, f: &mut dyn FnMut(&Tensor) -> Result<()>) -> Result<()> {
        self.iter().try_for_each(f)
    }
}

impl BatchSource for Vec<Tensor> {
    fn for_each_batch(&self, f: &mut dyn FnMut(&Tensor) -> Result<()>) -> Result<()> {
        self.as_slice().for_each_batch(f)
    }
}

/// A feed-forward network: an ordered stack of layers with their parameters.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Network {
    /// Resolves every layer's shapes. Weights start at zero, batch-norm
    /// scales at one; call `init_params` before training.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) || input_shape.len() > 3 {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let out = spec
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", spec.name())))?;
            let mut params: Vec<Tensor> = spec
                .param_shapes(&shape)
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect();
            let stats = if spec == LayerSpec::BatchNorm {
                params[0].data_mut().fill(1.0);
                Some(BnStats::identity(shape[0]))
            } else {
                None
            };
            layers.push(Layer {
                spec,
                in_shape: shape.clone(),
                out_shape: out.clone(),
                params,
                stats,
            });
            shape = out;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            version: 0,
        })
    }

    /// Rebuilds a network from a manifest and stored tensors.
    pub fn from_parts(
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        params: Vec<Tensor>,
        stats: Vec<BnStats>,
    ) -> Result<Self> {
        let mut net = Network::new(input_shape, specs)?;
        let mut params = params.into_iter();
        let mut stats = stats.into_iter();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            for p in layer.params.iter_mut() {
                let t = params
                    .next()
                    .ok_or_else(|| Error::Config("too few parameter tensors".into()))?;
                if t.shape() != p.shape() {
                    return Err(Error::shape(format!("layer {i} parameter"), p.shape(), t.shape()));
                }
                *p = t;
            }
            if let Some(s) = layer.stats.as_mut() {
                let t = stats
                    .next()
                    .ok_or_else(|| Error::Config("too few batch-norm statistics".into()))?;
                if t.mean.len() != s.mean.len() || t.var.len() != s.var.len() {
                    return Err(Error::Config(format!("layer {i}: batch-norm statistics size")));
                }
                *s = t;
            }
        }
        if params.next().is_some() || stats.next().is_some() {
            return Err(Error::Config("too many stored tensors for manifest".into()));
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Parameters in deterministic order: layer by layer, weight before bias,
    /// batch-norm scale before offset.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    /// Which parameter tensors are connection weights (and thus penalized).
    pub fn weight_mask(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| {
                let w = l.spec.has_weights();
                (0..l.params.len()).map(move |i| w && i == 0)
            })
            .collect()
    }

    pub fn bn_stats(&self) -> Vec<&BnStats> {
        self.layers.iter().filter_map(|l| l.stats.as_ref()).collect()
    }

    /// Weights, biases and batch-norm scale/offset; running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Uniform initialization with bound `gain * sqrt(2 / (fan_in + fan_out))`.
    /// The gain is `sqrt(2)` for every weight layer except the last one, which
    /// feeds the logistic output and uses gain 1. Biases start at zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.layers.iter().rposition(|l| l.spec.has_weights());
        self.version += 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some((fan_in, fan_out)) = layer.spec.fans(&layer.in_shape) {
                let gain = if Some(i) == last { 1.0 } else { 2f64.sqrt() };
                let bound = init_bound(fan_in, fan_out, gain);
                for w in layer.params[0].data_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
                layer.params[1].data_mut().fill(0.0);
            } else if layer.spec == LayerSpec::BatchNorm {
                layer.params[0].data_mut().fill(1.0);
                layer.params[1].data_mut().fill(0.0);
                layer.stats = Some(BnStats::identity(layer.in_shape[0]));
            }
        }
    }

    pub fn initialized(mut self, seed: u64) -> Self {
        self.init_params(seed);
        self
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.sample_shape() != self.input_shape {
            let mut expected = vec![x.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("network input (layer 0)", &expected, x.shape()));
        }
        if x.batch() == 0 {
            return Err(Error::EmptyInput("batch has no samples".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        let out = self.run(x, mode, self.layers.len(), Some(&mut entries))?;
        Ok((
            out,
            ForwardCache {
                version: self.version,
                batch: x.batch(),
                entries,
            },
        ))
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.run(x, Mode::Eval, self.layers.len(), None)
    }

    fn run(
        &self,
        x: &Tensor,
        mode: Mode,
        upto: usize,
        mut cache: Option<&mut Vec<Cache>>,
    ) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let (next, entry) = layer_forward(layer, i, cur, mode, cache.is_some())?;
            if let Some(c) = cache.as_deref_mut() {
                c.push(entry);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Exact gradients of `loss + penalty` given `dloss/doutput`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor, penalty: Penalty) -> Result<GradientSet> {
        if cache.version != self.version || cache.entries.len() != self.layers.len() {
            return Err(Error::Config(
                "forward cache is stale or belongs to a different network".into(),
            ));
        }
        let mut expected = vec![cache.batch];
        expected.extend_from_slice(self.output_shape());
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::shape("backward output gradient", &expected, grad_out.shape()));
        }
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut grad = grad_out.clone();
        for (i, (layer, entry)) in self.layers.iter().zip(&cache.entries).enumerate().rev() {
            let (dx, dparams) = layer_backward(layer, entry, grad, cache.batch, i > 0);
            per_layer[i] = dparams;
            grad = dx;
        }
        let mut grads: Vec<Tensor> = per_layer.into_iter().flatten().collect();
        if penalty.l1 != 0.0 || penalty.l2 != 0.0 {
            for ((g, p), is_w) in grads.iter_mut().zip(self.params()).zip(self.weight_mask()) {
                if !is_w {
                    continue;
                }
                for (gv, &w) in g.data_mut().iter_mut().zip(p.data()) {
                    *gv += penalty.l1 * sign0(w) + 2.0 * penalty.l2 * w;
                }
            }
        }
        Ok(GradientSet { grads })
    }

    /// Replaces every batch-norm layer's statistics with the exact mean and
    /// (biased) variance of its input over the whole dataset. Layers are
    /// finalized in order, so each layer sees its predecessors' frozen stats.
    pub fn batchnorm_finalize(&mut self, data: &(impl BatchSource + ?Sized)) -> Result<()> {
        let bn_layers: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec == LayerSpec::BatchNorm)
            .map(|(i, _)| i)
            .collect();
        let mut seen = 0usize;
        data.for_each_batch(&mut |b| {
            seen += b.batch();
            Ok(())
        })?;
        if seen == 0 {
            return Err(Error::EmptyInput("batch-norm finalization needs data".into()));
        }
        for idx in bn_layers {
            let features = self.layers[idx].in_shape[0];
            let spatial: usize = self.layers[idx].in_shape[1..].iter().product();
            let mut count = 0.0f64;
            let mut mean = vec![0.0; features];
            let mut m2 = vec![0.0; features];
            data.for_each_batch(&mut |b| {
                self.check_input(b)?;
                let input = self.run(b, Mode::Eval, idx, None)?;
                let (bm, bm2) = channel_moments(input.data(), b.batch(), features, spatial);
                let nb = (b.batch() * spatial) as f64;
                if count == 0.0 {
                    mean.copy_from_slice(&bm);
                    m2.copy_from_slice(&bm2);
                } else {
                    let tot = count + nb;
                    for c in 0..features {
                        let delta = bm[c] - mean[c];
                        mean[c] += delta * nb / tot;
                        m2[c] += bm2[c] + delta * delta * count * nb / tot;
                    }
                }
                count += nb;
                Ok(())
            })?;
            let var = m2.iter().map(|v| v / count).collect();
            self.layers[idx].stats = Some(BnStats { mean, var });
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics, the cheap alternative
    /// to `batchnorm_finalize`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache, momentum: f64) {
        let batch_stats: Vec<Option<BnStats>> =
            cache.batch_norm_stats().into_iter().map(|s| s.cloned()).collect();
        let layers = self.layers.iter_mut().filter(|l| l.spec == LayerSpec::BatchNorm);
        for (layer, bs) in layers.zip(batch_stats) {
            if let (Some(stats), Some(bs)) = (layer.stats.as_mut(), bs) {
                for (s, b) in stats.mean.iter_mut().zip(&bs.mean) {
                    *s = (1.0 - momentum) * *s + momentum * b;
                }
                for (s, b) in stats.var.iter_mut().zip(&bs.var) {
                    *s = (1.0 - momentum) * *s + momentum * b;
                }
            }
        }
    }
}

pub fn init_bound(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sign0(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-channel mean and sum of squared deviations, two-pass.
fn channel_moments(data: &[f64], batch: usize, features: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * spatial) as f64;
    let mut mean = vec![0.0; features];
    let mut m2 = vec![0.0; features];
    for c in 0..features {
        let mut s = 0.0;
        for n in 0..batch {
            let off = (n * features + c) * spatial;
            s += data[off..off + spatial].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for n in 0..batch {
            let off = (n * features + c) * spatial;
            q += data[off..off + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[c] = mu;
        m2[c] = q;
    }
    (mean, m2)
}

fn activate(data: &mut [f64], act: Activation) {
    if act != Activation::Identity {
        data.iter_mut().for_each(|v| *v = act.apply(*v));
    }
}

fn layer_forward(layer: &Layer, index: usize, x: Tensor, mode: Mode, keep: bool) -> Result<(Tensor, Cache)> {
    let n = x.batch();
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&layer.out_shape);
    let in_len: usize = layer.in_shape.iter().product();
    let out_len: usize = layer.out_shape.iter().product();

    match layer.spec {
        LayerSpec::Dense { units, activation } => {
            let (w, b) = (&layer.params[0], &layer.params[1]);
            let mut y = Vec::with_capacity(n * units);
            for _ in 0..n {
                y.extend_from_slice(b.data());
            }
            gemm_nt(x.data(), w.data(), &mut y, n, in_len, units);
            activate(&mut y, activation);
            let y = Tensor::from_vec(&out_shape, y)?;
            let cache = if keep {
                Cache::Dense { input: x, output: y.clone() }
            } else {
                Cache::GlobalAvgPool
            };
            Ok((y, cache))
        }
        LayerSpec::Conv2d {
            kernel,
            padding,
            activation,
            filters,
        } => {
            let geo = ConvGeometry::new(layer, kernel, padding, filters);
            let (w, b) = (&layer.params[0], &layer.params[1]);
            let mut y = vec![0.0; n * out_len];
            y.par_chunks_mut(out_len)
                .zip(x.data().par_chunks(in_len))
                .for_each(|(ys, xs)| {
                    let cols = geo.im2col(xs);
                    for (f, chunk) in ys.chunks_mut(geo.out_area()).enumerate() {
                        chunk.fill(b.data()[f]);
                    }
                    gemm_nn(w.data(), &cols, ys, geo.filters, geo.patch_len(), geo.out_area());
                    activate(ys, activation);
                });
            let y = Tensor::from_vec(&out_shape, y)?;
            let cache = if keep {
                Cache::Conv { input: x, output: y.clone() }
            } else {
                Cache::GlobalAvgPool
            };
            Ok((y, cache))
        }
        LayerSpec::MaxPool { window } => {
            let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (ho, wo) = (layer.out_shape[1], layer.out_shape[2]);
            let mut y = vec![0.0; n * out_len];
            let mut argmax = vec![0usize; n * out_len];
            let xd = x.data();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * h * w;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = base + oh * window[0] * w + ow * window[1];
                            for i in 0..window[0] {
                                for j in 0..window[1] {
                                    let idx = base + (oh * window[0] + i) * w + ow * window[1] + j;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((s * c + ch) * ho + oh) * wo + ow;
                            y[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
            Ok((Tensor::from_vec(&out_shape, y)?, Cache::MaxPool { argmax }))
        }
        LayerSpec::GlobalAvgPool => {
            let c = layer.in_shape[0];
            let area = in_len / c;
            let y: Vec<f64> = x
                .data()
                .chunks(area)
                .map(|m| m.iter().sum::<f64>() / area as f64)
                .collect();
            Ok((Tensor::from_vec(&out_shape, y)?, Cache::GlobalAvgPool))
        }
        LayerSpec::BatchNorm => {
            let features = layer.in_shape[0];
            let spatial = in_len / features;
            let (gamma, beta) = (layer.params[0].data(), layer.params[1].data());
            let (mean, var, batch_stats) = match mode {
                Mode::Train { .. } => {
                    let (mu, m2) = channel_moments(x.data(), n, features, spatial);
                    let m = (n * spatial) as f64;
                    let var: Vec<f64> = m2.iter().map(|q| q / m).collect();
                    let stats = BnStats { mean: mu.clone(), var: var.clone() };
                    (mu, var, Some(stats))
                }
                Mode::Eval => {
                    let s = layer.stats.as_ref().expect("batch-norm layer has statistics");
                    (s.mean.clone(), s.var.clone(), None)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let mut xhat = x.into_data();
            let mut y = vec![0.0; xhat.len()];
            for s in 0..n {
                for c in 0..features {
                    let off = (s * features + c) * spatial;
                    for k in off..off + spatial {
                        xhat[k] = (xhat[k] - mean[c]) * inv_std[c];
                        y[k] = gamma[c] * xhat[k] + beta[c];
                    }
                }
            }
            let cache = if keep {
                Cache::BatchNorm { xhat, inv_std, batch_stats }
            } else {
                Cache::GlobalAvgPool
            };
            Ok((Tensor::from_vec(&out_shape, y)?, cache))
        }
        LayerSpec::Dropout { p } => match mode {
            Mode::Train { dropout_seed } if p > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::io::derive_seed(
                    dropout_seed,
                    &[index as u64],
                ));
                let scale = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                    .collect();
                let y = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                Ok((Tensor::from_vec(&out_shape, y)?, Cache::Dropout { mask: Some(mask) }))
            }
            _ => Ok((x, Cache::Dropout { mask: None })),
        },
        LayerSpec::Activation { activation } => {
            let y = x.map(|v| activation.apply(v));
            let cache = if keep {
                Cache::Activation { output: y.clone() }
            } else {
                Cache::GlobalAvgPool
            };
            Ok((y, cache))
        }
    }
}

/// Returns (dL/dinput, parameter gradients).
fn layer_backward(layer: &Layer, cache: &Cache, dy: Tensor, n: usize, need_dx: bool) -> (Tensor, Vec<Tensor>) {
    let mut in_shape = vec![n];
    in_shape.extend_from_slice(&layer.in_shape);
    let in_len: usize = layer.in_shape.iter().product();
    let out_len: usize = layer.out_shape.iter().product();

    match (&layer.spec, cache) {
        (&LayerSpec::Dense { units, activation }, Cache::Dense { input, output }) => {
            let dz = activation_grad(dy, output, activation);
            let mut dw = vec![0.0; units * in_len];
            gemm_tn(dz.data(), input.data(), &mut dw, units, n, in_len);
            let mut db = vec![0.0; units];
            for row in dz.data().chunks(units) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let mut dx = vec![0.0; if need_dx { n * in_len } else { 0 }];
            if need_dx {
                gemm_nn(dz.data(), layer.params[0].data(), &mut dx, n, units, in_len);
            }
            (
                Tensor::from_vec(if need_dx { &in_shape } else { &[0] }, dx).unwrap(),
                vec![
                    Tensor::from_vec(layer.params[0].shape(), dw).unwrap(),
                    Tensor::from_vec(&[units], db).unwrap(),
                ],
            )
        }
        (
            &LayerSpec::Conv2d {
                kernel,
                padding,
                activation,
                filters,
            },
            Cache::Conv { input, output },
        ) => {
            let dz = activation_grad(dy, output, activation);
            let geo = ConvGeometry::new(layer, kernel, padding, filters);
            let w = layer.params[0].data();
            let wlen = w.len();
            let mut dx = vec![0.0; n * in_len];
            let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
                .par_chunks_mut(CONV_CHUNK * in_len)
                .zip(dz.data().par_chunks(CONV_CHUNK * out_len))
                .zip(input.data().par_chunks(CONV_CHUNK * in_len))
                .map(|((dxs, dzs), xs)| {
                    let mut dw = vec![0.0; wlen];
                    let mut db = vec![0.0; filters];
                    for ((dxi, dzi), xi) in dxs
                        .chunks_mut(in_len)
                        .zip(dzs.chunks(out_len))
                        .zip(xs.chunks(in_len))
                    {
                        let cols = geo.im2col(xi);
                        gemm_nt(dzi, &cols, &mut dw, filters, geo.out_area(), geo.patch_len());
                        for (f, chunk) in dzi.chunks(geo.out_area()).enumerate() {
                            db[f] += chunk.iter().sum::<f64>();
                        }
                        if need_dx {
                            let mut dcols = vec![0.0; cols.len()];
                            gemm_tn(w, dzi, &mut dcols, geo.patch_len(), filters, geo.out_area());
                            geo.col2im(&dcols, dxi);
                        }
                    }
                    (dw, db)
                })
                .collect();
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; filters];
            for (pw, pb) in partials {
                dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
                db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
            }
            (
                Tensor::from_vec(&in_shape, dx).unwrap(),
                vec![
                    Tensor::from_vec(layer.params[0].shape(), dw).unwrap(),
                    Tensor::from_vec(&[filters], db).unwrap(),
                ],
            )
        }
        (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax }) => {
            let mut dx = vec![0.0; n * in_len];
            for (g, &idx) in dy.data().iter().zip(argmax) {
                dx[idx] += g;
            }
            (Tensor::from_vec(&in_shape, dx).unwrap(), Vec::new())
        }
        (LayerSpec::GlobalAvgPool, Cache::GlobalAvgPool) => {
            let c = layer.in_shape[0];
            let area = in_len / c;
            let mut dx = vec![0.0; n * in_len];
            for (chunk, g) in dx.chunks_mut(area).zip(dy.data()) {
                chunk.fill(g / area as f64);
            }
            (Tensor::from_vec(&in_shape, dx).unwrap(), Vec::new())
        }
        (LayerSpec::BatchNorm, Cache::BatchNorm { xhat, inv_std, batch_stats }) => {
            let features = layer.in_shape[0];
            let spatial = in_len / features;
            let gamma = layer.params[0].data();
            let dyd = dy.data();
            let mut dgamma = vec![0.0; features];
            let mut dbeta = vec![0.0; features];
            let mut dx = vec![0.0; n * in_len];
            let m = (n * spatial) as f64;
            for c in 0..features {
                let idx = |s: usize| (s * features + c) * spatial;
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for s in 0..n {
                    for k in idx(s)..idx(s) + spatial {
                        sum_dy += dyd[k];
                        sum_dy_xhat += dyd[k] * xhat[k];
                    }
                }
                dgamma[c] = sum_dy_xhat;
                dbeta[c] = sum_dy;
                let g = gamma[c] * inv_std[c];
                for s in 0..n {
                    for k in idx(s)..idx(s) + spatial {
                        dx[k] = if batch_stats.is_some() {
                            g * (dyd[k] - sum_dy / m - xhat[k] * sum_dy_xhat / m)
                        } else {
                            g * dyd[k]
                        };
                    }
                }
            }
            (
                Tensor::from_vec(&in_shape, dx).unwrap(),
                vec![
                    Tensor::from_vec(&[features], dgamma).unwrap(),
                    Tensor::from_vec(&[features], dbeta).unwrap(),
                ],
            )
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let dx = match mask {
                Some(mask) => {
                    let d = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    Tensor::from_vec(&in_shape, d).unwrap()
                }
                None => dy,
            };
            (dx, Vec::new())
        }
        (&LayerSpec::Activation { activation }, Cache::Activation { output }) => {
            (activation_grad(dy, output, activation), Vec::new())
        }
        _ => unreachable!("cache entry does not match layer kind"),
    }
}

fn activation_grad(dy: Tensor, output: &Tensor, act: Activation) -> Tensor {
    if act == Activation::Identity {
        return dy;
    }
    let mut d = dy;
    for (g, &y) in d.data_mut().iter_mut().zip(output.data()) {
        *g *= act.derivative_from_output(y);
    }
    d
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: [usize; 2],
    offset: [usize; 2],
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(layer: &Layer, kernel: [usize; 2], padding: [super::Padding; 2], filters: usize) -> Self {
        let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
        let (out_h, pt) = padding[0].resolve(h, kernel[0]).expect("shape resolved at build");
        let (out_w, pf) = padding[1].resolve(w, kernel[1]).expect("shape resolved at build");
        Self {
            channels: c,
            height: h,
            width: w,
            filters,
            kernel,
            offset: [pt, pf],
            out_h,
            out_w,
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel[0] * self.kernel[1]
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let area = self.out_area();
        for c in 0..self.channels {
            for i in 0..self.kernel[0] {
                for j in 0..self.kernel[1] {
                    let row = ((c * self.kernel[0] + i) * self.kernel[1] + j) * area;
                    for oh in 0..self.out_h {
                        let ih = (oh + i) as isize - self.offset[0] as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        let in_row = (c * self.height + ih as usize) * self.width;
                        // valid ow range: 0 <= ow + j - pf < width
                        let lo = self.offset[1].saturating_sub(j);
                        let hi = (self.width + self.offset[1]).saturating_sub(j).min(self.out_w);
                        for ow in lo..hi {
                            f(row + oh * self.out_w + ow, in_row + ow + j - self.offset[1]);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.patch_len() * self.out_area()];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bce_grad, bce_loss, penalty_value, Padding};
    use rand::Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-4;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_targets(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect())
            .unwrap()
    }

    fn objective(net: &Network, x: &Tensor, t: &Tensor, mode: Mode, pen: Penalty) -> f64 {
        let (y, _) = net.forward(x, mode).unwrap();
        bce_loss(&y, t).unwrap() + penalty_value(net, pen)
    }

    /// Compares analytic gradients with central differences on up to
    /// `per_tensor` entries of every parameter tensor.
    fn check_gradients(mut net: Network, x: &Tensor, mode: Mode, pen: Penalty, per_tensor: usize) {
        let mut out = vec![x.batch()];
        out.extend_from_slice(net.output_shape());
        let t = random_targets(&out, 99);
        let (y, cache) = net.forward(x, mode).unwrap();
        let grads = net.backward(&cache, &bce_grad(&y, &t).unwrap(), pen).unwrap();
        let n_tensors = grads.grads.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for ti in 0..n_tensors {
            let len = grads.grads[ti].len();
            let picks: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
            };
            for i in picks {
                let orig = net.params()[ti].data()[i];
                net.params_mut()[ti].data_mut()[i] = orig + STEP;
                let hi = objective(&net, x, &t, mode, pen);
                net.params_mut()[ti].data_mut()[i] = orig - STEP;
                let lo = objective(&net, x, &t, mode, pen);
                net.params_mut()[ti].data_mut()[i] = orig;
                let fd = (hi - lo) / (2.0 * STEP);
                let an = grads.grads[ti].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
                assert!(rel < TOL, "tensor {ti} entry {i}: analytic {an} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn dense_stack_gradients() {
        let net = Network::new(
            &[6],
            vec![
                LayerSpec::dense(5, Activation::Tanh),
                LayerSpec::dense(3, Activation::Logistic),
            ],
        )
        .unwrap()
        .initialized(1);
        let x = random_tensor(&[4, 6], 2);
        check_gradients(net, &x, Mode::Eval, Penalty { l1: 1e-3, l2: 1e-2 }, 100);
    }

    #[test]
    fn batchnorm_and_dropout_gradients_in_train_mode() {
        let net = Network::new(
            &[2, 3, 5],
            vec![
                LayerSpec::Dropout { p: 0.2 },
                LayerSpec::dense(6, Activation::Identity),
                LayerSpec::BatchNorm,
                LayerSpec::Activation { activation: Activation::Tanh },
                LayerSpec::Dropout { p: 0.3 },
                LayerSpec::dense(4, Activation::Logistic),
            ],
        )
        .unwrap()
        .initialized(4);
        let x = random_tensor(&[7, 2, 3, 5], 8);
        check_gradients(net, &x, Mode::Train { dropout_seed: 11 }, Penalty::default(), 100);
    }

    #[test]
    fn conv_pool_gradients() {
        let net = Network::new(
            &[2, 4, 9],
            vec![
                LayerSpec::conv(3, [3, 2], [Padding::Same, Padding::Valid], Activation::Tanh),
                LayerSpec::BatchNorm,
                LayerSpec::MaxPool { window: [1, 2] },
                LayerSpec::conv(4, [2, 3], [Padding::Valid, Padding::Same], Activation::Identity),
                LayerSpec::BatchNorm,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Activation { activation: Activation::Logistic },
            ],
        )
        .unwrap()
        .initialized(6);
        let x = random_tensor(&[10, 2, 4, 9], 3);
        check_gradients(net, &x, Mode::Train { dropout_seed: 0 }, Penalty { l1: 0.0, l2: 1e-3 }, 200);
    }

    #[test]
    fn conv_to_dense_gradients_in_eval_mode() {
        let mut net = Network::new(
            &[1, 5, 12],
            vec![
                LayerSpec::conv(3, [3, 3], [Padding::Same, Padding::Valid], Activation::Relu),
                LayerSpec::BatchNorm,
                LayerSpec::dense(5, Activation::Logistic),
            ],
        )
        .unwrap()
        .initialized(9);
        let x = random_tensor(&[3, 1, 5, 12], 4);
        net.batchnorm_finalize(&vec![x.clone()]).unwrap();
        check_gradients(net, &x, Mode::Eval, Penalty { l1: 1e-3, l2: 0.0 }, 200);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let net = Network::new(
            &[2, 4, 6],
            vec![LayerSpec::conv(3, [3, 3], [Padding::Same, Padding::Same], Activation::Identity)],
        )
        .unwrap()
        .initialized(2);
        let x = random_tensor(&[2, 2, 4, 6], 1);
        let y = net.predict(&x).unwrap();
        let w = net.params()[0].data().to_vec();
        let b = net.params()[1].data().to_vec();
        for s in 0..2 {
            for f in 0..3 {
                for oh in 0..4isize {
                    for ow in 0..6isize {
                        let mut acc = b[f];
                        for c in 0..2 {
                            for i in 0..3isize {
                                for j in 0..3isize {
                                    let (ih, iw) = (oh + i - 1, ow + j - 1);
                                    if (0..4).contains(&ih) && (0..6).contains(&iw) {
                                        let xv = x.data()[((s * 2 + c) * 4 + ih as usize) * 6 + iw as usize];
                                        acc += w[((f * 2 + c) * 3 + i as usize) * 3 + j as usize] * xv;
                                    }
                                }
                            }
                        }
                        let got = y.data()[((s * 3 + f) * 4 + oh as usize) * 6 + ow as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn finalize_equals_population_statistics() {
        let mut net = Network::new(&[3], vec![LayerSpec::BatchNorm]).unwrap();
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[3, 3], vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0, -1.0, 2.0, 4.0]).unwrap();
        net.batchnorm_finalize(&vec![a.clone(), b.clone()]).unwrap();
        let all: Vec<[f64; 3]> = a.data().chunks(3).chain(b.data().chunks(3)).map(|r| [r[0], r[1], r[2]]).collect();
        let stats = net.bn_stats()[0].clone();
        for c in 0..3 {
            let mean = all.iter().map(|r| r[c]).sum::<f64>() / 5.0;
            let var = all.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((stats.mean[c] - mean).abs() < 1e-12);
            assert!((stats.var[c] - var).abs() < 1e-12);
        }
        assert!(matches!(net.batchnorm_finalize(&Vec::<Tensor>::new()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn single_batch_finalize_matches_train_statistics() {
        let mut net = Network::new(
            &[1, 3, 6],
            vec![
                LayerSpec::conv(2, [3, 3], [Padding::Same, Padding::Valid], Activation::Relu),
                LayerSpec::BatchNorm,
                LayerSpec::dense(2, Activation::Logistic),
            ],
        )
        .unwrap()
        .initialized(1);
        let x = random_tensor(&[5, 1, 3, 6], 2);
        let (train_out, cache) = net.forward(&x, Mode::Train { dropout_seed: 0 }).unwrap();
        let seen = cache.batch_norm_stats()[0].cloned().unwrap();
        net.batchnorm_finalize(&vec![x.clone()]).unwrap();
        assert_eq!(net.bn_stats()[0], &seen);
        assert_eq!(net.predict(&x).unwrap(), train_out);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let net = Network::new(&[50], vec![LayerSpec::Dropout { p: 0.5 }]).unwrap();
        let x = Tensor::from_vec(&[1, 50], vec![1.0; 50]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
        let a = net.forward(&x, Mode::Train { dropout_seed: 1 }).unwrap().0;
        let b = net.forward(&x, Mode::Train { dropout_seed: 1 }).unwrap().0;
        let c = net.forward(&x, Mode::Train { dropout_seed: 2 }).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn init_bounds_and_determinism() {
        let spec = vec![
            LayerSpec::dense(30, Activation::Relu),
            LayerSpec::dense(10, Activation::Logistic),
        ];
        let a = Network::new(&[20], spec.clone()).unwrap().initialized(7);
        let b = Network::new(&[20], spec.clone()).unwrap().initialized(7);
        let c = Network::new(&[20], spec).unwrap().initialized(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let hidden = init_bound(20, 30, 2f64.sqrt());
        let last = init_bound(30, 10, 1.0);
        assert!(a.params()[0].data().iter().all(|w| w.abs() <= hidden));
        assert!(a.params()[2].data().iter().all(|w| w.abs() <= last));
        assert!(a.params()[2].data().iter().any(|w| w.abs() > 0.5 * last));
        assert!(a.params()[1].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn stale_cache_and_bad_shapes_are_errors() {
        let mut net = Network::new(&[4], vec![LayerSpec::dense(2, Activation::Logistic)]).unwrap();
        let x = Tensor::zeros(&[3, 4]);
        let (y, cache) = net.forward(&x, Mode::Eval).unwrap();
        net.params_mut()[0].data_mut()[0] = 1.0;
        assert!(net.backward(&cache, &y, Penalty::default()).is_err());
        assert!(matches!(net.predict(&Tensor::zeros(&[3, 5])), Err(Error::Shape { .. })));
        assert!(Network::new(&[1, 2, 2], vec![LayerSpec::conv(1, [3, 3], [Padding::Valid; 2], Activation::Relu)]).is_err());
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let net = Network::new(
            &[1, 5, 40],
            vec![
                LayerSpec::conv(8, [3, 3], [Padding::Same, Padding::Valid], Activation::Relu),
                LayerSpec::dense(10, Activation::Logistic),
            ],
        )
        .unwrap()
        .initialized(3);
        let x = random_tensor(&[33, 1, 5, 40], 1);
        let t = random_targets(&[33, 10], 2);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (y, cache) = net.forward(&x, Mode::Eval).unwrap();
                net.backward(&cache, &bce_grad(&y, &t).unwrap(), Penalty::default()).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let net = Network::new(&[4], vec![LayerSpec::Dropout { p: 0.3 }]).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut sum = vec![0.0; 4];
        let trials = 10_000;
        for seed in 0..trials {
            let (y, _) = net.forward(&x, Mode::Train { dropout_seed: seed }).unwrap();
            sum.iter_mut().zip(y.data()).for_each(|(s, v)| *s += v);
        }
        for (s, e) in sum.iter().zip(x.data()) {
            let mean = s / trials as f64;
            assert!((mean - e).abs() <= 0.01 * e.abs().max(1.0) * 2.0, "{mean} vs {e}");
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let net = Network::new(&[2, 3, 4], vec![LayerSpec::BatchNorm]).unwrap();
        let mut x = random_tensor(&[16, 2, 3, 4], 21);
        x.data_mut().iter_mut().for_each(|v| *v = 5.0 + 3.0 * *v);
        let (y, _) = net.forward(&x, Mode::Train { dropout_seed: 0 }).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..16)
                .flat_map(|s| y.data()[(s * 2 + c) * 12..(s * 2 + c + 1) * 12].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
