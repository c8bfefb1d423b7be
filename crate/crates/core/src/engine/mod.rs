//! A small fully connected network with optional batch normalization,
//! exact backpropagation and dataset evaluation.
//!
//! Layer `l` of a model with widths `[d0, d1, ..., dL]` maps `d_l` to
//! `d_{l+1}`. Hidden layers apply `linear -> [batch norm] -> relu`; the last
//! layer is linear. Parameters live in an f64 [`ParameterSet`] with entries
//!
//! - `l{l}.weight` of shape `[out, in]`
//! - `l{l}.bias` of shape `[out]` (omitted on batch-normalized layers)
//! - `l{l}.bn.gamma`, `l{l}.bn.beta`, `l{l}.bn.running_mean`,
//!   `l{l}.bn.running_var`, each of shape `[out]`
//!
//! Running statistics are ordinary entries; [`is_running_stat`] recognizes
//! them by name. Their gradient is always zero.

mod train;

pub use train::{train_run, train_run_observed, EpochEvent, RunOutput};

use rand::Rng;

use crate::data::{Batch, BatchTargets};
use crate::error::{Error, Result};
use crate::param::{DType, ParameterSet, Tensor};
use crate::rng;

pub const BN_EPS: f64 = 1e-5;
/// Weight given to the current batch when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    Mse,
}

/// How an averaged model gets its batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Exact statistics from a forward pass over the training data.
    Recompute,
    /// Statistics of the newest checkpoint in the average.
    Copy,
    /// Keep whatever the averaging produced.
    Off,
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".bn.running_mean") || name.ends_with(".bn.running_var")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    /// One flag per hidden layer.
    pub batch_norm: Vec<bool>,
    pub loss: Loss,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnIdx>,
}

impl ModelSpec {
    pub fn new(widths: Vec<usize>, batch_norm: Vec<bool>, loss: Loss, seed: u64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Config(format!(
                "need input, at least one hidden and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive, got {widths:?}")));
        }
        if batch_norm.len() != widths.len() - 2 {
            return Err(Error::Config(format!(
                "{} batch-norm flags for {} hidden layers",
                batch_norm.len(),
                widths.len() - 2
            )));
        }
        Ok(ModelSpec {
            widths,
            batch_norm,
            loss,
            seed,
        })
    }

    /// Same batch-norm setting on every hidden layer.
    pub fn mlp(widths: Vec<usize>, bn: bool, loss: Loss, seed: u64) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        ModelSpec::new(widths, vec![bn; hidden], loss, seed)
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn has_bn(&self) -> bool {
        self.batch_norm.iter().any(|&b| b)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn uses_bn(&self, layer: usize) -> bool {
        layer + 1 < self.num_layers() && self.batch_norm[layer]
    }

    /// Entry names and shapes, in parameter-set order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..self.num_layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            out.push((format!("l{l}.weight"), vec![o, i]));
            if self.uses_bn(l) {
                for part in ["gamma", "beta", "running_mean", "running_var"] {
                    out.push((format!("l{l}.bn.{part}"), vec![o]));
                }
            } else {
                out.push((format!("l{l}.bias"), vec![o]));
            }
        }
        out
    }

    fn indices(&self) -> Vec<LayerIdx> {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        (0..self.num_layers())
            .map(|l| {
                let weight = take();
                let (bias, bn) = if self.uses_bn(l) {
                    let bn = BnIdx {
                        gamma: take(),
                        beta: take(),
                        mean: take(),
                        var: take(),
                    };
                    (None, Some(bn))
                } else {
                    (Some(take()), None)
                };
                LayerIdx {
                    fan_in: self.widths[l],
                    fan_out: self.widths[l + 1],
                    weight,
                    bias,
                    bn,
                }
            })
            .collect()
    }

    /// Checks that `params` has exactly this model's f64 layout.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let layout = self.layout();
        if params.dtype() != Some(DType::F64) {
            return Err(Error::Shape("model parameters must be f64".into()));
        }
        for (i, (name, shape)) in layout.iter().enumerate() {
            if i >= params.len() {
                return Err(Error::mismatch(name.clone(), "missing from parameter set"));
            }
            let (got, t) = params.iter().nth(i).expect("bounds checked");
            if got != name || t.shape() != shape.as_slice() {
                return Err(Error::mismatch(
                    name.clone(),
                    format!("expected {name} {shape:?}, found {got} {:?}", t.shape()),
                ));
            }
        }
        if params.len() != layout.len() {
            let extra = params.names().nth(layout.len()).unwrap_or_default().to_owned();
            return Err(Error::mismatch(extra, "not part of the model"));
        }
        Ok(())
    }
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`,
/// biases and shifts zero, scales one, running mean zero and variance one.
pub fn init_params(spec: &ModelSpec) -> ParameterSet {
    let mut entries = Vec::new();
    for (name, shape) in spec.layout() {
        let n: usize = shape.iter().product();
        let values = if name.ends_with(".weight") {
            let layer: u64 = name[1..name.find('.').expect("layer prefix")]
                .parse()
                .expect("layer index");
            let bound = 1.0 / (shape[1] as f64).sqrt();
            let mut r = rng::stream(spec.seed, "init", layer);
            (0..n).map(|_| r.gen_range(-bound..bound)).collect()
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        entries.push((name, Tensor::from_f64(shape, values).expect("layout shape")));
    }
    ParameterSet::new(entries).expect("layout names are unique")
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Vec<f64>,
    bn: Option<BnCache>,
    // post-affine, pre-relu values for hidden layers
    act_pre: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    training: bool,
    rows: usize,
    layers: Vec<LayerCache>,
    outputs: Vec<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Per-layer batch statistics `(layer, mean, population variance)` of
    /// the pre-normalization activations. Empty in inference mode.
    pub fn batch_stats(&self) -> Vec<(usize, &[f64], &[f64])> {
        if !self.training {
            return Vec::new();
        }
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.bn.as_ref().map(|b| (l, b.mean.as_slice(), b.var.as_slice())))
            .collect()
    }
}

fn values(params: &ParameterSet, idx: usize) -> &[f64] {
    params.tensor(idx).as_f64().expect("checked f64")
}

fn check_finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            entry: format!("activations of layer {layer}"),
        })
    }
}

/// Runs the network on `batch`. In training mode batch-norm layers use
/// batch statistics; otherwise they use the stored running statistics.
pub fn forward(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &Batch,
    training: bool,
) -> Result<(Vec<f64>, ForwardCache)> {
    spec.check_params(params)?;
    if batch.dim != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch width {} but model input width {}",
            batch.dim,
            spec.input_dim()
        )));
    }
    if batch.rows == 0 {
        return Err(Error::EmptyData);
    }
    let rows = batch.rows;
    let layers = spec.indices();
    let mut caches = Vec::with_capacity(layers.len());
    let mut act = batch.inputs.clone();
    for (l, li) in layers.iter().enumerate() {
        let (fi, fo) = (li.fan_in, li.fan_out);
        let w = values(params, li.weight);
        let mut z = vec![0.0; rows * fo];
        for r in 0..rows {
            let x = &act[r * fi..(r + 1) * fi];
            let zr = &mut z[r * fo..(r + 1) * fo];
            for (o, zo) in zr.iter_mut().enumerate() {
                let wo = &w[o * fi..(o + 1) * fi];
                *zo = wo.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = li.bias {
            let b = values(params, b);
            for zr in z.chunks_exact_mut(fo) {
                zr.iter_mut().zip(b).for_each(|(zo, bo)| *zo += bo);
            }
        }
        let last = l + 1 == layers.len();
        let bn = match li.bn {
            Some(bi) => {
                let (mean, var) = if training {
                    let mut mean = vec![0.0; fo];
                    for zr in z.chunks_exact(fo) {
                        mean.iter_mut().zip(zr).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    let mut var = vec![0.0; fo];
                    for zr in z.chunks_exact(fo) {
                        for f in 0..fo {
                            var[f] += (zr[f] - mean[f]).powi(2);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                    (mean, var)
                } else {
                    (values(params, bi.mean).to_vec(), values(params, bi.var).to_vec())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let (gamma, beta) = (values(params, bi.gamma), values(params, bi.beta));
                let mut xhat = z;
                let mut y = vec![0.0; rows * fo];
                for (xr, yr) in xhat.chunks_exact_mut(fo).zip(y.chunks_exact_mut(fo)) {
                    for f in 0..fo {
                        xr[f] = (xr[f] - mean[f]) * inv_std[f];
                        yr[f] = gamma[f] * xr[f] + beta[f];
                    }
                }
                z = y;
                Some(BnCache {
                    xhat,
                    inv_std,
                    mean,
                    var,
                })
            }
            None => None,
        };
        check_finite(&z, l)?;
        let next = if last {
            z.clone()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        caches.push(LayerCache {
            input: std::mem::replace(&mut act, next),
            bn,
            act_pre: z,
        });
    }
    let cache = ForwardCache {
        training,
        rows,
        layers: caches,
        outputs: act.clone(),
    };
    Ok((act, cache))
}

/// Per-sample losses of `outputs` against the batch targets.
pub fn sample_losses(spec: &ModelSpec, outputs: &[f64], targets: &BatchTargets) -> Result<Vec<f64>> {
    let width = spec.output_dim();
    match (spec.loss, targets) {
        (Loss::CrossEntropy, BatchTargets::Classes(labels)) => labels
            .iter()
            .zip(outputs.chunks_exact(width))
            .map(|(&y, o)| {
                if y >= width {
                    return Err(Error::Shape(format!("label {y} but only {width} outputs")));
                }
                let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + o.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                Ok(lse - o[y])
            })
            .collect(),
        (Loss::Mse, BatchTargets::Values(t)) if width == 1 => {
            Ok(t.iter().zip(outputs).map(|(t, o)| (o - t).powi(2)).collect())
        }
        (Loss::Mse, BatchTargets::Values(_)) => {
            Err(Error::Shape(format!("regression needs one output, model has {width}")))
        }
        _ => Err(Error::Shape("loss does not match target kind".into())),
    }
}

fn output_grad(spec: &ModelSpec, outputs: &[f64], targets: &BatchTargets, rows: usize) -> Vec<f64> {
    let width = spec.output_dim();
    let n = rows as f64;
    match targets {
        BatchTargets::Classes(labels) => {
            let mut d = vec![0.0; outputs.len()];
            for (r, o) in outputs.chunks_exact(width).enumerate() {
                let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = o.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..width {
                    d[r * width + c] = (exps[c] / sum - if c == labels[r] { 1.0 } else { 0.0 }) / n;
                }
            }
            d
        }
        BatchTargets::Values(t) => outputs.iter().zip(t).map(|(o, t)| 2.0 * (o - t) / n).collect(),
    }
}

/// Batch-mean loss and its exact gradient with respect to every entry of
/// `params`, given the cache of a forward pass on the same batch.
pub fn backward(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &Batch,
    cache: &ForwardCache,
) -> Result<(f64, ParameterSet)> {
    spec.check_params(params)?;
    if cache.rows != batch.rows {
        return Err(Error::Shape(format!(
            "cache for {} rows, batch has {}",
            cache.rows, batch.rows
        )));
    }
    let rows = cache.rows;
    let losses = sample_losses(spec, &cache.outputs, &batch.targets)?;
    let loss = losses.iter().sum::<f64>() / rows as f64;
    let mut grads = params.zeros_like();
    let layers = spec.indices();

    let mut delta = output_grad(spec, &cache.outputs, &batch.targets, rows);
    for (l, li) in layers.iter().enumerate().rev() {
        let c = &cache.layers[l];
        let (fi, fo) = (li.fan_in, li.fan_out);
        if l + 1 < layers.len() {
            // relu
            for (d, &a) in delta.iter_mut().zip(&c.act_pre) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if let Some(bi) = li.bn {
            let bc = c.bn.as_ref().expect("bn cache present");
            let gamma = values(params, bi.gamma);
            let mut dgamma = vec![0.0; fo];
            let mut dbeta = vec![0.0; fo];
            for (dr, xr) in delta.chunks_exact(fo).zip(bc.xhat.chunks_exact(fo)) {
                for f in 0..fo {
                    dgamma[f] += dr[f] * xr[f];
                    dbeta[f] += dr[f];
                }
            }
            grads.tensor_mut(bi.gamma).assign(&dgamma);
            grads.tensor_mut(bi.beta).assign(&dbeta);
            // dxhat = dy * gamma
            for dr in delta.chunks_exact_mut(fo) {
                dr.iter_mut().zip(gamma).for_each(|(d, g)| *d *= g);
            }
            if cache.training {
                let n = rows as f64;
                let mut sum_d = vec![0.0; fo];
                let mut sum_dx = vec![0.0; fo];
                for (dr, xr) in delta.chunks_exact(fo).zip(bc.xhat.chunks_exact(fo)) {
                    for f in 0..fo {
                        sum_d[f] += dr[f];
                        sum_dx[f] += dr[f] * xr[f];
                    }
                }
                for (dr, xr) in delta.chunks_exact_mut(fo).zip(bc.xhat.chunks_exact(fo)) {
                    for f in 0..fo {
                        dr[f] = bc.inv_std[f] / n * (n * dr[f] - sum_d[f] - xr[f] * sum_dx[f]);
                    }
                }
            } else {
                for dr in delta.chunks_exact_mut(fo) {
                    dr.iter_mut().zip(&bc.inv_std).for_each(|(d, s)| *d *= s);
                }
            }
        }
        let mut dw = vec![0.0; fo * fi];
        for r in 0..rows {
            let x = &c.input[r * fi..(r + 1) * fi];
            let dr = &delta[r * fo..(r + 1) * fo];
            for (o, &d) in dr.iter().enumerate() {
                if d != 0.0 {
                    dw[o * fi..(o + 1) * fi]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xv)| *g += d * xv);
                }
            }
        }
        grads.tensor_mut(li.weight).assign(&dw);
        if let Some(bi) = li.bias {
            let mut db = vec![0.0; fo];
            for dr in delta.chunks_exact(fo) {
                db.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
            }
            grads.tensor_mut(bi).assign(&db);
        }
        if l > 0 {
            let w = values(params, li.weight);
            let mut prev = vec![0.0; rows * fi];
            for r in 0..rows {
                let dr = &delta[r * fo..(r + 1) * fo];
                let pr = &mut prev[r * fi..(r + 1) * fi];
                for (o, &d) in dr.iter().enumerate() {
                    if d != 0.0 {
                        pr.iter_mut()
                            .zip(&w[o * fi..(o + 1) * fi])
                            .for_each(|(p, wv)| *p += d * wv);
                    }
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grads))
}

/// Loss and gradient of one training-mode step on `batch`, plus the cache
/// holding the batch statistics.
pub fn loss_and_grad(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, ParameterSet, ForwardCache)> {
    let (_, cache) = forward(params, spec, batch, true)?;
    let (loss, grads) = backward(params, spec, batch, &cache)?;
    Ok((loss, grads, cache))
}

fn bn_layers(spec: &ModelSpec) -> Vec<(usize, BnIdx)> {
    spec.indices()
        .into_iter()
        .enumerate()
        .filter_map(|(l, li)| li.bn.map(|b| (l, b)))
        .collect()
}

/// Replaces every batch-norm layer's running mean and variance with the
/// exact population statistics of its pre-normalization activations over
/// `data`. Layers are processed front to back, so each layer sees inputs
/// normalized with the freshly computed statistics of earlier layers. All
/// other entries are returned untouched.
pub fn recompute_bn_stats(params: &ParameterSet, spec: &ModelSpec, data: &Batch) -> Result<ParameterSet> {
    if data.rows == 0 {
        return Err(Error::EmptyData);
    }
    let mut out = params.clone();
    if !spec.has_bn() {
        spec.check_params(params)?;
        return Ok(out);
    }
    // A training-mode pass over the full data normalizes every layer with
    // its full-data statistics, which is exactly the front-to-back recipe.
    let (_, cache) = forward(params, spec, data, true)?;
    let stats = cache.batch_stats();
    for ((_, bi), (_, mean, var)) in bn_layers(spec).iter().zip(stats) {
        out.tensor_mut(bi.mean).assign(mean);
        out.tensor_mut(bi.var).assign(var);
    }
    Ok(out)
}

/// Running statistics of every batch-norm layer, in layer order.
pub fn running_stats(params: &ParameterSet, spec: &ModelSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    bn_layers(spec)
        .into_iter()
        .map(|(_, bi)| (values(params, bi.mean).to_vec(), values(params, bi.var).to_vec()))
        .collect()
}

/// Writes `stats` (as returned by [`running_stats`]) into `params`.
pub fn set_running_stats(params: &mut ParameterSet, spec: &ModelSpec, stats: &[(Vec<f64>, Vec<f64>)]) {
    for ((_, bi), (mean, var)) in bn_layers(spec).into_iter().zip(stats) {
        params.tensor_mut(bi.mean).assign(mean);
        params.tensor_mut(bi.var).assign(var);
    }
}

/// Momentum update of running statistics from a training-mode pass:
/// `running <- (1 - BN_MOMENTUM) * running + BN_MOMENTUM * batch`.
pub fn blend_running_stats(previous: &[(Vec<f64>, Vec<f64>)], cache: &ForwardCache) -> Vec<(Vec<f64>, Vec<f64>)> {
    previous
        .iter()
        .zip(cache.batch_stats())
        .map(|((rm, rv), (_, bm, bv))| {
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect()
            };
            (blend(rm, bm), blend(rv, bv))
        })
        .collect()
}

/// Gives an averaged model batch-norm statistics according to `mode`.
/// `newest` is the most recent checkpoint that went into the average and
/// `train` the data used for recomputation. No-op without batch norm.
pub fn apply_bn_mode(
    averaged: ParameterSet,
    spec: &ModelSpec,
    mode: BnMode,
    newest: &ParameterSet,
    train: &Batch,
) -> Result<ParameterSet> {
    if !spec.has_bn() {
        return Ok(averaged);
    }
    match mode {
        BnMode::Off => Ok(averaged),
        BnMode::Recompute => recompute_bn_stats(&averaged, spec, train),
        BnMode::Copy => {
            let mut out = averaged;
            set_running_stats(&mut out, spec, &running_stats(newest, spec));
            Ok(out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of argmax-correct samples; `None` for regression.
    pub accuracy: Option<f64>,
}

/// Inference-mode loss and accuracy over `data`, processed in chunks of
/// `batch_size` rows. Per-sample results are reduced in row order, so the
/// chunk size does not affect the result.
pub fn evaluate(params: &ParameterSet, spec: &ModelSpec, data: &Batch, batch_size: usize) -> Result<Evaluation> {
    if data.rows == 0 {
        return Err(Error::EmptyData);
    }
    let chunk = batch_size.max(1);
    let width = spec.output_dim();
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.rows {
        let end = (start + chunk).min(data.rows);
        let sub = Batch {
            inputs: data.inputs[start * data.dim..end * data.dim].to_vec(),
            rows: end - start,
            dim: data.dim,
            targets: match &data.targets {
                BatchTargets::Classes(c) => BatchTargets::Classes(c[start..end].to_vec()),
                BatchTargets::Values(v) => BatchTargets::Values(v[start..end].to_vec()),
            },
        };
        let (outputs, _) = forward(params, spec, &sub, false)?;
        for l in sample_losses(spec, &outputs, &sub.targets)? {
            total += l;
        }
        if let BatchTargets::Classes(labels) = &sub.targets {
            for (o, &y) in outputs.chunks_exact(width).zip(labels) {
                if argmax(o) == y {
                    correct += 1;
                }
            }
        }
        start = end;
    }
    let n = data.rows as f64;
    let accuracy = match data.targets {
        BatchTargets::Classes(_) => Some(correct as f64 / n),
        BatchTargets::Values(_) => None,
    };
    Ok(Evaluation {
        loss: total / n,
        accuracy,
    })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
