//! A small feed-forward encoder mapping raw inputs to unit-norm embeddings,
//! trained by the vMF negative-log-likelihood with EMA prototype updates,
//! plus an unconstrained cross-entropy twin for the energy baseline.
//!
//! All backpropagation is manual: affine, rectifier, and sphere-normalize
//! layers each expose an analytic gradient that the tests check against
//! central finite differences.
//!
//! Checkpoint file format (little-endian), magic `SSMD`:
//!
//! ```text
//! magic    4 bytes  "SSMD"
//! version  u32      1
//! kind     u32      0 = spherical encoder + prototype bank, 1 = CE classifier
//! dim_in   u32
//! dim_out  u32      embedding dim (kind 0) or class count (kind 1)
//! n_layers u32
//! layer    u32 tag: 0 affine (in u32, out u32, weight out*in f64, bias out f64),
//!                   1 rectifier, 2 normalize
//! kind 0 trailer: classes u32, tau f64, prototypes classes * dim_out f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, log_sum_exp};
use crate::synth::RawInputSet;
use crate::vmf::UnitVector;
use crate::{Error, Result};

/// Dense affine map `y = W x + b`, weight stored row-major `out * in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl AffineParams {
    /// He-style scaled uniform initialization, zero bias.
    pub fn init<R: Rng>(dim_in: usize, dim_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / dim_in as f64).sqrt();
        let weight = (0..dim_in * dim_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { weight, bias: vec![0.0; dim_out], dim_in, dim_out }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { weight, bias: vec![0.0; dim], dim_in: dim, dim_out: dim }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += linalg::dot(&self.weight[o * self.dim_in..(o + 1) * self.dim_in], x);
        }
        y
    }
}

/// One encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(AffineParams),
    Rectifier,
    Normalize,
}

/// Gradient buffer for one affine layer.
#[derive(Debug, Clone)]
struct AffineGrad {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn forward_layer(layer: &Layer, x: &[f64]) -> Result<Vec<f64>> {
    match layer {
        Layer::Affine(a) => {
            if x.len() != a.dim_in {
                return Err(Error::DimensionMismatch { expected: a.dim_in, got: x.len() });
            }
            Ok(a.forward(x))
        }
        Layer::Rectifier => Ok(x.iter().map(|v| v.max(0.0)).collect()),
        Layer::Normalize => {
            let n = linalg::norm(x);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding);
            }
            Ok(x.iter().map(|v| v / n).collect())
        }
    }
}

/// Forward through a stack keeping every activation; `out[0]` is the input.
fn forward_stack(layers: &[Layer], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for layer in layers {
        let next = forward_layer(layer, acts.last().unwrap())?;
        acts.push(next);
    }
    Ok(acts)
}

/// Backpropagate `grad_out` through the stack, accumulating parameter
/// gradients into `grads` (parallel to `layers`). Returns the input gradient.
fn backward_stack(
    layers: &[Layer],
    acts: &[Vec<f64>],
    grad_out: &[f64],
    grads: &mut [Option<AffineGrad>],
) -> Vec<f64> {
    let mut g = grad_out.to_vec();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let x = &acts[idx];
        match layer {
            Layer::Affine(a) => {
                let buf = grads[idx].as_mut().expect("affine grad buffer");
                for o in 0..a.dim_out {
                    buf.bias[o] += g[o];
                    let row = &mut buf.weight[o * a.dim_in..(o + 1) * a.dim_in];
                    for (wi, xi) in row.iter_mut().zip(x) {
                        *wi += g[o] * xi;
                    }
                }
                let mut gx = vec![0.0; a.dim_in];
                for o in 0..a.dim_out {
                    let row = &a.weight[o * a.dim_in..(o + 1) * a.dim_in];
                    for (gxi, wi) in gx.iter_mut().zip(row) {
                        *gxi += g[o] * wi;
                    }
                }
                g = gx;
            }
            Layer::Rectifier => {
                for (gi, xi) in g.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            Layer::Normalize => {
                // y = x / |x|: the gradient is projected onto the tangent
                // space of the sphere and scaled by 1 / |x|.
                let n = linalg::norm(x);
                let y = &acts[idx + 1];
                let radial = linalg::dot(&g, y);
                for (gi, yi) in g.iter_mut().zip(y) {
                    *gi = (*gi - radial * yi) / n;
                }
            }
        }
    }
    g
}

fn new_grad_buffers(layers: &[Layer]) -> Vec<Option<AffineGrad>> {
    layers
        .iter()
        .map(|l| match l {
            Layer::Affine(a) => Some(AffineGrad {
                weight: vec![0.0; a.weight.len()],
                bias: vec![0.0; a.bias.len()],
            }),
            _ => None,
        })
        .collect()
}

fn zero_grads(grads: &mut [Option<AffineGrad>]) {
    for g in grads.iter_mut().flatten() {
        g.weight.iter_mut().for_each(|v| *v = 0.0);
        g.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn validate_stack(layers: &[Layer], dim_in: usize) -> Result<usize> {
    let mut dim = dim_in;
    for layer in layers {
        if let Layer::Affine(a) = layer {
            if a.dim_in != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: a.dim_in });
            }
            if a.weight.len() != a.dim_in * a.dim_out || a.bias.len() != a.dim_out {
                return Err(Error::invalid("layer", "affine parameter shape mismatch"));
            }
            dim = a.dim_out;
        }
    }
    Ok(dim)
}

/// Feed-forward network ending in a normalize-to-sphere layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layers: Vec<Layer>,
    dim_in: usize,
    dim_out: usize,
}

impl EncoderModel {
    pub fn new(dim_in: usize, layers: Vec<Layer>) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Normalize)) {
            return Err(Error::invalid("layers", "encoder must end in a normalize layer"));
        }
        let dim_out = validate_stack(&layers, dim_in)?;
        if dim_out < 2 {
            return Err(Error::invalid("layers", "embedding dimension must be >= 2"));
        }
        Ok(Self { layers, dim_in, dim_out })
    }

    /// Rectifier MLP with the given hidden widths, He-initialized.
    pub fn mlp(dim_in: usize, hidden: &[usize], dim_out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = dim_in;
        for h in hidden {
            layers.push(Layer::Affine(AffineParams::init(prev, *h, &mut rng)));
            layers.push(Layer::Rectifier);
            prev = *h;
        }
        layers.push(Layer::Affine(AffineParams::init(prev, dim_out, &mut rng)));
        layers.push(Layer::Normalize);
        Self::new(dim_in, layers)
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Deterministic map to a unit-norm embedding.
    pub fn forward(&self, x: &[f64]) -> Result<UnitVector> {
        if x.len() != self.dim_in {
            return Err(Error::DimensionMismatch { expected: self.dim_in, got: x.len() });
        }
        let mut v = x.to_vec();
        for layer in &self.layers {
            v = forward_layer(layer, &v)?;
        }
        UnitVector::new(v)
    }

    /// Embed a whole raw set.
    pub fn embed_set(&self, set: &RawInputSet) -> Result<Vec<UnitVector>> {
        set.iter_points().map(|x| self.forward(x)).collect()
    }
}

/// Learned class prototypes with the training temperature `tau = 1/kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    mus: Vec<UnitVector>,
    tau: f64,
}

impl PrototypeBank {
    pub fn new(mus: Vec<UnitVector>, tau: f64) -> Result<Self> {
        if mus.is_empty() {
            return Err(Error::EmptyInput("prototypes"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau", format!("temperature must be > 0, got {tau}")));
        }
        let dim = mus[0].dim();
        if mus.iter().any(|m| m.dim() != dim) {
            return Err(Error::invalid("mus", "mixed prototype dimensions"));
        }
        Ok(Self { mus, tau })
    }

    pub fn num_classes(&self) -> usize {
        self.mus.len()
    }

    pub fn dim(&self) -> usize {
        self.mus[0].dim()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mu(&self, class: usize) -> &UnitVector {
        &self.mus[class]
    }

    pub fn mus(&self) -> &[UnitVector] {
        &self.mus
    }

    /// Prototype cosines `mu_c' z` for every class.
    pub fn cosines(&self, z: &UnitVector) -> Vec<f64> {
        self.mus.iter().map(|mu| mu.dot(z)).collect()
    }
}

/// Cosine-annealed learning rate (the only schedule in use).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Cosine,
}

impl LrSchedule {
    fn rate(self, initial: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Training hyperparameters. `tau_train = 0.1` and EMA momentum 0.5 follow
/// the reference recipe for prototype-based hyperspherical training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    /// EMA momentum in [0, 1]; 1 freezes the prototypes entirely.
    pub ema_momentum: f64,
    pub tau_train: f64,
    pub seed: u64,
    /// Embedding dimension produced by the encoder.
    pub embed_dim: usize,
    /// Hidden widths of the rectifier MLP.
    pub hidden: Vec<usize>,
    /// Update prototypes by loss gradient instead of EMA.
    pub prototype_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.1,
            schedule: LrSchedule::Cosine,
            ema_momentum: 0.5,
            tau_train: 0.1,
            seed: 0,
            embed_dim: 16,
            hidden: vec![128, 128],
            prototype_gradient: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid("ema_momentum", "must be in [0, 1]"));
        }
        if !(self.tau_train > 0.0) {
            return Err(Error::invalid("tau_train", "must be > 0"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim", "must be >= 2"));
        }
        Ok(())
    }
}

/// Mean NLL of the prototype softmax over a batch, with the analytic
/// gradient with respect to each embedding:
///
/// ```text
/// dL/dz_i = (1/tau) (sum_j p(j|z_i) mu_j - mu_{y_i}) / batch
/// ```
pub fn nll_loss(
    bank: &PrototypeBank,
    z_batch: &[UnitVector],
    labels: &[u32],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if z_batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if z_batch.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: z_batch.len(), got: labels.len() });
    }
    let c = bank.num_classes();
    let dim = bank.dim();
    let tau = bank.tau();
    let batch = z_batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(z_batch.len());
    for (z, label) in z_batch.iter().zip(labels) {
        let label = *label as usize;
        if label >= c {
            return Err(Error::invalid("labels", format!("label {label} out of range 0..{c}")));
        }
        if z.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: z.dim() });
        }
        let logits: Vec<f64> = bank.cosines(z).iter().map(|s| s / tau).collect();
        let lse = log_sum_exp(&logits);
        loss += lse - logits[label];
        let mut grad = vec![0.0; dim];
        for (j, mu) in bank.mus().iter().enumerate() {
            let p = (logits[j] - lse).exp();
            for (gi, mi) in grad.iter_mut().zip(mu.coords()) {
                *gi += p * mi;
            }
        }
        for (gi, mi) in grad.iter_mut().zip(bank.mu(label).coords()) {
            *gi = (*gi - mi) / (tau * batch);
        }
        grads.push(grad);
    }
    Ok((loss / batch, grads))
}

/// Output of [`train`]: the frozen encoder, the prototype bank, and the
/// per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EncoderModel,
    pub bank: PrototypeBank,
    pub loss_trace: Vec<f64>,
}

struct Optimizer {
    velocity: Vec<Option<AffineGrad>>,
    momentum: f64,
}

impl Optimizer {
    fn new(layers: &[Layer]) -> Self {
        Self { velocity: new_grad_buffers(layers), momentum: 0.9 }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Option<AffineGrad>], lr: f64) {
        for ((layer, grad), vel) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            if let (Layer::Affine(a), Some(g), Some(v)) = (layer, grad, vel) {
                for ((w, gw), vw) in a.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                    *vw = self.momentum * *vw + gw;
                    *w -= lr * *vw;
                }
                for ((b, gb), vb) in a.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                    *vb = self.momentum * *vb + gb;
                    *b -= lr * *vb;
                }
            }
        }
    }
}

fn class_count(labels: &[u32]) -> Result<usize> {
    let c = labels.iter().max().map(|m| *m as usize + 1).unwrap_or(0);
    if c < 1 {
        return Err(Error::EmptyInput("labels"));
    }
    let mut seen = vec![false; c];
    for l in labels {
        seen[*l as usize] = true;
    }
    if let Some(class) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass { class });
    }
    Ok(c)
}

fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Guard state shared by both training loops: abort on a non-finite epoch
/// loss, or when the loss stays above 10x the first epoch's loss for three
/// consecutive epochs.
struct DivergenceGuard {
    initial: Option<f64>,
    high_streak: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        Self { initial: None, high_streak: 0 }
    }

    fn observe(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss} at epoch {epoch}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.high_streak += 1;
            if self.high_streak >= 3 {
                return Err(Error::Divergence(format!(
                    "loss {loss} above 10x initial {initial} for 3 consecutive epochs (epoch {epoch})"
                )));
            }
        } else {
            self.high_streak = 0;
        }
        Ok(())
    }
}

/// Train the hyperspherical encoder by mini-batch SGD (momentum 0.9) on the
/// vMF NLL, with per-batch EMA prototype updates. Deterministic per seed.
pub fn train(train_set: &RawInputSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let labels = train_set
        .labels()
        .ok_or_else(|| Error::invalid("train_set", "training requires labels"))?;
    let classes = class_count(labels)?;
    let n = train_set.len();

    let mut model = EncoderModel::mlp(train_set.dim_in(), &cfg.hidden, cfg.embed_dim, cfg.seed)?;

    // Prototypes start at the normalized per-class means of the initial
    // embeddings; a cold start where all prototypes coincide never recovers.
    let mut proto_acc = vec![vec![0.0; cfg.embed_dim]; classes];
    for (x, label) in train_set.iter_points().zip(labels) {
        let z = model.forward(x)?;
        for (a, c) in proto_acc[*label as usize].iter_mut().zip(z.coords()) {
            *a += c;
        }
    }
    let mut prototypes: Vec<UnitVector> = proto_acc
        .into_iter()
        .map(UnitVector::normalize)
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut optimizer = Optimizer::new(model.layers());
    let mut grads = new_grad_buffers(model.layers());
    let mut guard = DivergenceGuard::new();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            let mut caches = Vec::with_capacity(batch.len());
            let mut z_batch = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let acts = forward_stack(model.layers(), train_set.point(i)).map_err(|e| {
                    Error::Divergence(format!("forward pass failed at epoch {epoch}: {e}"))
                })?;
                let z = UnitVector::new(acts.last().unwrap().clone()).map_err(|e| {
                    Error::Divergence(format!("non-finite embedding at epoch {epoch}: {e}"))
                })?;
                caches.push(acts);
                z_batch.push(z);
                batch_labels.push(labels[i]);
            }
            let bank = PrototypeBank::new(prototypes.clone(), cfg.tau_train)?;
            let (loss, z_grads) = nll_loss(&bank, &z_batch, &batch_labels)?;
            epoch_loss += loss * batch.len() as f64;

            zero_grads(&mut grads);
            for (acts, gz) in caches.iter().zip(&z_grads) {
                backward_stack(model.layers(), acts, gz, &mut grads);
            }
            optimizer.step(&mut model.layers, &grads, lr);

            if cfg.prototype_gradient {
                update_prototypes_by_gradient(
                    &mut prototypes,
                    &bank,
                    &z_batch,
                    &batch_labels,
                    lr,
                )?;
            } else {
                update_prototypes_by_ema(
                    &mut prototypes,
                    &z_batch,
                    &batch_labels,
                    cfg.ema_momentum,
                )?;
            }
        }
        let epoch_loss = epoch_loss / n as f64;
        guard.observe(epoch, epoch_loss)?;
        loss_trace.push(epoch_loss);
    }

    let bank = PrototypeBank::new(prototypes, cfg.tau_train)?;
    Ok(TrainOutput { model, bank, loss_trace })
}

/// EMA step `mu_c <- normalize(m mu_c + (1 - m) mean_c)`; classes absent
/// from the batch are untouched, and momentum 1 freezes every prototype.
fn update_prototypes_by_ema(
    prototypes: &mut [UnitVector],
    z_batch: &[UnitVector],
    labels: &[u32],
    momentum: f64,
) -> Result<()> {
    if momentum == 1.0 {
        return Ok(());
    }
    let dim = prototypes[0].dim();
    let mut sums = vec![vec![0.0; dim]; prototypes.len()];
    let mut counts = vec![0usize; prototypes.len()];
    for (z, label) in z_batch.iter().zip(labels) {
        let c = *label as usize;
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(z.coords()) {
            *s += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[c].iter().map(|s| s / *count as f64).collect();
        let blended: Vec<f64> = prototypes[c]
            .coords()
            .iter()
            .zip(&mean)
            .map(|(p, m)| momentum * p + (1.0 - momentum) * m)
            .collect();
        prototypes[c] = UnitVector::normalize(blended)?;
    }
    Ok(())
}

/// Alternative prototype update: plain SGD on the NLL with renormalization.
fn update_prototypes_by_gradient(
    prototypes: &mut [UnitVector],
    bank: &PrototypeBank,
    z_batch: &[UnitVector],
    labels: &[u32],
    lr: f64,
) -> Result<()> {
    let dim = bank.dim();
    let tau = bank.tau();
    let batch = z_batch.len() as f64;
    let mut grads = vec![vec![0.0; dim]; prototypes.len()];
    for (z, label) in z_batch.iter().zip(labels) {
        let logits: Vec<f64> = bank.cosines(z).iter().map(|s| s / tau).collect();
        let lse = log_sum_exp(&logits);
        for (j, gj) in grads.iter_mut().enumerate() {
            let p = (logits[j] - lse).exp();
            let indicator = if j == *label as usize { 1.0 } else { 0.0 };
            let coeff = (p - indicator) / (tau * batch);
            for (g, v) in gj.iter_mut().zip(z.coords()) {
                *g += coeff * v;
            }
        }
    }
    for (proto, grad) in prototypes.iter_mut().zip(&grads) {
        let stepped: Vec<f64> = proto
            .coords()
            .iter()
            .zip(grad)
            .map(|(p, g)| p - lr * g)
            .collect();
        *proto = UnitVector::normalize(stepped)?;
    }
    Ok(())
}

/// Unconstrained classifier: rectifier trunk plus an affine logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct CeModel {
    layers: Vec<Layer>,
    dim_in: usize,
    num_classes: usize,
}

impl CeModel {
    pub fn new(dim_in: usize, layers: Vec<Layer>) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Affine(_))) {
            return Err(Error::invalid("layers", "classifier must end in an affine head"));
        }
        let num_classes = validate_stack(&layers, dim_in)?;
        Ok(Self { layers, dim_in, num_classes })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Raw logits; unbounded, no norm constraint anywhere.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim_in {
            return Err(Error::DimensionMismatch { expected: self.dim_in, got: x.len() });
        }
        let mut v = x.to_vec();
        for layer in &self.layers {
            v = forward_layer(layer, &v)?;
        }
        Ok(v)
    }
}

/// Output of [`train_ce_twin`].
#[derive(Debug, Clone)]
pub struct CeTrainOutput {
    pub model: CeModel,
    pub loss_trace: Vec<f64>,
}

/// Train the cross-entropy twin with the same optimizer and schedule.
pub fn train_ce_twin(train_set: &RawInputSet, cfg: &TrainConfig) -> Result<CeTrainOutput> {
    cfg.validate()?;
    let labels = train_set
        .labels()
        .ok_or_else(|| Error::invalid("train_set", "training requires labels"))?;
    let classes = class_count(labels)?;
    let n = train_set.len();

    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut layers = Vec::new();
    let mut prev = train_set.dim_in();
    for h in &cfg.hidden {
        layers.push(Layer::Affine(AffineParams::init(prev, *h, &mut rng_init)));
        layers.push(Layer::Rectifier);
        prev = *h;
    }
    layers.push(Layer::Affine(AffineParams::init(prev, classes, &mut rng_init)));
    let mut model = CeModel::new(train_set.dim_in(), layers)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut optimizer = Optimizer::new(model.layers());
    let mut grads = new_grad_buffers(model.layers());
    let mut guard = DivergenceGuard::new();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            zero_grads(&mut grads);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let acts = forward_stack(model.layers(), train_set.point(i)).map_err(|e| {
                    Error::Divergence(format!("forward pass failed at epoch {epoch}: {e}"))
                })?;
                let logits = acts.last().unwrap();
                let lse = log_sum_exp(logits);
                let label = labels[i] as usize;
                batch_loss += lse - logits[label];
                let mut g: Vec<f64> = logits.iter().map(|l| (l - lse).exp() * scale).collect();
                g[label] -= scale;
                backward_stack(model.layers(), &acts, &g, &mut grads);
            }
            epoch_loss += batch_loss;
            optimizer.step(&mut model.layers, &grads, lr);
        }
        let epoch_loss = epoch_loss / n as f64;
        guard.observe(epoch, epoch_loss)?;
        loss_trace.push(epoch_loss);
    }
    Ok(CeTrainOutput { model, loss_trace })
}

const SSMD_MAGIC: [u8; 4] = *b"SSMD";
const SSMD_VERSION: u32 = 1;

/// A persisted model.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Spherical { model: EncoderModel, bank: PrototypeBank },
    CrossEntropy { model: CeModel },
}

/// Write a checkpoint; round-trips are bit-exact.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SSMD_MAGIC)?;
    w.write_all(&SSMD_VERSION.to_le_bytes())?;
    let (kind, layers, dim_in, dim_out) = match ckpt {
        Checkpoint::Spherical { model, .. } => (0u32, model.layers(), model.dim_in, model.dim_out),
        Checkpoint::CrossEntropy { model } => (1u32, model.layers(), model.dim_in, model.num_classes),
    };
    w.write_all(&kind.to_le_bytes())?;
    w.write_all(&(dim_in as u32).to_le_bytes())?;
    w.write_all(&(dim_out as u32).to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        match layer {
            Layer::Affine(a) => {
                w.write_all(&0u32.to_le_bytes())?;
                w.write_all(&(a.dim_in as u32).to_le_bytes())?;
                w.write_all(&(a.dim_out as u32).to_le_bytes())?;
                for v in a.weight.iter().chain(&a.bias) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Layer::Rectifier => w.write_all(&1u32.to_le_bytes())?,
            Layer::Normalize => w.write_all(&2u32.to_le_bytes())?,
        }
    }
    if let Checkpoint::Spherical { bank, .. } = ckpt {
        w.write_all(&(bank.num_classes() as u32).to_le_bytes())?;
        w.write_all(&bank.tau().to_le_bytes())?;
        for mu in bank.mus() {
            for v in mu.coords() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if magic != SSMD_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {magic:?}, expected {SSMD_MAGIC:?}"
        )));
    }
    let version = ck_u32(&mut r, "version")?;
    if version != SSMD_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let kind = ck_u32(&mut r, "kind")?;
    if kind > 1 {
        return Err(Error::MalformedHeader(format!("unknown checkpoint kind {kind}")));
    }
    let dim_in = ck_u32(&mut r, "dim_in")? as usize;
    let dim_out = ck_u32(&mut r, "dim_out")? as usize;
    let n_layers = ck_u32(&mut r, "n_layers")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let tag = ck_u32(&mut r, "layer tag")?;
        match tag {
            0 => {
                let a_in = ck_u32(&mut r, "affine dim_in")? as usize;
                let a_out = ck_u32(&mut r, "affine dim_out")? as usize;
                let mut weight = Vec::with_capacity(a_in * a_out);
                for _ in 0..a_in * a_out {
                    weight.push(ck_f64(&mut r, "weight")?);
                }
                let mut bias = Vec::with_capacity(a_out);
                for _ in 0..a_out {
                    bias.push(ck_f64(&mut r, "bias")?);
                }
                layers.push(Layer::Affine(AffineParams {
                    weight,
                    bias,
                    dim_in: a_in,
                    dim_out: a_out,
                }));
            }
            1 => layers.push(Layer::Rectifier),
            2 => layers.push(Layer::Normalize),
            _ => {
                return Err(Error::MalformedHeader(format!("unknown layer tag {tag} at {i}")));
            }
        }
    }
    match kind {
        0 => {
            let classes = ck_u32(&mut r, "classes")? as usize;
            let tau = ck_f64(&mut r, "tau")?;
            let mut mus = Vec::with_capacity(classes);
            for _ in 0..classes {
                let mut coords = Vec::with_capacity(dim_out);
                for _ in 0..dim_out {
                    coords.push(ck_f64(&mut r, "prototype")?);
                }
                mus.push(UnitVector::new(coords)?);
            }
            ensure_eof(&mut r)?;
            let model = EncoderModel::new(dim_in, layers)?;
            if model.dim_out != dim_out {
                return Err(Error::DimensionMismatch { expected: dim_out, got: model.dim_out });
            }
            Ok(Checkpoint::Spherical { model, bank: PrototypeBank::new(mus, tau)? })
        }
        _ => {
            ensure_eof(&mut r)?;
            let model = CeModel::new(dim_in, layers)?;
            if model.num_classes != dim_out {
                return Err(Error::DimensionMismatch { expected: dim_out, got: model.num_classes });
            }
            Ok(Checkpoint::CrossEntropy { model })
        }
    }
}

fn ck_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::TruncatedPayload(format!("missing {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn ck_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::TruncatedPayload(format!("missing {what}")))?;
    Ok(f64::from_le_bytes(b))
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::MalformedHeader("trailing bytes after payload".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_id_task, make_ood_set, IdTaskConfig, OodKind};

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn forward_is_pure_normalization_for_identity_affine() {
        let model = EncoderModel::new(
            2,
            vec![Layer::Affine(AffineParams::identity(2)), Layer::Normalize],
        )
        .unwrap();
        let z = model.forward(&[3.0, 4.0]).unwrap();
        assert!((z.coords()[0] - 0.6).abs() < 1e-15);
        assert!((z.coords()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_output_is_unit_norm_and_deterministic() {
        let model = EncoderModel::mlp(8, &[16, 16], 4, 3).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.coords(), b.coords());
        assert!((linalg::norm(a.coords()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_rejects_zero_pre_normalization() {
        let model = EncoderModel::new(
            2,
            vec![Layer::Affine(AffineParams {
                weight: vec![0.0; 4],
                bias: vec![0.0; 2],
                dim_in: 2,
                dim_out: 2,
            }), Layer::Normalize],
        )
        .unwrap();
        assert!(matches!(model.forward(&[1.0, 2.0]), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn nll_loss_matches_direct_arithmetic() {
        // С=2, mu1=(1,0), mu2=(-1,0), z=(1,0), label 0, tau=1:
        // loss = -log(e / (e + e^-1)) = log(1 + e^-2).
        let bank = PrototypeBank::new(vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])], 1.0).unwrap();
        let (loss, _) = nll_loss(&bank, &[unit(&[1.0, 0.0])], &[0]).unwrap();
        let expected = (-2.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
        assert!((expected - 0.126_928).abs() < 1e-6);
    }

    #[test]
    fn nll_loss_is_log_c_for_equidistant_embedding() {
        let bank = PrototypeBank::new(
            vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])],
            0.25,
        )
        .unwrap();
        let z = UnitVector::normalize(vec![1.0, 1.0, 1.0]).unwrap();
        let (loss, _) = nll_loss(&bank, &[z], &[1]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_loss_rejects_out_of_range_label() {
        let bank = PrototypeBank::new(vec![unit(&[1.0, 0.0])], 1.0).unwrap();
        assert!(nll_loss(&bank, &[unit(&[0.0, 1.0])], &[1]).is_err());
    }

    /// Central finite differences with the loss evaluated in f64 and the
    /// quotient accumulated symmetrically.
    fn numeric_grad(mut f: impl FnMut(f64) -> f64, at: f64, step: f64) -> f64 {
        (f(at + step) - f(at - step)) / (2.0 * step)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let dim = 4;
            let c = 3;
            let mus: Vec<UnitVector> = (0..c)
                .map(|_| crate::vmf::uniform_direction(dim, &mut rng).unwrap())
                .collect();
            let bank = PrototypeBank::new(mus, 0.5).unwrap();
            let z = crate::vmf::uniform_direction(dim, &mut rng).unwrap();
            let label = rng.gen_range(0..c) as u32;
            let (_, grads) = nll_loss(&bank, &[z.clone()], &[label]).unwrap();
            for i in 0..dim {
                // The analytic gradient treats z as a free vector; perturb
                // one raw coordinate without renormalizing.
                let numeric = numeric_grad(
                    |v| {
                        let mut coords = z.coords().to_vec();
                        coords[i] = v;
                        let zz = UnitVector::from_raw(coords);
                        let logits: Vec<f64> =
                            bank.cosines(&zz).iter().map(|s| s / bank.tau()).collect();
                        log_sum_exp(&logits) - logits[label as usize]
                    },
                    z.coords()[i],
                    1e-5,
                );
                assert!(
                    rel_err(grads[0][i], numeric) < 1e-6,
                    "coord {i}: analytic {} vs numeric {numeric}",
                    grads[0][i]
                );
            }
        }
    }

    /// Analytic parameter gradients for every layer type vs central
    /// finite differences on random small instances.
    #[test]
    fn layer_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for round in 0..50 {
            let dim_in = 3;
            let hidden = 8;
            let dim_out = 3;
            let model = EncoderModel::mlp(dim_in, &[hidden], dim_out, 100 + round).unwrap();
            let mus: Vec<UnitVector> = (0..2)
                .map(|_| crate::vmf::uniform_direction(dim_out, &mut rng).unwrap())
                .collect();
            let bank = PrototypeBank::new(mus, 0.5).unwrap();
            // Redraw inputs that dead-rectify the whole hidden layer.
            let (x, label) = loop {
                let x: Vec<f64> = (0..dim_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if model.forward(&x).is_ok() {
                    break (x, rng.gen_range(0..2) as u32);
                }
            };

            let loss_of = |layers: &[Layer]| -> f64 {
                let acts = forward_stack(layers, &x).unwrap();
                let z = UnitVector::new(acts.last().unwrap().clone()).unwrap();
                nll_loss(&bank, &[z], &[label]).unwrap().0
            };

            let acts = forward_stack(model.layers(), &x).unwrap();
            let z = UnitVector::new(acts.last().unwrap().clone()).unwrap();
            let (_, z_grads) = nll_loss(&bank, &[z], &[label]).unwrap();
            let mut grads = new_grad_buffers(model.layers());
            backward_stack(model.layers(), &acts, &z_grads[0], &mut grads);

            for (li, layer) in model.layers().iter().enumerate() {
                let Layer::Affine(a) = layer else { continue };
                let g = grads[li].as_ref().unwrap();
                // Spot-check a few weight entries and every bias entry.
                for wi in (0..a.weight.len()).step_by(a.weight.len().div_ceil(5).max(1)) {
                    let numeric = numeric_grad(
                        |v| {
                            let mut layers = model.layers().to_vec();
                            if let Layer::Affine(af) = &mut layers[li] {
                                af.weight[wi] = v;
                            }
                            loss_of(&layers)
                        },
                        a.weight[wi],
                        1e-5,
                    );
                    assert!(
                        rel_err(g.weight[wi], numeric) < 1e-5,
                        "round {round} layer {li} weight {wi}: {} vs {numeric}",
                        g.weight[wi]
                    );
                }
                for bi in 0..a.bias.len() {
                    let numeric = numeric_grad(
                        |v| {
                            let mut layers = model.layers().to_vec();
                            if let Layer::Affine(af) = &mut layers[li] {
                                af.bias[bi] = v;
                            }
                            loss_of(&layers)
                        },
                        a.bias[bi],
                        1e-5,
                    );
                    assert!(
                        rel_err(g.bias[bi], numeric) < 1e-5,
                        "round {round} layer {li} bias {bi}: {} vs {numeric}",
                        g.bias[bi]
                    );
                }
            }
        }
    }

    #[test]
    fn normalize_backprop_is_tangent_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if linalg::norm(&x) < 0.1 {
                continue;
            }
            let g_out: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let layers = vec![Layer::Normalize];
            let acts = forward_stack(&layers, &x).unwrap();
            let mut grads = new_grad_buffers(&layers);
            let g_in = backward_stack(&layers, &acts, &g_out, &mut grads);
            // Analytic gradient is orthogonal to the output direction.
            let y = &acts[1];
            assert!(linalg::dot(&g_in, y).abs() < 1e-12);
            // And matches finite differences of sum(g_out .* normalize(x)).
            for i in 0..5 {
                let numeric = numeric_grad(
                    |v| {
                        let mut xx = x.clone();
                        xx[i] = v;
                        let n = linalg::norm(&xx);
                        g_out.iter().zip(&xx).map(|(g, x)| g * x / n).sum()
                    },
                    x[i],
                    1e-6,
                );
                assert!(rel_err(g_in[i], numeric) < 1e-6);
            }
        }
    }

    #[test]
    fn single_gradient_step_moves_embedding_toward_its_prototype() {
        // Instances mimic the training regime: separated prototypes with the
        // embedding drawn around its own class. The two sign statements hold
        // on ~99% of such draws (they are not universal); the seed is frozen.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for round in 0..20 {
            let dim = 6;
            let c = 4;
            let mus: Vec<UnitVector> = linalg::orthonormal_columns(dim, c, &mut rng)
                .into_iter()
                .map(|v| UnitVector::new(v).unwrap())
                .collect();
            let label = rng.gen_range(0..c);
            let z = crate::vmf::sample_vmf_direction(&mus[label], 4.0, &mut rng).unwrap();
            let bank = PrototypeBank::new(mus, 0.3).unwrap();
            let (loss, grads) = nll_loss(&bank, &[z.clone()], &[label as u32]).unwrap();

            let logits: Vec<f64> = bank.cosines(&z).iter().map(|s| s / bank.tau()).collect();
            let lse = log_sum_exp(&logits);
            let posteriors: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

            let eta = 1e-5;
            let stepped: Vec<f64> = z
                .coords()
                .iter()
                .zip(&grads[0])
                .map(|(zi, gi)| zi - eta * gi)
                .collect();
            let z_new = UnitVector::normalize(stepped).unwrap();

            let (loss_new, _) = nll_loss(&bank, &[z_new.clone()], &[label as u32]).unwrap();
            assert!(loss_new < loss, "round {round}: loss did not decrease");

            let own_before = bank.mu(label).dot(&z);
            let own_after = bank.mu(label).dot(&z_new);
            assert!(own_after > own_before, "round {round}: own-prototype cosine did not increase");

            let others = |zz: &UnitVector| -> f64 {
                (0..c)
                    .filter(|j| *j != label)
                    .map(|j| posteriors[j] * bank.mu(j).dot(zz))
                    .sum()
            };
            assert!(others(&z_new) < others(&z), "round {round}: competitor term did not decrease");
        }
    }

    #[test]
    fn ema_update_keeps_prototypes_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut prototypes: Vec<UnitVector> = (0..3)
            .map(|_| crate::vmf::uniform_direction(4, &mut rng).unwrap())
            .collect();
        for step in 0..50 {
            let z: Vec<UnitVector> = (0..8)
                .map(|_| crate::vmf::uniform_direction(4, &mut rng).unwrap())
                .collect();
            let labels: Vec<u32> = (0..8).map(|_| rng.gen_range(0..3) as u32).collect();
            update_prototypes_by_ema(&mut prototypes, &z, &labels, 0.5).unwrap();
            for (c, p) in prototypes.iter().enumerate() {
                let n = linalg::norm(p.coords());
                assert!((n - 1.0).abs() < 1e-9, "step {step} class {c}: norm {n}");
            }
        }
    }

    fn default_task() -> crate::synth::IdTask {
        make_id_task(&IdTaskConfig { seed: 77, ..Default::default() }).unwrap()
    }

    #[test]
    fn training_reduces_loss_on_default_task() {
        let task = default_task();
        let cfg = TrainConfig { seed: 7, ..Default::default() };
        let out = train(&task.train, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), cfg.epochs);
        let initial = out.loss_trace[0];
        let final_loss = *out.loss_trace.last().unwrap();
        assert!(
            final_loss < 0.3 * initial,
            "final {final_loss} not under 0.3 * initial {initial}"
        );
    }

    #[test]
    fn trained_model_separates_id_from_uniform_ood() {
        let task = default_task();
        let cfg = TrainConfig { seed: 8, ..Default::default() };
        let out = train(&task.train, &cfg).unwrap();
        let ood = make_ood_set(OodKind::UniformSphere, &task.truth, &task.lift, 500, 9).unwrap();
        let mean_ink = |set: &RawInputSet| -> f64 {
            let mut acc = 0.0;
            for x in set.iter_points() {
                let z = out.model.forward(x).unwrap();
                let logits: Vec<f64> =
                    out.bank.cosines(&z).iter().map(|s| s / out.bank.tau()).collect();
                acc += out.bank.tau() * log_sum_exp(&logits);
            }
            acc / set.len() as f64
        };
        assert!(mean_ink(&task.test) > mean_ink(&ood));
    }

    #[test]
    fn zero_learning_rate_freezes_dynamics() {
        let task = make_id_task(&IdTaskConfig {
            n_samples: 500,
            seed: 78,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            ema_momentum: 1.0,
            seed: 9,
            ..Default::default()
        };
        let out = train(&task.train, &cfg).unwrap();
        let reference = EncoderModel::mlp(task.train.dim_in(), &cfg.hidden, cfg.embed_dim, cfg.seed)
            .unwrap();
        assert_eq!(out.model, reference, "parameters changed despite lr = 0");
        let first = out.loss_trace[0];
        for l in &out.loss_trace {
            assert!((l - first).abs() < 1e-6, "trace not constant: {l} vs {first}");
        }
    }

    #[test]
    fn training_requires_every_class_present() {
        let set = RawInputSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            Some(vec![0, 0, 2]),
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train(&set, &cfg), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn divergent_training_aborts_with_diagnostic() {
        let task = make_id_task(&IdTaskConfig {
            n_samples: 400,
            seed: 79,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig { learning_rate: 10.0, epochs: 10, seed: 10, ..Default::default() };
        let err = train_ce_twin(&task.train, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "got {err:?}");
    }

    #[test]
    fn ce_twin_reaches_high_accuracy_and_is_deterministic() {
        let task = default_task();
        let cfg = TrainConfig { seed: 11, ..Default::default() };
        let out = train_ce_twin(&task.train, &cfg).unwrap();
        let out2 = train_ce_twin(&task.train, &cfg).unwrap();
        assert_eq!(out.model, out2.model);

        let labels = task.test.labels().unwrap();
        let mut correct = 0usize;
        for (x, label) in task.test.iter_points().zip(labels) {
            let logits = out.model.logits(x).unwrap();
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if argmax == *label as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.9, "CE twin accuracy {acc} below 0.9");
    }

    #[test]
    fn ce_logits_scale_with_input() {
        let task = make_id_task(&IdTaskConfig {
            n_samples: 400,
            seed: 80,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 3, seed: 12, ..Default::default() };
        let out = train_ce_twin(&task.train, &cfg).unwrap();
        let x: Vec<f64> = task.train.point(0).to_vec();
        let x10: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let base = max_abs(&out.model.logits(&x).unwrap());
        let scaled = max_abs(&out.model.logits(&x10).unwrap());
        assert!(scaled > 2.0 * base, "logits did not grow with input scale");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let task = make_id_task(&IdTaskConfig {
            n_samples: 600,
            seed: 81,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 3, seed: 13, ..Default::default() };
        let a = train(&task.train, &cfg).unwrap();
        let b = train(&task.train, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
        for (ma, mb) in a.bank.mus().iter().zip(b.bank.mus()) {
            assert_eq!(ma.coords(), mb.coords());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let task = make_id_task(&IdTaskConfig {
            n_samples: 400,
            seed: 82,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 14, ..Default::default() };
        let out = train(&task.train, &cfg).unwrap();
        let dir = std::env::temp_dir().join("spherescore-encoder-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ssmd");
        let ckpt = Checkpoint::Spherical { model: out.model, bank: out.bank };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let bytes_a = std::fs::read(&path).unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());

        let ce = train_ce_twin(&task.train, &cfg).unwrap();
        let ce_path = dir.join("model_ce.ssmd");
        let ce_ckpt = Checkpoint::CrossEntropy { model: ce.model };
        save_checkpoint(&ce_ckpt, &ce_path).unwrap();
        assert_eq!(ce_ckpt, load_checkpoint(&ce_path).unwrap());
    }
}
