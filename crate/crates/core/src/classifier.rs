//! Shared-representation classifier with a fine head and a weak head.
//!
//! `hidden = relu(x W1 + b1)`, `fine = softmax(hidden Wf + bf)`,
//! `weak = softmax(hidden Ww + bw)`. All parameters live in one flat buffer;
//! gradients use the same layout, which keeps the optimizer and the
//! checkpoint format trivial.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Instance;
use crate::math::{argmax, log_sum_exp, softmax_in_place};
use crate::noise::{corrected_loss_and_grad, TransitionMatrix};

/// A feature vector and its class index.
pub type Example<'a> = (&'a [f64], usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub dim: usize,
    pub hidden: usize,
    pub num_fine: usize,
    pub num_coarse: usize,
}

impl Shape {
    fn w_shared(&self) -> std::ops::Range<usize> {
        0..self.dim * self.hidden
    }
    fn b_shared(&self) -> std::ops::Range<usize> {
        let s = self.w_shared().end;
        s..s + self.hidden
    }
    fn w_fine(&self) -> std::ops::Range<usize> {
        let s = self.b_shared().end;
        s..s + self.hidden * self.num_fine
    }
    fn b_fine(&self) -> std::ops::Range<usize> {
        let s = self.w_fine().end;
        s..s + self.num_fine
    }
    fn w_weak(&self) -> std::ops::Range<usize> {
        let s = self.b_fine().end;
        s..s + self.hidden * self.num_coarse
    }
    fn b_weak(&self) -> std::ops::Range<usize> {
        let s = self.w_weak().end;
        s..s + self.num_coarse
    }
    pub fn num_params(&self) -> usize {
        self.b_weak().end
    }
    /// Number of leading parameters that belong to the shared layer.
    fn shared_len(&self) -> usize {
        self.b_shared().end
    }
}

macro_rules! param_views {
    ($($name:ident, $name_mut:ident;)*) => {
        $(
            pub fn $name(&self) -> &[f64] {
                &self.params[self.shape.$name()]
            }
            pub fn $name_mut(&mut self) -> &mut [f64] {
                let r = self.shape.$name();
                &mut self.params[r]
            }
        )*
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    shape: Shape,
    seed: u64,
    params: Vec<f64>,
}

/// Gradient buffer with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    shape: Shape,
    params: Vec<f64>,
}

impl Gradients {
    fn zeros(shape: Shape) -> Self {
        Gradients {
            shape,
            params: vec![0.0; shape.num_params()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    param_views! {
        w_shared, w_shared_mut;
        b_shared, b_shared_mut;
        w_fine, w_fine_mut;
        b_fine, b_fine_mut;
        w_weak, w_weak_mut;
        b_weak, b_weak_mut;
    }
}

/// Which loss a gradient is taken of.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// Cross-entropy of the fine head against fine labels.
    FineCrossEntropy,
    /// Forward-corrected cross-entropy of the weak head against weak labels.
    WeakCorrected(&'a TransitionMatrix),
}

/// Per-sample activations kept for the backward pass.
struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl ClassifierModel {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new(dim: usize, hidden: usize, num_fine: usize, num_coarse: usize, seed: u64) -> Self {
        let shape = Shape {
            dim,
            hidden,
            num_fine,
            num_coarse,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.num_params()];
        let shared_bound = 1.0 / (dim as f64).sqrt();
        let head_bound = 1.0 / (hidden as f64).sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let bound = if i < shape.shared_len() { shared_bound } else { head_bound };
            *p = rng.random_range(-bound..bound);
        }
        ClassifierModel { shape, seed, params }
    }

    /// All-zero parameters.
    pub fn zeros(dim: usize, hidden: usize, num_fine: usize, num_coarse: usize) -> Self {
        let shape = Shape {
            dim,
            hidden,
            num_fine,
            num_coarse,
        };
        ClassifierModel {
            shape,
            seed: 0,
            params: vec![0.0; shape.num_params()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    param_views! {
        w_shared, w_shared_mut;
        b_shared, b_shared_mut;
        w_fine, w_fine_mut;
        b_fine, b_fine_mut;
        w_weak, w_weak_mut;
        b_weak, b_weak_mut;
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.dim {
            return Err(Error::Domain(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.shape.dim
            )));
        }
        Ok(())
    }

    fn hidden_into(&self, x: &[f64], pre: &mut [f64], hidden: &mut [f64]) {
        let h = self.shape.hidden;
        pre.copy_from_slice(self.b_shared());
        let w = self.w_shared();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (p, wij) in pre.iter_mut().zip(&w[i * h..(i + 1) * h]) {
                *p += xi * wij;
            }
        }
        for (hd, &p) in hidden.iter_mut().zip(pre.iter()) {
            *hd = p.max(0.0);
        }
    }

    fn head_logits(&self, hidden: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
        let k = bias.len();
        out.copy_from_slice(bias);
        for (j, &hj) in hidden.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&weights[j * k..(j + 1) * k]) {
                *o += hj * w;
            }
        }
    }

    /// Hidden representation `relu(x W1 + b1)`.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut pre = vec![0.0; self.shape.hidden];
        let mut hidden = vec![0.0; self.shape.hidden];
        self.hidden_into(x, &mut pre, &mut hidden);
        Ok(hidden)
    }

    pub fn fine_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.hidden(x)?;
        let mut z = vec![0.0; self.shape.num_fine];
        self.head_logits(&hidden, self.w_fine(), self.b_fine(), &mut z);
        Ok(z)
    }

    pub fn weak_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.hidden(x)?;
        let mut z = vec![0.0; self.shape.num_coarse];
        self.head_logits(&hidden, self.w_weak(), self.b_weak(), &mut z);
        Ok(z)
    }

    pub fn forward_fine(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.fine_logits(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn forward_weak(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weak_logits(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    fn forward_into(&self, x: &[f64], head: Head, act: &mut Activations) {
        self.hidden_into(x, &mut act.pre, &mut act.hidden);
        let (w, b) = match head {
            Head::Fine => (self.w_fine(), self.b_fine()),
            Head::Weak => (self.w_weak(), self.b_weak()),
        };
        self.head_logits(&act.hidden, w, b, &mut act.out);
    }

    fn activations(&self, head: Head) -> Activations {
        let k = match head {
            Head::Fine => self.shape.num_fine,
            Head::Weak => self.shape.num_coarse,
        };
        Activations {
            pre: vec![0.0; self.shape.hidden],
            hidden: vec![0.0; self.shape.hidden],
            out: vec![0.0; k],
        }
    }

    /// Mean loss over `batch` for the given loss, without gradients.
    pub fn loss(&self, batch: &[Example<'_>], spec: LossSpec<'_>) -> Result<f64> {
        self.validate_batch(batch, spec)?;
        if batch.is_empty() {
            return Ok(0.0);
        }
        let head = spec.head();
        let mut act = self.activations(head);
        let mut scratch = vec![0.0; act.out.len()];
        let mut total = 0.0;
        for &(x, y) in batch {
            self.forward_into(x, head, &mut act);
            total += sample_loss(&mut act.out, y, spec, &mut scratch);
        }
        Ok(total / batch.len() as f64)
    }

    fn validate_batch(&self, batch: &[Example<'_>], spec: LossSpec<'_>) -> Result<()> {
        let classes = match spec {
            LossSpec::FineCrossEntropy => self.shape.num_fine,
            LossSpec::WeakCorrected(t) => {
                if t.dim() != self.shape.num_coarse {
                    return Err(Error::Domain(format!(
                        "transition matrix is {0}x{0}, weak head has {1} classes",
                        t.dim(),
                        self.shape.num_coarse
                    )));
                }
                self.shape.num_coarse
            }
        };
        for &(x, y) in batch {
            self.check_dim(x)?;
            if y >= classes {
                return Err(Error::Domain(format!("label {y} outside [0, {classes})")));
            }
        }
        Ok(())
    }

    /// Writes the mean gradient over `batch` into `grads` and returns the
    /// mean loss. Samples are reduced in batch order.
    fn accumulate_gradients(&self, batch: &[Example<'_>], spec: LossSpec<'_>, grads: &mut Gradients) -> f64 {
        grads.params.iter_mut().for_each(|g| *g = 0.0);
        let shape = self.shape;
        let head = spec.head();
        let (w_head, w_range, b_range) = match head {
            Head::Fine => (self.w_fine(), shape.w_fine(), shape.b_fine()),
            Head::Weak => (self.w_weak(), shape.w_weak(), shape.b_weak()),
        };
        let k = b_range.len();
        let h = shape.hidden;
        let mut act = self.activations(head);
        let mut dz = vec![0.0; k];
        let mut dpre = vec![0.0; h];
        let mut total = 0.0;

        for &(x, y) in batch {
            self.forward_into(x, head, &mut act);
            total += sample_loss(&mut act.out, y, spec, &mut dz);

            let g = &mut grads.params;
            for (gb, d) in g[b_range.clone()].iter_mut().zip(&dz) {
                *gb += d;
            }
            let gw = &mut g[w_range.clone()];
            for (j, &hj) in act.hidden.iter().enumerate() {
                let row_w = &w_head[j * k..(j + 1) * k];
                let mut back = 0.0;
                for c in 0..k {
                    back += row_w[c] * dz[c];
                }
                if hj != 0.0 {
                    for (gwc, d) in gw[j * k..(j + 1) * k].iter_mut().zip(&dz) {
                        *gwc += hj * d;
                    }
                }
                dpre[j] = if act.pre[j] > 0.0 { back } else { 0.0 };
            }
            for (gb, d) in g[shape.b_shared()].iter_mut().zip(&dpre) {
                *gb += d;
            }
            let gw1 = &mut g[shape.w_shared()];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (gwij, d) in gw1[i * h..(i + 1) * h].iter_mut().zip(&dpre) {
                    *gwij += xi * d;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grads.params.iter_mut().for_each(|g| *g *= scale);
        total * scale
    }

    /// Analytic gradient of the mean loss over a non-empty batch.
    pub fn gradients(&self, batch: &[Example<'_>], spec: LossSpec<'_>) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Domain("gradient of an empty batch".into()));
        }
        self.validate_batch(batch, spec)?;
        let mut grads = Gradients::zeros(self.shape);
        let loss = self.accumulate_gradients(batch, spec, &mut grads);
        Ok((loss, grads))
    }

    /// Argmax of the fine head, lowest class on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.fine_logits(x)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            shape: self.shape,
            seed: self.seed,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Domain(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.params.len() != ckpt.shape.num_params() {
            return Err(Error::Domain(format!(
                "checkpoint holds {} parameters, shape needs {}",
                ckpt.params.len(),
                ckpt.shape.num_params()
            )));
        }
        Ok(ClassifierModel {
            shape: ckpt.shape,
            seed: ckpt.seed,
            params: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_checkpoint(ckpt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Fine,
    Weak,
}

impl LossSpec<'_> {
    fn head(&self) -> Head {
        match self {
            LossSpec::FineCrossEntropy => Head::Fine,
            LossSpec::WeakCorrected(_) => Head::Weak,
        }
    }
}

/// Loss of one sample from its logits; leaves `dloss/dlogits` in `dz`.
/// `logits` is overwritten with the softmax probabilities.
fn sample_loss(logits: &mut [f64], y: usize, spec: LossSpec<'_>, dz: &mut [f64]) -> f64 {
    match spec {
        LossSpec::FineCrossEntropy => {
            let loss = log_sum_exp(logits) - logits[y];
            softmax_in_place(logits);
            dz.copy_from_slice(logits);
            dz[y] -= 1.0;
            loss
        }
        LossSpec::WeakCorrected(t) => {
            softmax_in_place(logits);
            corrected_loss_and_grad(logits, t, y, dz)
        }
    }
}

const CHECKPOINT_FORMAT: &str = "weakal-classifier";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: Shape,
    pub seed: u64,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop the fine phase after this many epochs without a validation
    /// improvement. `None` runs every epoch.
    pub patience: Option<usize>,
    /// Keep the shared layer fixed while fitting fine labels.
    pub freeze_shared_in_fine_phase: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 64,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: None,
            freeze_shared_in_fine_phase: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch_size and hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer decay rates must lie in [0, 1), epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Weak,
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    /// Fine cross-entropy on the validation set, `None` without one.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned snapshot.
    pub best: Option<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig, skip: usize) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in skip..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Weak-then-fine training with validation-based snapshot selection.
///
/// Phase one fits the weak head (and the shared layer) to `weak_set` under
/// the forward-corrected loss; phase two fits the fine head to `full_set`.
/// An empty set skips its phase. After every epoch of either phase the fine
/// cross-entropy on `val_set` is recorded, and the parameters of the epoch
/// with the lowest value are returned.
pub fn train(
    mut model: ClassifierModel,
    full_set: &[Example<'_>],
    weak_set: &[Example<'_>],
    t: &TransitionMatrix,
    val_set: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    cfg.validate()?;
    model.validate_batch(weak_set, LossSpec::WeakCorrected(t))?;
    model.validate_batch(full_set, LossSpec::FineCrossEntropy)?;
    model.validate_batch(val_set, LossSpec::FineCrossEntropy)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut grads = Gradients::zeros(model.shape);
    let mut order: Vec<usize> = Vec::new();
    let mut batch: Vec<Example<'_>> = Vec::with_capacity(cfg.batch_size);

    let phases = [
        (Phase::Weak, weak_set, LossSpec::WeakCorrected(t)),
        (Phase::Fine, full_set, LossSpec::FineCrossEntropy),
    ];
    for (phase, data, spec) in phases {
        if data.is_empty() {
            continue;
        }
        let skip = if phase == Phase::Fine && cfg.freeze_shared_in_fine_phase {
            model.shape.shared_len()
        } else {
            0
        };
        let mut adam = Adam::new(model.params.len());
        let mut since_improvement = 0;
        for epoch in 0..cfg.epochs {
            order.clear();
            order.extend(0..data.len());
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| data[i]));
                let loss = model.accumulate_gradients(&batch, spec, &mut grads);
                if !loss.is_finite() {
                    return Err(Error::Training { epoch, batch: b });
                }
                epoch_loss += loss * batch.len() as f64;
                adam.update(&mut model.params, &grads.params, cfg, skip);
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: order.len().div_ceil(cfg.batch_size),
                });
            }

            let val_loss = if val_set.is_empty() {
                None
            } else {
                Some(model.loss(val_set, LossSpec::FineCrossEntropy)?)
            };
            history.epochs.push(EpochRecord {
                phase,
                epoch,
                train_loss: epoch_loss / data.len() as f64,
                val_loss,
            });
            if let Some(v) = val_loss {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, model.params.clone()));
                    history.best = Some(history.epochs.len() - 1);
                    since_improvement = 0;
                } else {
                    since_improvement += 1;
                }
            }
            if phase == Phase::Fine && cfg.patience.is_some_and(|p| since_improvement >= p) {
                break;
            }
        }
    }

    match best {
        Some((_, params)) => model.params = params,
        None if !history.epochs.is_empty() => history.best = Some(history.epochs.len() - 1),
        None => {}
    }
    Ok((model, history))
}

/// Fraction of `test_set` whose fine argmax equals the true fine label.
pub fn evaluate(model: &ClassifierModel, test_set: &[&Instance]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0usize;
    for inst in test_set {
        if model.predict(inst.features())? == inst.reveal_fine() {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}
