//! Rate-decoded cross-entropy over every classifier head, SGD with momentum,
//! the step learning-rate schedule and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::network::{BnUpdate, Mode, Model, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-head loss weights, early classifiers first and the final head last.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    weights: Vec<f64>,
    constrained: bool,
}

impl LossWeights {
    /// Weights that must sum to one.
    pub fn new(weights: &[f64]) -> Result<Self> {
        let w = Self {
            weights: weights.to_vec(),
            constrained: true,
        };
        w.validate()?;
        Ok(w)
    }

    /// Final head fixed to one, every other head weighted `others`.
    pub fn unconstrained(heads: usize, others: f64) -> Result<Self> {
        if heads == 0 {
            return Err(invalid("loss weights", "no heads"));
        }
        let mut weights = vec![others; heads];
        weights[heads - 1] = 1.0;
        let w = Self {
            weights,
            constrained: false,
        };
        w.validate()?;
        Ok(w)
    }

    /// `{0.15, ..., 0.15, rest}` for `heads` heads.
    pub fn default_for(heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(invalid("loss weights", "no heads"));
        }
        let mut weights = vec![0.15; heads];
        weights[heads - 1] = 1.0 - 0.15 * (heads - 1) as f64;
        if weights[heads - 1] < 0.0 {
            return Err(invalid("loss weights", format!("default weights undefined for {heads} heads")));
        }
        Self::new(&weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(invalid("loss weights", "no heads"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(invalid("loss weights", format!("negative or non-finite weight {w}")));
        }
        if self.constrained {
            let s: f64 = self.weights.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid("loss weights", format!("weights sum to {s}, expected 1")));
            }
        } else if self.weights.last() != Some(&1.0) {
            return Err(invalid("loss weights", "unconstrained mode fixes the final weight to 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Mean over the leading time axis: `[T, N, K] -> [N, K]`.
pub fn rate_decode<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    kernels::mean_time(logits)
}

/// Batch-mean cross entropy of decoded logits.
pub fn ce_loss<F: Scalar>(decoded: &Tensor<F>, labels: &[usize]) -> Result<F> {
    Ok(kernels::cross_entropy(decoded, labels)?.0)
}

pub fn total_loss(stage_losses: &[f64], w: &LossWeights) -> Result<f64> {
    if stage_losses.len() != w.len() {
        return Err(invalid(
            "total_loss",
            format!("{} losses for {} weights", stage_losses.len(), w.len()),
        ));
    }
    Ok(stage_losses.iter().zip(w.weights()).map(|(l, w)| l * w).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

/// Classical momentum with coupled L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// `g' = g + wd w; v = mu v + g'; w -= lr v`. Entries with no gradient are
    /// left untouched, decay and momentum included.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>], lr: f64) -> Result<()> {
        self.step_each(params.iter_mut(), grads, lr)
    }

    /// Same as [`Sgd::step`] over the values of model parameters.
    pub fn step_params(&mut self, params: &mut [Param<F>], grads: &[Option<Tensor<F>>], lr: f64) -> Result<()> {
        self.step_each(params.iter_mut().map(|p| &mut p.value), grads, lr)
    }

    fn step_each<'a>(
        &mut self,
        params: impl ExactSizeIterator<Item = &'a mut Tensor<F>>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid("sgd", format!("{} params for {} grads", params.len(), grads.len())));
        }
        if self.velocity.len() < grads.len() {
            self.velocity.resize(grads.len(), None);
        }
        let (mu, wd, lr) = (F::c(self.cfg.momentum), F::c(self.cfg.weight_decay), F::c(lr));
        for ((w, g), v) in params.zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            w.expect_same_shape(g, "sgd param vs grad")?;
            let v = v.get_or_insert_with(|| Tensor::zeros(w.shape()));
            v.expect_same_shape(w, "sgd velocity vs param")?;
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi = *wi - lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            lr0: 0.1,
            lr_decay: 0.1,
            lr_step: 30,
            epochs: 100,
            batch: 64,
            sgd: SgdConfig::default(),
            seed: 0,
            weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) || self.lr_step == 0 || self.batch == 0 {
            return Err(invalid("train config", "lr0, lr decay, lr step and batch must be positive"));
        }
        if !(self.sgd.momentum >= 0.0) || !(self.sgd.weight_decay >= 0.0) {
            return Err(invalid("train config", "momentum and weight decay must be >= 0"));
        }
        self.weights.validate()
    }
}

/// `lr0 * decay^floor(epoch / step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_step) as i32)
}

/// In-memory labelled clips, each `[T, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset<F> {
    pub clips: Vec<Tensor<F>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> FrameDataset<F> {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Stacks the first `t` frames of the selected clips into `[t, N, C, H, W]`.
    pub fn batch(&self, idx: &[usize], t: usize) -> Result<(Tensor<F>, Vec<usize>)> {
        let first = self
            .clips
            .get(*idx.first().ok_or_else(|| invalid("batch", "empty batch"))?)
            .ok_or_else(|| invalid("batch", "index out of range"))?;
        let [tc, c, h, w] = first.dims::<4>("clip [T,C,H,W]")?;
        if tc < t {
            return Err(invalid("batch", format!("clip has {tc} frames, model needs {t}")));
        }
        let frame = c * h * w;
        let n = idx.len();
        let mut out = vec![F::zero(); t * n * frame];
        for (j, &i) in idx.iter().enumerate() {
            let clip = self.clips.get(i).ok_or_else(|| invalid("batch", "index out of range"))?;
            if clip.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "batch clips",
                    left: first.shape().to_vec(),
                    right: clip.shape().to_vec(),
                });
            }
            for s in 0..t {
                out[(s * n + j) * frame..(s * n + j + 1) * frame].copy_from_slice(&clip.data()[s * frame..(s + 1) * frame]);
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![t, n, c, h, w], out)?, labels))
    }
}

/// Per-head loss and correct counts of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub total: f64,
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn count_correct<F: Scalar>(decoded: &Tensor<F>, labels: &[usize]) -> usize {
    let k = decoded.shape()[1];
    decoded
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Forward, weighted loss and backward for one batch. Heads with zero weight
/// are evaluated for reporting but left out of the loss graph. Returns the
/// gradients indexed like `model.params()` together with the batch stats.
pub fn compute_gradients<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(Vec<Option<Tensor<F>>>, StepStats, Vec<BnUpdate<F>>)> {
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, x, true)?;
    let mut heads = out.ec_logits.clone();
    heads.push(out.final_logits);
    let n_heads = model.plan().len();
    if weights.len() != n_heads {
        return Err(invalid(
            "loss weights",
            format!("{} weights for {n_heads} stages", weights.len()),
        ));
    }
    // Without early classifiers only the final head exists.
    let offset = n_heads - heads.len();
    if weights.weights()[..offset].iter().any(|&w| w != 0.0) {
        return Err(invalid("loss weights", "nonzero weight on a missing early classifier"));
    }

    let mut losses = vec![0.0; n_heads];
    let mut correct = vec![0; n_heads];
    let mut terms = Vec::new();
    let mut term_weights = Vec::new();
    for (h, &logits) in heads.iter().enumerate() {
        let slot = h + offset;
        let decoded = tape.mean_time(logits)?;
        correct[slot] = count_correct(tape.value(decoded), labels);
        let loss = tape.cross_entropy(decoded, labels)?;
        losses[slot] = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
        let w = weights.weights()[slot];
        if w != 0.0 {
            terms.push(loss);
            term_weights.push(w);
        }
    }
    let total = total_loss(&losses, weights)?;
    let grads: Gradients<F> = if terms.is_empty() {
        return Err(invalid("loss weights", "all weights are zero"));
    } else {
        let l = tape.weighted_sum(&terms, &term_weights)?;
        tape.backward(l)?
    };
    let per_param = out
        .param_values
        .iter()
        .zip(model.params())
        .map(|(id, p)| match id {
            Some(id) if p.trainable => grads.get(*id).cloned(),
            _ => None,
        })
        .collect();
    Ok((
        per_param,
        StepStats {
            losses,
            correct,
            total,
        },
        out.bn_updates,
    ))
}

/// One SGD step on a batch in train mode.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    sgd: &mut Sgd<F>,
    x: &Tensor<F>,
    labels: &[usize],
    weights: &LossWeights,
    lr: f64,
) -> Result<StepStats> {
    model.set_mode(Mode::Train);
    let (grads, stats, updates) = compute_gradients(model, x, labels, weights)?;
    sgd.step_params(model.params_mut(), &grads, lr)?;
    model.apply_bn_updates(&updates);
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss per head (sample-weighted).
    pub losses: Vec<f64>,
    /// Training accuracy per head in percent.
    pub accuracies: Vec<f64>,
    pub wall_seconds: f64,
}

/// Shuffled pass over `data`; the order is seeded from `(cfg.seed, epoch)`.
pub fn train_epoch<F: Scalar>(
    model: &mut Model<F>,
    sgd: &mut Sgd<F>,
    data: &FrameDataset<F>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let start = Instant::now();
    let lr = lr_at(epoch, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    let t = model.plan().timesteps()[0];
    let heads = model.plan().len();
    let mut losses = vec![0.0; heads];
    let mut correct = vec![0usize; heads];
    for idx in order.chunks(cfg.batch) {
        let (x, labels) = data.batch(idx, t)?;
        let st = train_step(model, sgd, &x, &labels, &cfg.weights, lr)?;
        for h in 0..heads {
            losses[h] += st.losses[h] * idx.len() as f64;
            correct[h] += st.correct[h];
        }
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        losses: losses.iter().map(|l| l / n).collect(),
        accuracies: correct.iter().map(|&c| 100.0 * c as f64 / n).collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Accuracy per head in percent; the last entry is the final head.
    pub accuracies: Vec<f64>,
    pub losses: Vec<f64>,
}

impl EvalMetrics {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracies.last().expect("at least one head")
    }
}

/// Eval-mode accuracy of every head. Early-classifier slots of a model built
/// without them report `NaN`.
pub fn evaluate<F: Scalar>(model: &Model<F>, data: &FrameDataset<F>, batch: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let heads = m.plan().len();
    let t = m.plan().timesteps()[0];
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = vec![0usize; heads];
    let mut losses = vec![0.0; heads];
    let mut present = vec![false; heads];
    for idx in order.chunks(batch.max(1)) {
        let (x, labels) = data.batch(idx, t)?;
        let out = m.forward_train(&x)?;
        let offset = heads - 1 - out.ec_logits.len();
        for (h, logits) in out.ec_logits.iter().chain(std::iter::once(&out.final_logits)).enumerate() {
            let decoded = rate_decode(logits)?;
            correct[h + offset] += count_correct(&decoded, &labels);
            losses[h + offset] += ce_loss(&decoded, &labels)?.to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
            present[h + offset] = true;
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        accuracies: (0..heads)
            .map(|h| if present[h] { 100.0 * correct[h] as f64 / n } else { f64::NAN })
            .collect(),
        losses: (0..heads)
            .map(|h| if present[h] { losses[h] / n } else { f64::NAN })
            .collect(),
    })
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub train: EpochMetrics,
    pub test: EvalMetrics,
}

pub fn metrics_header(heads: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "lr".to_string()];
    cols.extend((1..=heads).map(|i| format!("loss_stage_{i}")));
    cols.extend((1..=heads).map(|i| format!("acc_stage_{i}")));
    cols.push("acc_final_test".into());
    cols.join(",")
}

impl EpochRecord {
    /// CSV row matching [`metrics_header`]; wall time is kept out so rows are
    /// reproducible bit for bit.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.train.epoch.to_string(), format!("{:?}", self.train.lr)];
        cols.extend(self.train.losses.iter().map(|v| format!("{v:?}")));
        cols.extend(self.train.accuracies.iter().map(|v| format!("{v:?}")));
        cols.push(format!("{:?}", self.test.final_accuracy()));
        cols.join(",")
    }
}

/// Full training run. `on_epoch` sees every record and the model after that
/// epoch (for checkpointing).
pub fn fit<F: Scalar>(
    model: &mut Model<F>,
    train: &FrameDataset<F>,
    test: &FrameDataset<F>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<F>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.sgd);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tr = train_epoch(model, &mut sgd, train, cfg, epoch)?;
        let te = evaluate(model, test, cfg.batch)?;
        let rec = EpochRecord { train: tr, test: te };
        on_epoch(&rec, model)?;
        history.push(rec);
    }
    Ok(history)
}
