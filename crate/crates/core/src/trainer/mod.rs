//! Desk-scale training: losses, hand-written backpropagation, AdamW with a
//! warmup + cosine schedule, and the training loop.

mod adam;
mod backward;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{logsumexp, Scalar, Tensor};
use crate::model::{write_checkpoint, ModelConfig, ModelParams, Variant};

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use backward::backward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr_fraction: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub z_loss_coeff: f64,
    pub balance_loss_coeff: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            min_lr_fraction: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_fraction: 0.01,
            total_steps: 200,
            batch: 8,
            seq_len: 128,
            z_loss_coeff: 0.0,
            balance_loss_coeff: 0.0,
            seed: 0,
        }
    }
}

/// Coefficients used when auxiliary losses are switched on.
pub const Z_LOSS_COEFF: f64 = 0.001;
pub const BALANCE_LOSS_COEFF: f64 = 0.01;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in (0, 1)"));
        }
        if !open_unit(self.betas.0) || !open_unit(self.betas.1) {
            return Err(Error::config("betas", "both must lie in (0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::config("peak_lr", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config("min_lr_fraction", "must lie in [0, 1]"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.total_steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return Err(Error::config("total_steps/batch/seq_len", "must be positive"));
        }
        if !(self.z_loss_coeff >= 0.0) || !(self.balance_loss_coeff >= 0.0) {
            return Err(Error::config("aux coefficients", "must be non-negative"));
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.balance_loss_coeff != 0.0 && model.variant != Variant::Moe {
            return Err(Error::config(
                "balance_loss_coeff",
                format!("load balancing needs a moe model, got {}", model.variant.name()),
            ));
        }
        if self.z_loss_coeff != 0.0 && model.variant == Variant::Dense {
            return Err(Error::config("z_loss_coeff", "the router z-loss needs a routed model"));
        }
        if self.seq_len > model.max_seq {
            return Err(Error::config("seq_len", format!("exceeds max_seq {}", model.max_seq)));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// Parallel input and target id rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub(crate) fn check(&self, vocab: usize) -> Result<()> {
        if self.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::shape("batch needs matching, non-empty input and target rows"));
        }
        for (i, t) in self.inputs.iter().zip(&self.targets) {
            if i.is_empty() || i.len() != t.len() {
                return Err(Error::shape("each target row must match its input row"));
            }
            if let Some(&id) = t.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::IdOutOfRange { id, vocab });
            }
        }
        Ok(())
    }
}

/// One gradient tensor per parameter tensor, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub grads: ModelParams<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn global_norm(&self) -> f64 {
        self.grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads
            .tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub lm: T,
    /// Unweighted z-loss summed over layers.
    pub z: T,
    /// Unweighted balance loss summed over layers.
    pub balance: T,
    /// `lm + z_coeff·z + balance_coeff·balance`.
    pub total: T,
}

/// Mean token cross-entropy.
pub fn lm_loss<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<T> {
    let &[rows, vocab] = logits.shape() else {
        return Err(Error::shape(format!("logits must be rank 2, got {:?}", logits.shape())));
    };
    if rows != targets.len() || rows == 0 {
        return Err(Error::shape(format!("{} targets for {rows} logit rows", targets.len())));
    }
    let mut total = T::zero();
    for (t, &y) in targets.iter().enumerate() {
        if y as usize >= vocab {
            return Err(Error::IdOutOfRange { id: y, vocab });
        }
        let row = logits.row(t);
        total += logsumexp(row) - row[y as usize];
    }
    Ok(total / T::lit(rows as f64))
}

/// `N · Σ_j f_j · P_j` with `f_j` the fraction of the `T·k` selection slots
/// that went to expert `j` and `P_j` its mean router probability.
pub fn balance_loss<T: Scalar>(router_probs: &Tensor<T>, selections: &[Vec<usize>], n: usize, k: usize) -> Result<T> {
    let rows = router_probs.rows();
    if router_probs.shape() != [rows, n] || selections.len() != rows || rows == 0 {
        return Err(Error::shape(format!(
            "router probs {:?} with {} selections for {n} experts",
            router_probs.shape(),
            selections.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::config("top_k", format!("k = {k} is outside 1..={n}")));
    }
    let mut counts = vec![0usize; n];
    for s in selections {
        if s.len() != k || s.iter().any(|&j| j >= n) {
            return Err(Error::shape(format!("selection {s:?} is not {k} experts below {n}")));
        }
        for &j in s {
            counts[j] += 1;
        }
    }
    let slots = T::lit((rows * k) as f64);
    let mut loss = T::zero();
    for (j, &c) in counts.iter().enumerate() {
        let mut p = T::zero();
        for t in 0..rows {
            p += router_probs.row(t)[j];
        }
        loss += (T::lit(c as f64) / slots) * (p / T::lit(rows as f64));
    }
    Ok(T::lit(n as f64) * loss)
}

/// Mean over tokens of `logsumexp(router_logits)²`.
pub fn z_loss<T: Scalar>(router_logits: &Tensor<T>) -> Result<T> {
    let rows = router_logits.rows();
    if router_logits.shape().len() != 2 || rows == 0 || router_logits.row_len() == 0 {
        return Err(Error::shape(format!("router logits {:?}", router_logits.shape())));
    }
    let mut total = T::zero();
    for t in 0..rows {
        let z = logsumexp(router_logits.row(t));
        total += z * z;
    }
    Ok(total / T::lit(rows as f64))
}

/// Learning rate at `step`: linear warmup to the peak, then cosine decay to
/// `min_lr_fraction · peak` at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::config(
            "step",
            format!("{step} is past total_steps {}", config.total_steps),
        ));
    }
    let peak = config.peak_lr;
    let min = config.min_lr_fraction * peak;
    let warm = config.warmup_steps();
    let s = step as f64;
    if s < warm {
        return Ok(peak * s / warm);
    }
    let span = config.total_steps as f64 - warm;
    if span <= 0.0 {
        return Ok(peak);
    }
    let progress = (s - warm) / span;
    Ok(min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Seed-derived batch of random windows from `corpus`.
pub fn sample_batch(corpus: &[u32], batch: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if corpus.len() < seq_len + 1 {
        return Err(Error::config(
            "corpus",
            format!("{} ids cannot fill a window of {}", corpus.len(), seq_len + 1),
        ));
    }
    let last = corpus.len() - seq_len - 1;
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let o = rng.random_range(0..=last);
        inputs.push(corpus[o..o + seq_len].to_vec());
        targets.push(corpus[o + 1..o + seq_len + 1].to_vec());
    }
    Ok(Batch { inputs, targets })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lm_loss: f64,
    pub z_loss: f64,
    pub balance_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub trace: Vec<StepRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,lm_loss,z_loss,balance_loss,total\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{}",
                r.step, r.lr, r.lm_loss, r.z_loss, r.balance_loss, r.total
            );
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.trace.first().map(|r| r.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.total)
    }
}

/// Runs `total_steps` updates. The loss recorded for step `k` is measured
/// before update `k`, which uses the learning rate `lr_at(k + 1)`.
pub fn train<T: Scalar>(mut params: ModelParams<T>, corpus: &[u32], config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.check_against(&params.config)?;
    if let Some(&id) = corpus.iter().find(|&&id| id as usize >= params.config.vocab) {
        return Err(Error::IdOutOfRange {
            id,
            vocab: params.config.vocab,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&params);
    let mut trace = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let batch = sample_batch(corpus, config.batch, config.seq_len, &mut rng)?;
        let (loss, mut grads) = backward(&params, &batch, config).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
            other => other,
        })?;
        let lr = lr_at(step + 1, config)?;
        adam_step(&mut params, &mut grads, &mut state, lr, config);
        trace.push(StepRecord {
            step,
            lr,
            lm_loss: loss.lm.as_f64(),
            z_loss: loss.z.as_f64(),
            balance_loss: loss.balance.as_f64(),
            total: loss.total.as_f64(),
        });
        if !params.tensors().iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::NonFinite(format!("step {step}: parameters diverged")));
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// [`train`], then writes `checkpoint.bin` and `loss.csv` into `dir`.
pub fn train_and_save<T: Scalar>(
    params: ModelParams<T>,
    corpus: &[u32],
    config: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome<T>> {
    let outcome = train(params, corpus, config)?;
    fs::create_dir_all(dir)?;
    write_checkpoint(&outcome.params, dir.join("checkpoint.bin"))?;
    fs::write(dir.join("loss.csv"), outcome.loss_csv())?;
    Ok(outcome)
}
