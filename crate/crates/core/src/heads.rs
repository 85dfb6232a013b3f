//! Output-layer strategies with dual consolidated/temporary weights.
//!
//! The head keeps two weight matrices over the same latent features:
//! `tw` is the working memory trained on the current batch, `cw` the
//! consolidated memory used for inference. Consolidation copies (scaled,
//! mean-shifted, or count-weighted) `tw` rows of the batch classes into `cw`
//! and never touches rows of absent classes — which is what protects the
//! output layer from forgetting.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initialization of the temporary weights before each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Gaussian, mean 0, std 0.01.
    Gaussian001,
    /// All-zero init; avoids spurious confident predictions on fresh weights.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Cwr,
    CwrPlus,
    CwrStar,
}

/// How batch-trained temporary weights are folded into the consolidated ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationPolicy {
    pub variant: HeadVariant,
    /// Batch rescaling weight; configurable for plain CWR only.
    pub batch_weight: f64,
    pub init: HeadInit,
}

impl ConsolidationPolicy {
    /// Plain CWR with Gaussian re-init and an explicit batch weight.
    pub fn cwr(batch_weight: f64) -> Result<Self> {
        if !batch_weight.is_finite() {
            return Err(Error::invalid("batch_weight must be finite"));
        }
        Ok(ConsolidationPolicy {
            variant: HeadVariant::Cwr,
            batch_weight,
            init: HeadInit::Gaussian001,
        })
    }

    /// CWR+: zero init and mean-shift consolidation (all batch weights 1).
    pub fn cwr_plus() -> Self {
        ConsolidationPolicy {
            variant: HeadVariant::CwrPlus,
            batch_weight: 1.0,
            init: HeadInit::Zero,
        }
    }

    /// CWR*: CWR+ plus count-weighted reconsolidation of recurring classes.
    pub fn cwr_star() -> Self {
        ConsolidationPolicy {
            variant: HeadVariant::CwrStar,
            batch_weight: 1.0,
            init: HeadInit::Zero,
        }
    }
}

/// Dual-weight classification head. Row-major matrices of shape
/// `n_classes x feat_dim`, no bias terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub n_classes: usize,
    pub feat_dim: usize,
    pub cw: Vec<f64>,
    pub tw: Vec<f64>,
    pub past_counts: Vec<u64>,
}

impl HeadState {
    pub fn new(n_classes: usize, feat_dim: usize) -> Result<Self> {
        if n_classes < 1 || feat_dim < 1 {
            return Err(Error::invalid("head dims must be >= 1"));
        }
        Ok(HeadState {
            n_classes,
            feat_dim,
            cw: vec![0.0; n_classes * feat_dim],
            tw: vec![0.0; n_classes * feat_dim],
            past_counts: vec![0; n_classes],
        })
    }

    /// Classes consolidated at least once.
    pub fn known_classes(&self) -> BTreeSet<usize> {
        self.past_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    fn row(&self, class: usize) -> std::ops::Range<usize> {
        class * self.feat_dim..(class + 1) * self.feat_dim
    }

    /// Re-initialize the temporary weights per policy.
    pub fn reinit_tw(&mut self, policy: &ConsolidationPolicy, rng: &mut impl Rng) {
        match policy.init {
            HeadInit::Zero => self.tw.iter_mut().for_each(|w| *w = 0.0),
            HeadInit::Gaussian001 => {
                let normal = Normal::new(0.0, 0.01).expect("positive std");
                self.tw.iter_mut().for_each(|w| *w = normal.sample(rng));
            }
        }
    }

    /// Logits of the temporary weights on a latent vector.
    pub fn tw_logits(&self, latent: &[f64]) -> Result<Vec<f64>> {
        self.logits_of(&self.tw, latent)
    }

    fn logits_of(&self, matrix: &[f64], latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.feat_dim {
            return Err(Error::invalid(format!(
                "latent dim {} does not match head feat_dim {}",
                latent.len(),
                self.feat_dim
            )));
        }
        Ok((0..self.n_classes)
            .map(|c| {
                let r = self.row(c);
                matrix[r]
                    .iter()
                    .zip(latent)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
            })
            .collect())
    }

    /// Mean softmax-regression gradient of `tw` over a mini-batch of latents.
    /// Returns (mean loss, gradient matrix, per-example dlogits).
    pub fn tw_minibatch_grads(
        &self,
        latents: &[&[f64]],
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        if latents.is_empty() || latents.len() != labels.len() {
            return Err(Error::invalid("empty or mismatched mini-batch"));
        }
        let mut grad = vec![0.0; self.tw.len()];
        let mut dlogits_all = Vec::with_capacity(latents.len());
        let mut loss_sum = 0.0;
        for (&latent, &label) in latents.iter().zip(labels) {
            if label >= self.n_classes {
                return Err(Error::invalid(format!(
                    "class {label} outside head universe of {}",
                    self.n_classes
                )));
            }
            let logits = self.tw_logits(latent)?;
            let (loss, dlogits) = crate::backbone::softmax_xent(&logits, label)?;
            loss_sum += loss;
            for (c, &d) in dlogits.iter().enumerate() {
                let base = c * self.feat_dim;
                for (j, &v) in latent.iter().enumerate() {
                    grad[base + j] += d * v;
                }
            }
            dlogits_all.push(dlogits);
        }
        let inv = 1.0 / latents.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss_sum * inv, grad, dlogits_all))
    }

    /// Gradient of the loss w.r.t. the latent input, given dlogits:
    /// `tw` transposed times dlogits.
    pub fn tw_latent_grad(&self, dlogits: &[f64]) -> Result<Vec<f64>> {
        if dlogits.len() != self.n_classes {
            return Err(Error::invalid("dlogits arity mismatch"));
        }
        let mut out = vec![0.0; self.feat_dim];
        for (c, &d) in dlogits.iter().enumerate() {
            let base = c * self.feat_dim;
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.tw[base + j] * d;
            }
        }
        Ok(out)
    }

    /// Apply one SGD step to the temporary weights.
    pub fn apply_tw_grad(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.tw.len() {
            return Err(Error::invalid("tw gradient shape mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite head gradient".into()));
        }
        for (w, g) in self.tw.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        Ok(())
    }

    /// Softmax-regression SGD on `tw` over the given latent features, in
    /// mini-batches of `minibatch` examples taken in order. `cw` is untouched.
    /// Returns the mean loss per epoch.
    pub fn train_batch(
        &mut self,
        features: &[(Vec<f64>, usize)],
        epochs: usize,
        lr: f64,
        minibatch: usize,
    ) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Err(Error::invalid("train_batch needs a non-empty feature set"));
        }
        let minibatch = minibatch.max(1);
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut epoch_loss = 0.0;
            let mut chunks = 0;
            for chunk in features.chunks(minibatch) {
                let latents: Vec<&[f64]> = chunk.iter().map(|(x, _)| x.as_slice()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&(_, y)| y).collect();
                let (loss, grad, _) = self.tw_minibatch_grads(&latents, &labels)?;
                self.apply_tw_grad(&grad, lr)?;
                epoch_loss += loss;
                chunks += 1;
            }
            curve.push(epoch_loss / chunks as f64);
        }
        Ok(curve)
    }

    /// Fold the batch-trained temporary rows into the consolidated weights.
    /// Rows of classes outside `batch_classes` are never modified.
    pub fn consolidate(
        &mut self,
        batch_classes: &BTreeSet<usize>,
        policy: &ConsolidationPolicy,
    ) -> Result<()> {
        if batch_classes.is_empty() {
            return Ok(());
        }
        if let Some(&c) = batch_classes.iter().next_back() {
            if c >= self.n_classes {
                return Err(Error::invalid(format!(
                    "class {c} outside head universe of {}",
                    self.n_classes
                )));
            }
        }
        // global average over the entries of the batch-class rows
        let mean = match policy.variant {
            HeadVariant::Cwr => 0.0,
            _ => {
                let mut sum = 0.0;
                for &c in batch_classes {
                    let r = self.row(c);
                    sum += self.tw[r].iter().sum::<f64>();
                }
                sum / (batch_classes.len() * self.feat_dim) as f64
            }
        };
        for &c in batch_classes {
            let r = self.row(c);
            match policy.variant {
                HeadVariant::Cwr => {
                    let w = policy.batch_weight;
                    for j in r.clone() {
                        self.cw[j] = w * self.tw[j];
                    }
                }
                HeadVariant::CwrPlus => {
                    for j in r.clone() {
                        self.cw[j] = self.tw[j] - mean;
                    }
                }
                HeadVariant::CwrStar => {
                    let n = self.past_counts[c] as f64;
                    for j in r.clone() {
                        self.cw[j] = (self.cw[j] * n + (self.tw[j] - mean)) / (n + 1.0);
                    }
                }
            }
            self.past_counts[c] += 1;
        }
        Ok(())
    }

    /// Inference: argmax over consolidated logits, ties to the lowest class id.
    pub fn predict(&self, latent: &[f64]) -> Result<usize> {
        let logits = self.logits_of(&self.cw, latent)?;
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Argmax over the temporary weights (used by the naive baseline).
    pub fn predict_tw(&self, latent: &[f64]) -> Result<usize> {
        let logits = self.logits_of(&self.tw, latent)?;
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Copy all temporary rows into the consolidated matrix verbatim.
    pub fn copy_tw_to_cw(&mut self) {
        self.cw.copy_from_slice(&self.tw);
    }
}
