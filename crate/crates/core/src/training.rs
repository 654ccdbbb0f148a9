//! Teacher-forced maximum-likelihood training with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::seq2seq::net::Net;
use crate::seq2seq::{DescriptorSequence, ModelParams, BOS, EOS, PAD};

/// Sub-batch size for parallel gradient evaluation. Sub-batch gradients are
/// summed in index order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 100,
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.clip_norm > 0.0
            && self.batch_size > 0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// `[BOS, words.., EOS]`.
pub fn frame_target(words: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(words.len() + 2);
    t.push(BOS);
    t.extend_from_slice(words);
    t.push(EOS);
    t
}

/// One training pair: a descriptor sequence and its framed caption.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub seq: &'a DescriptorSequence,
    pub target: &'a [usize],
}

fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
        return Err(Error::contract("target must be framed as BOS ... EOS"));
    }
    Ok(())
}

/// Records the mean per-example loss of `batch` on `net` and returns its node.
fn record_batch_loss(net: &mut Net<'_>, batch: &[Example<'_>], total: usize) -> Result<Var> {
    // equal-length groups share one encoder pass
    let mut groups: BTreeMap<usize, Vec<&Example<'_>>> = BTreeMap::new();
    for ex in batch {
        check_target(ex.target)?;
        groups.entry(ex.seq.len()).or_default().push(ex);
    }
    let mut loss: Option<Var> = None;
    for (m, group) in groups {
        let d = group[0].seq.dim();
        let b = group.len();
        let mut inputs = Vec::with_capacity(m);
        for i in 0..m {
            let mut data = Vec::with_capacity(b * d);
            for ex in &group {
                if ex.seq.dim() != d {
                    return Err(Error::contract("descriptor dimensions differ in batch"));
                }
                data.extend_from_slice(ex.seq.item(i));
            }
            inputs.push(Tensor::matrix(b, d, data)?);
        }
        let (hs, mut state) = net.encode(&inputs)?;
        let cache = net.attention_cache(&hs)?;
        let steps = group.iter().map(|ex| ex.target.len() - 1).max().unwrap();
        for t in 0..steps {
            let mut fed = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for ex in &group {
                let n = ex.target.len() - 1;
                if t < n {
                    fed.push(ex.target[t]);
                    targets.push(ex.target[t + 1]);
                    weights.push(1.0 / (n as f64 * total as f64));
                } else {
                    fed.push(PAD);
                    targets.push(PAD);
                    weights.push(0.0);
                }
            }
            let (next, logits, _) = net.decoder_step(&fed, state, cache.as_ref())?;
            state = next;
            let step_loss = net.g.softmax_cross_entropy(logits, &targets, &weights)?;
            loss = Some(match loss {
                None => step_loss,
                Some(acc) => net.g.add(acc, step_loss)?,
            });
        }
    }
    loss.ok_or_else(|| Error::contract("empty batch"))
}

/// Mean over timesteps of `-ln P(y_t | y_{1:t-1}, z)` under teacher forcing.
pub fn caption_loss(
    params: &ModelParams,
    seq: &DescriptorSequence,
    target: &[usize],
) -> Result<f64> {
    batch_loss(params, &[Example { seq, target }])
}

/// Mean per-example caption loss over a batch.
pub fn batch_loss(params: &ModelParams, batch: &[Example<'_>]) -> Result<f64> {
    let mut net = Net::new(params, None);
    let loss = record_batch_loss(&mut net, batch, batch.len())?;
    Ok(net.g.value(loss).data()[0])
}

fn gradients_of(
    params: &ModelParams,
    batch: &[Example<'_>],
    total: usize,
) -> Result<(f64, ModelParams)> {
    let mut net = Net::new(params, None);
    let loss = record_batch_loss(&mut net, batch, total)?;
    let value = net.g.value(loss).data()[0];
    let grads = net.g.backward(loss)?;
    let mut out = params.zeros_like();
    for (i, (_, t)) in out.tensors_mut().into_iter().enumerate() {
        if let Some(g) = grads.param(i) {
            *t = g;
        }
    }
    Ok((value, out))
}

/// Batch-mean loss and its gradient for every parameter tensor.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[Example<'_>],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let total = batch.len();
    let parts: Vec<Result<(f64, ModelParams)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| gradients_of(params, chunk, total))
        .collect();
    let mut loss = 0.0;
    let mut grads: Option<ModelParams> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    Ok((loss, grads.expect("non-empty batch")))
}

/// Adam first and second moments plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, t)| t.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update after clipping `grads` to `clip_norm`.
///
/// Returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<f64> {
    for (name, g) in grads.tensors() {
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor {name} at index {pos}"
            )));
        }
    }
    let norm = global_norm(grads);
    let clip = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, lr, eps) = (
        config.beta1,
        config.beta2,
        config.learning_rate,
        config.epsilon,
    );
    let slots = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in slots {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk * clip;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochLog {
    /// `epoch<TAB>train_loss<TAB>val_loss`.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.val_loss
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss or gradients became non-finite; `best` holds the last good model.
    Diverged {
        epoch: usize,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest held-out loss seen.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub curve: Vec<EpochLog>,
    pub status: TrainStatus,
}

fn mean_loss(params: &ModelParams, data: &[Example<'_>]) -> Result<f64> {
    let parts: Vec<Result<f64>> = data
        .par_chunks(64)
        .map(|c| batch_loss(params, c).map(|l| l * c.len() as f64))
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len() as f64)
}

/// Trains from `init` with per-epoch seeded shuffling.
///
/// The held-out loss selects the returned parameters; with an empty
/// validation set the training loss is used instead.
pub fn train(
    init: ModelParams,
    train_set: &[Example<'_>],
    val_set: &[Example<'_>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = loss_and_gradients(&params, &batch)?;
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    best,
                    best_epoch,
                    curve,
                    status: TrainStatus::Diverged {
                        epoch,
                        reason: format!("non-finite training loss {loss}"),
                    },
                });
            }
            if let Err(e) = adam_step(&mut params, &grads, &mut state, config) {
                return Ok(TrainOutcome {
                    best,
                    best_epoch,
                    curve,
                    status: TrainStatus::Diverged {
                        epoch,
                        reason: e.to_string(),
                    },
                });
            }
            weighted += loss * batch.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(&params, val_set)?
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&log, &params);
        curve.push(log);
        if !val_loss.is_finite() {
            return Ok(TrainOutcome {
                best,
                best_epoch,
                curve,
                status: TrainStatus::Diverged {
                    epoch,
                    reason: format!("non-finite held-out loss {val_loss}"),
                },
            });
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        curve,
        status: TrainStatus::Completed,
    })
}
