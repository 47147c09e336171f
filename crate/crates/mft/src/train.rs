//! Class-weighted BCE training with Adam.

use indexmap::IndexMap;
use mft_autograd::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::ingest::{ClipSample, Flavor};
use crate::model::{forward_on_tape, Bound, MftConfig, MftParameters};
use crate::rng::stream;

const SHUFFLE_STREAM: u64 = 0x5F;
const DROPOUT_STREAM: u64 = 0xD0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    /// Positive weight `n_neg / n_pos` over the training split.
    Ratio,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub class_weighting: ClassWeighting,
    /// Global L2 norm bound on each batch gradient; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-7,
            epochs: 60,
            batch_size: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            class_weighting: ClassWeighting::Ratio,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate used for `flavor`.
    pub fn for_flavor(flavor: Flavor) -> Self {
        TrainConfig {
            learning_rate: match flavor {
                Flavor::Jaad => 5e-7,
                Flavor::Pie => 2e-5,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MftError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Positive-class loss weight for a training split.
pub fn class_weight(labels: &[u8], mode: ClassWeighting) -> Result<f64> {
    match mode {
        ClassWeighting::None => Ok(1.0),
        ClassWeighting::Ratio => {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            let neg = labels.len() - pos;
            if pos == 0 || neg == 0 {
                return Err(MftError::Data(format!(
                    "class weighting needs both classes, got {pos} positive and {neg} negative clips"
                )));
            }
            Ok(neg as f64 / pos as f64)
        }
    }
}

/// Batch-mean `-(w·y·ln p + (1-y)·ln(1-p))` with log arguments clamped at 1e-12.
pub fn weighted_bce(probs: &[f64], labels: &[u8], pos_weight: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(MftError::Contract("loss needs at least one sample".into()));
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(vec![probs.len()], probs.to_vec())?);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let loss = tape.weighted_bce(p, &y, pos_weight)?;
    Ok(tape.value(loss).item())
}

/// First and second moment estimates of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &MftParameters<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: IndexMap<String, Vec<T>> = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![T::zero(); t.numel()]))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut MftParameters<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(MftError::Contract(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(MftError::Contract(format!("no gradient for {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    for (name, p) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let m = state.m.get_mut(name.as_str()).expect("moment per parameter");
        let v = state.v.get_mut(name.as_str()).expect("moment per parameter");
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Weighted BCE of `clips` and its gradient with respect to every parameter.
pub fn loss_and_gradients<T: Real, R: Rng>(
    model: &MftConfig,
    params: &MftParameters<T>,
    clips: &[ClipSample],
    pos_weight: f64,
    training: bool,
    rng: &mut R,
) -> Result<(f64, IndexMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let mut probs = Vec::with_capacity(clips.len());
    for clip in clips {
        probs.push(forward_on_tape(&mut tape, model, &bound, clip, training, rng)?.0);
    }
    let probs = tape.concat(&probs, 0)?;
    let labels: Vec<T> = clips.iter().map(|c| T::of(f64::from(c.label))).collect();
    let loss = tape.weighted_bce(probs, &labels, T::of(pos_weight))?;
    tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, v)| {
            let g = tape
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            (name.clone(), g)
        })
        .collect();
    Ok((tape.value(loss).item().as_f64(), grads))
}

fn clip_global_norm<T: Real>(grads: &mut IndexMap<String, Tensor<T>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub pos_weight: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept as best; the last epoch without validation data.
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub final_params: MftParameters<T>,
    pub best_params: MftParameters<T>,
    pub history: History,
}

/// Trains from a seeded initialization.
pub fn train<T: Real>(
    model: &MftConfig,
    train_clips: &[ClipSample],
    val_clips: &[ClipSample],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let init = MftParameters::init(model, config.seed)?;
    train_from(model, init, train_clips, val_clips, config, &mut |_| {})
}

/// Trains `params` in place of a fresh initialization and reports every
/// finished epoch to `observer`.
pub fn train_from<T: Real>(
    model: &MftConfig,
    mut params: MftParameters<T>,
    train_clips: &[ClipSample],
    val_clips: &[ClipSample],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    config.validate()?;
    params.check_against(model)?;
    if train_clips.is_empty() {
        return Err(MftError::Contract("training split is empty".into()));
    }
    let labels: Vec<u8> = train_clips.iter().map(|c| c.label).collect();
    let pos_weight = class_weight(&labels, config.class_weighting)?;
    let mut state = AdamState::new(&params, config.beta1, config.beta2, config.adam_eps);
    let mut history = History {
        pos_weight,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
    };
    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_clips[i].clone()));
            let mut rng = stream(config.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let located = |e: MftError| match e.category() {
                crate::error::ErrorCategory::Numeric => {
                    MftError::Numeric(format!("epoch {epoch} batch {b}: {e}"))
                }
                _ => e,
            };
            let (loss, mut grads) =
                loss_and_gradients(model, &params, &batch, pos_weight, true, &mut rng)
                    .map_err(located)?;
            if !loss.is_finite() {
                return Err(MftError::Numeric(format!(
                    "epoch {epoch} batch {b}: loss is {loss}"
                )));
            }
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut state, config.learning_rate)?;
            if !params.is_finite() {
                return Err(MftError::Numeric(format!(
                    "epoch {epoch} batch {b}: parameters became non-finite"
                )));
            }
            loss_sum += loss * idx.len() as f64;
        }
        let val = if val_clips.is_empty() {
            None
        } else {
            Some(evaluate(model, &params, val_clips, 0.5)?)
        };
        match &val {
            Some(m) if m.acc > best_acc => {
                best_acc = m.acc;
                best = params.clone();
                history.best_epoch = Some(epoch);
            }
            None => {
                best = params.clone();
                history.best_epoch = Some(epoch);
            }
            _ => {}
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_clips.len() as f64,
            val,
        };
        observer(&record);
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best,
        history,
    })
}
