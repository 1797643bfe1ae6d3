//! Adam training with multi-step learning-rate decay, checkpointing and a
//! per-epoch loss log.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{crop_training_patch, default_patch_size, normalize_sample, NormalizationState, SamplePair, PATCH_MULTIPLE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, lcm};
use crate::gta::NaimaModel;
use crate::objective::total_loss;
use crate::params::ParamStore;

pub use checkpoint::{write_atomic, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Square crop side; `None` picks the per-scale default.
    pub patch_size: Option<usize>,
    /// Validation cadence in epochs; 0 disables it.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_factor: 0.3,
            decay_every: 50,
            epochs: 200,
            batch_size: 1,
            seed: 0,
            patch_size: None,
            val_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// Adam with bias correction, `β = (0.9, 0.999)`, `ε = 1e-8`; no weight
/// decay. Moments are kept per parameter in store order.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Result<Self> {
        let zeros = store
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, vars: &[Var], grads: &GradStore, lr: f64) -> Result<()> {
        if vars.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Everything that evolves during training besides the parameters.
pub struct TrainState {
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// `(epoch, aggregate RMSE in cm)` on the validation split.
    pub validation: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(model: &NaimaModel) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(model.params())?,
            epoch: 0,
            history: Vec::new(),
            validation: Vec::new(),
        })
    }
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for x in [epoch as u64, index as u64] {
        h = (h ^ x).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Square crop side for a sample: the configured patch, shrunk to fit the
/// sample and kept a multiple of both 14 and the scale.
pub fn effective_patch(sample: &SamplePair, requested: Option<usize>) -> Result<usize> {
    let unit = lcm(PATCH_MULTIPLE, sample.scale);
    let (h, w) = sample.hr_dims();
    let patch = requested.unwrap_or_else(|| default_patch_size(sample.scale)).min(h).min(w);
    let patch = patch / unit * unit;
    if patch == 0 {
        return Err(Error::InvalidInput(format!(
            "sample `{}` ({h}x{w}) is too small for a {unit}-pixel training crop",
            sample.id
        )));
    }
    Ok(patch)
}

/// Seeded crop, normalized with the ground-truth depth range.
pub fn prepare_training_sample(sample: &SamplePair, requested: Option<usize>, seed: u64) -> Result<SamplePair> {
    let patch = effective_patch(sample, requested)?;
    let crop = crop_training_patch(sample, patch, seed)?;
    normalize_sample(&crop, &NormalizationState::for_training(&crop)?)
}

/// Loss of one prepared sample as a differentiable scalar.
pub fn sample_loss(model: &NaimaModel, sample: &SamplePair, run: &RunConfig) -> Result<Tensor> {
    let tokens = model.extract_tokens(&sample.rgb)?;
    let pred = model.forward_with_tokens(&sample.rgb, &sample.depth_lr, &tokens, model.variant())?;
    let gt = sample.depth_gt.to_tensor(pred.dtype(), pred.device())?;
    total_loss(&pred, &gt, &run.loss)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Runs epochs `state.epoch .. run.train.epochs`. The order of samples is
/// reshuffled every epoch and each sample gets a fresh seeded crop.
/// `on_epoch` sees each finished record.
pub fn train(
    model: &NaimaModel,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    run: &RunConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    run.train.validate()?;
    run.loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let scale = model.config().scale;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.scale != scale) {
        return Err(Error::Incompatible(format!(
            "sample `{}` has scale {} but the model was built for {scale}",
            s.id, s.scale
        )));
    }
    let fingerprint = model.provider().fingerprint();
    let vars = model.params().vars();
    let cfg = &run.train;
    for epoch in state.epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss: Option<Tensor> = None;
            for &idx in batch {
                let raw = &train_set[idx];
                let abort = |message: String| Error::Training {
                    epoch,
                    sample: raw.id.clone(),
                    message,
                };
                let sample = prepare_training_sample(raw, cfg.patch_size, mix_seed(cfg.seed, epoch, idx))
                    .map_err(|e| e.for_sample(&raw.id))?;
                let loss = sample_loss(model, &sample, run).map_err(|e| abort(e.to_string()))?;
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    return Err(abort(format!("non-finite loss {value}")));
                }
                total += value;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => (acc + loss)?,
                });
            }
            let loss = (batch_loss.expect("chunks are non-empty") / batch.len() as f64)?;
            let grads = loss.backward()?;
            state.adam.step(&vars, &grads, lr)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / train_set.len() as f64,
            lr,
        };
        state.history.push(record);
        state.epoch = epoch + 1;
        if cfg.val_every > 0 && !val_set.is_empty() && state.epoch % cfg.val_every == 0 {
            let report = evaluate(model, val_set)?;
            state.validation.push((state.epoch, report.aggregate_rmse_cm));
        }
        on_epoch(&record);
    }
    if model.provider().fingerprint() != fingerprint {
        return Err(Error::Training {
            epoch: state.epoch,
            sample: String::new(),
            message: "semantic encoder weights changed during training".into(),
        });
    }
    Ok(())
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.lr));
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    f.write_all(loss_csv(history).as_bytes()).map_err(|e| Error::path(path, e))?;
    Ok(())
}
