//! The adversarial training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{preprocess, preprocess_train, DatasetManifest, ManifestEntry, UnpairedSampler};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{graph, LossLog, LossRecord, LossWeights};
use crate::nets::Mode;
use crate::training::checkpoint::{load_checkpoint_for, save_checkpoint, CycleModels, ModelCheckpoint};
use crate::training::config::{lr_at_epoch, TrainConfig};
use crate::training::optim::Adam;
use crate::training::pool::HistoryBuffer;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const LATEST: &str = "latest.safetensors";
pub const BEST: &str = "best.safetensors";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Write `latest` every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed epochs even if the schedule runs longer.
    pub stop_after: Option<usize>,
    /// Preprocessed images kept in memory up to this many bytes.
    pub cache_bytes: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            checkpoint_every: 10,
            resume_from: None,
            stop_after: None,
            cache_bytes: 1 << 30,
        }
    }
}

/// Scalar loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub d_x: f64,
    pub d_y: f64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub cycle_xyx: f64,
    pub cycle_yxy: f64,
    pub identity_g: f64,
    pub identity_f: f64,
    pub total_g: f64,
}

impl StepLosses {
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("adv_g", self.adv_g),
            ("adv_f", self.adv_f),
            ("cycle_xyx", self.cycle_xyx),
            ("cycle_yxy", self.cycle_yxy),
            ("identity_g", self.identity_g),
            ("identity_f", self.identity_f),
            ("total_g", self.total_g),
        ]
    }

    pub fn cycle(&self) -> f64 {
        self.cycle_xyx + self.cycle_yxy
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Optimizers and image pools that persist across iterations.
pub struct TrainState {
    pub models: CycleModels,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pool_x: HistoryBuffer<Tensor>,
    pool_y: HistoryBuffer<Tensor>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, models: CycleModels) -> Result<Self> {
        let opt_gen = Adam::new(models.generator_params(), cfg.lr0, cfg.beta1, cfg.beta2)?;
        let opt_disc = Adam::new(models.discriminator_params(), cfg.lr0, cfg.beta1, cfg.beta2)?;
        Ok(Self {
            models,
            opt_gen,
            opt_disc,
            pool_x: HistoryBuffer::new(cfg.history_buffer_size),
            pool_y: HistoryBuffer::new(cfg.history_buffer_size),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_gen.lr = lr;
        self.opt_disc.lr = lr;
    }

    fn pooled(pool: &mut HistoryBuffer<Tensor>, fake: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = fake.dim(0)?;
        let picks = (0..n)
            .map(|i| Ok(pool.push_sample(fake.get(i)?.detach(), rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&picks, 0)?)
    }

    /// One discriminator update followed by one joint generator update.
    pub fn step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
        iteration: usize,
    ) -> Result<StepLosses> {
        let m = &self.models;
        let fake_y = m.g.forward(x, Mode::Train)?;
        let fake_x = m.f.forward(y, Mode::Train)?;

        let pooled_y = Self::pooled(&mut self.pool_y, &fake_y, rng)?;
        let pooled_x = Self::pooled(&mut self.pool_x, &fake_x, rng)?;
        let d_y = graph::lsgan_discriminator(&m.d_y.forward(y, Mode::Train)?, &m.d_y.forward(&pooled_y, Mode::Train)?)?;
        let d_x = graph::lsgan_discriminator(&m.d_x.forward(x, Mode::Train)?, &m.d_x.forward(&pooled_x, Mode::Train)?)?;
        let check = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteLoss {
                    term: name.to_string(),
                    iteration,
                })
            }
        };
        let d_y_v = check("d_y", scalar(&d_y)?)?;
        let d_x_v = check("d_x", scalar(&d_x)?)?;
        let grads = (d_y + d_x)?.backward()?;
        self.opt_disc.step(&grads)?;

        let m = &self.models;
        let zero = || Tensor::zeros((), x.dtype(), x.device());
        let losses = graph::GeneratorLosses {
            adv_g: graph::lsgan_generator(&m.d_y.forward(&fake_y, Mode::Train)?)?,
            adv_f: graph::lsgan_generator(&m.d_x.forward(&fake_x, Mode::Train)?)?,
            cycle_xyx: graph::l1(&m.f.forward(&fake_y, Mode::Train)?, x)?,
            cycle_yxy: graph::l1(&m.g.forward(&fake_x, Mode::Train)?, y)?,
            identity_g: if weights.lambda_identity > 0.0 {
                graph::l1(&m.g.forward(y, Mode::Train)?, y)?
            } else {
                zero()?
            },
            identity_f: if weights.lambda_identity > 0.0 {
                graph::l1(&m.f.forward(x, Mode::Train)?, x)?
            } else {
                zero()?
            },
        };
        let total = losses.total(weights)?;
        let out = StepLosses {
            d_x: d_x_v,
            d_y: d_y_v,
            adv_g: check("adv_g", scalar(&losses.adv_g)?)?,
            adv_f: check("adv_f", scalar(&losses.adv_f)?)?,
            cycle_xyx: check("cycle_xyx", scalar(&losses.cycle_xyx)?)?,
            cycle_yxy: check("cycle_yxy", scalar(&losses.cycle_yxy)?)?,
            identity_g: check("identity_g", scalar(&losses.identity_g)?)?,
            identity_f: check("identity_f", scalar(&losses.identity_f)?)?,
            total_g: check("total_g", scalar(&total)?)?,
        };
        let grads = total.backward()?;
        self.opt_gen.step(&grads)?;
        Ok(out)
    }
}

struct ImageSource {
    cache: HashMap<PathBuf, ImageTensor>,
    budget: usize,
}

impl ImageSource {
    fn load(&mut self, entry: &ManifestEntry, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let pre = cfg.preprocess();
        if let Some(img) = self.cache.get(&entry.path) {
            // cached images are already at working size, so only augmentation applies
            return preprocess_train(&img.denormalized(), &pre, rng);
        }
        let raw = ImageTensor::load(&entry.path)?;
        let base = preprocess(&raw, &pre)?;
        let bytes = base.data().len() * 4;
        if bytes <= self.budget {
            self.budget -= bytes;
            self.cache.insert(entry.path.clone(), base.clone());
        }
        preprocess_train(&base.denormalized(), &pre, rng)
    }

    fn batch(&mut self, entries: &[&ManifestEntry], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let imgs = entries
            .iter()
            .map(|e| self.load(e, cfg, rng)?.to_tensor(DType::F32, &Device::Cpu))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&imgs, 0)?)
    }
}

/// Trains the cycle for `cfg.epochs` epochs, writing checkpoints and the loss log to `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let sampler = UnpairedSampler::new(manifest, cfg.lesion_filter, cfg.seed)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    std::fs::write(out_dir.join("generator.toml"), cfg.variant.generator_spec().to_toml()?)?;
    std::fs::write(
        out_dir.join("discriminator.toml"),
        cfg.variant.discriminator().spec().to_toml()?,
    )?;

    let (mut state, start_epoch, mut best) = match &opts.resume_from {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, cfg)?;
            let mut state = TrainState::new(cfg, ckpt.restore_models()?)?;
            ckpt.restore_optimizers(&mut state.opt_gen, &mut state.opt_disc)?;
            (state, ckpt.epoch, ckpt.cycle_loss)
        }
        None => (TrainState::new(cfg, CycleModels::new(cfg)?)?, 0, None),
    };
    let mut log = if opts.resume_from.is_some() {
        LossLog::append(&out_dir.join(LOSS_LOG))?
    } else {
        LossLog::create(&out_dir.join(LOSS_LOG))?
    };
    let mut images = ImageSource {
        cache: HashMap::new(),
        budget: opts.cache_bytes,
    };
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let per_epoch = sampler.pairs_per_epoch().div_ceil(cfg.batch_size);
    let mut last_cycle = best;
    let every = opts.checkpoint_every.max(1);

    for epoch in start_epoch..end {
        let lr = lr_at_epoch(epoch, cfg)?;
        state.set_lr(lr);
        let first = epoch * per_epoch;
        log.write(&LossRecord {
            iteration: first,
            epoch,
            loss: "lr".into(),
            value: lr,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1_000 + epoch as u64);
        let mut cycle_sum = 0.0;
        let batches = sampler.batches(epoch, cfg.batch_size);
        for (iteration, batch) in (first..).zip(&batches) {
            let xs: Vec<&ManifestEntry> = batch.iter().map(|p| p.0).collect();
            let ys: Vec<&ManifestEntry> = batch.iter().map(|p| p.1).collect();
            let x = images.batch(&xs, cfg, &mut rng)?;
            let y = images.batch(&ys, cfg, &mut rng)?;
            let losses = state.step(&x, &y, &cfg.weights, &mut rng, iteration)?;
            for (name, value) in losses.named() {
                log.write(&LossRecord {
                    iteration,
                    epoch,
                    loss: name.into(),
                    value,
                })?;
            }
            cycle_sum += losses.cycle();
        }
        log.flush()?;
        let mean_cycle = cycle_sum / batches.len().max(1) as f64;
        last_cycle = Some(mean_cycle);
        log::info!(
            "epoch {}/{}: lr {lr:.3e}, mean cycle loss {mean_cycle:.5}",
            epoch + 1,
            cfg.epochs
        );
        let completed = epoch + 1;
        if best.is_none_or(|b| mean_cycle < b) {
            best = Some(mean_cycle);
            let ckpt = ModelCheckpoint::capture(
                cfg,
                completed,
                &state.models,
                &state.opt_gen,
                &state.opt_disc,
                last_cycle,
            )?;
            save_checkpoint(&ckpt, &out_dir.join(BEST))?;
        }
        if completed % every == 0 && completed != end {
            let ckpt = ModelCheckpoint::capture(
                cfg,
                completed,
                &state.models,
                &state.opt_gen,
                &state.opt_disc,
                last_cycle,
            )?;
            save_checkpoint(&ckpt, &out_dir.join(LATEST))?;
        }
    }
    log.flush()?;
    let final_epoch = end.max(start_epoch);
    let ckpt = ModelCheckpoint::capture(
        cfg,
        final_epoch,
        &state.models,
        &state.opt_gen,
        &state.opt_disc,
        last_cycle,
    )?;
    save_checkpoint(&ckpt, &out_dir.join(LATEST))?;
    Ok(ckpt)
}
