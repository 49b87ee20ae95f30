//! Checkpoints: safetensors file with JSON metadata.
//!
//! Tensor names are prefixed by role: `G/`, `F/`, `DX/`, `DY/` for network
//! state and `opt_gen/`, `opt_disc/` for optimizer moments.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::training::config::TrainConfig;
use crate::training::optim::Adam;

pub const FORMAT_VERSION: u32 = 1;

/// The four networks of the cycle: `G: X→Y`, `F: Y→X` and their discriminators.
#[derive(Debug)]
pub struct CycleModels {
    pub g: Network,
    pub f: Network,
    pub d_x: Network,
    pub d_y: Network,
}

const ROLES: [&str; 4] = ["G", "F", "DX", "DY"];

impl CycleModels {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dev = Device::Cpu;
        let gen = cfg.variant.generator_spec();
        let disc = cfg.variant.discriminator().spec();
        Ok(Self {
            g: Network::new(gen.clone(), &mut rng, DType::F32, &dev)?,
            f: Network::new(gen, &mut rng, DType::F32, &dev)?,
            d_x: Network::new(disc.clone(), &mut rng, DType::F32, &dev)?,
            d_y: Network::new(disc, &mut rng, DType::F32, &dev)?,
        })
    }

    fn by_role(&self) -> [&Network; 4] {
        [&self.g, &self.f, &self.d_x, &self.d_y]
    }

    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (role, net) in ROLES.iter().zip(self.by_role()) {
            for (name, t) in net.state_dict()? {
                out.insert(format!("{role}/{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn load_state(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (role, net) in ROLES.iter().zip(self.by_role()) {
            net.load_state_dict(&sub_map(tensors, role))?;
        }
        Ok(())
    }

    pub fn generator_params(&self) -> Vec<(String, candle_core::Var)> {
        named(&[("G", &self.g), ("F", &self.f)])
    }

    pub fn discriminator_params(&self) -> Vec<(String, candle_core::Var)> {
        named(&[("DX", &self.d_x), ("DY", &self.d_y)])
    }
}

fn named(nets: &[(&str, &Network)]) -> Vec<(String, candle_core::Var)> {
    nets.iter()
        .flat_map(|(role, net)| {
            net.params()
                .iter()
                .map(move |(n, v)| (format!("{role}/{n}"), v.clone()))
        })
        .collect()
}

fn sub_map(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let prefix = format!("{prefix}/");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub fingerprint: String,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    /// Mean cycle loss of the last completed epoch, if any.
    pub cycle_loss: Option<f64>,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelCheckpoint {
    pub fn capture(
        cfg: &TrainConfig,
        epoch: usize,
        models: &CycleModels,
        opt_gen: &Adam,
        opt_disc: &Adam,
        cycle_loss: Option<f64>,
    ) -> Result<Self> {
        let mut tensors = models.state()?;
        for (prefix, opt) in [("opt_gen", opt_gen), ("opt_disc", opt_disc)] {
            for (k, v) in opt.state()? {
                tensors.insert(format!("{prefix}/{k}"), v);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            epoch,
            fingerprint: cfg.fingerprint()?,
            generator_steps: opt_gen.steps(),
            discriminator_steps: opt_disc.steps(),
            cycle_loss,
            tensors,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Fails unless the checkpoint was produced under `cfg`.
    pub fn verify_config(&self, cfg: &TrainConfig) -> Result<()> {
        let expected = cfg.fingerprint()?;
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                stored: self.fingerprint.clone(),
                expected,
            });
        }
        Ok(())
    }

    pub fn restore_models(&self) -> Result<CycleModels> {
        let models = CycleModels::new(&self.config)?;
        models.load_state(&self.tensors)?;
        Ok(models)
    }

    pub fn restore_optimizers(&self, opt_gen: &mut Adam, opt_disc: &mut Adam) -> Result<()> {
        opt_gen.load_state(self.generator_steps, &sub_map(&self.tensors, "opt_gen"))?;
        opt_disc.load_state(self.discriminator_steps, &sub_map(&self.tensors, "opt_disc"))
    }

    /// The melanoma→flower generator alone, for inference.
    pub fn generator(&self) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Network::new(self.config.variant.generator_spec(), &mut rng, DType::F32, &Device::Cpu)?;
        g.load_state_dict(&sub_map(&self.tensors, "G"))?;
        Ok(g)
    }
}

fn meta(map: &HashMap<String, String>, key: &str, path: &Path) -> Result<String> {
    map.get(key).cloned().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("missing metadata field `{key}`"),
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let err = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut metadata = HashMap::new();
    metadata.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    metadata.insert("epoch".to_string(), ckpt.epoch.to_string());
    metadata.insert("fingerprint".to_string(), ckpt.fingerprint.clone());
    metadata.insert("config".to_string(), serde_json::to_string(&ckpt.config)?);
    metadata.insert("generator_steps".to_string(), ckpt.generator_steps.to_string());
    metadata.insert("discriminator_steps".to_string(), ckpt.discriminator_steps.to_string());
    if let Some(c) = ckpt.cycle_loss {
        metadata.insert("cycle_loss".to_string(), serde_json::to_string(&c)?);
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(ckpt.tensors.iter(), Some(metadata), &tmp).map_err(|e| err(e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let err = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| err(format!("decode error: {e}")))?;
    let metadata = header
        .metadata()
        .clone()
        .ok_or_else(|| err("no metadata block".into()))?;
    let version: u32 = meta(&metadata, "format_version", path)?
        .parse()
        .map_err(|_| err("unreadable format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(err(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let parse_num = |key: &str| -> Result<u64> {
        meta(&metadata, key, path)?
            .parse()
            .map_err(|_| err(format!("unreadable `{key}`")))
    };
    let config: TrainConfig = serde_json::from_str(&meta(&metadata, "config", path)?)?;
    let fingerprint = meta(&metadata, "fingerprint", path)?;
    let recomputed = config.fingerprint()?;
    if recomputed != fingerprint {
        return Err(Error::FingerprintMismatch {
            stored: fingerprint,
            expected: recomputed,
        });
    }
    let cycle_loss = match metadata.get("cycle_loss") {
        Some(s) => Some(serde_json::from_str(s)?),
        None => None,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| err(format!("decode error: {e}")))?
        .into_iter()
        .collect();
    Ok(ModelCheckpoint {
        config,
        epoch: parse_num("epoch")? as usize,
        fingerprint,
        generator_steps: parse_num("generator_steps")?,
        discriminator_steps: parse_num("discriminator_steps")?,
        cycle_loss,
        tensors,
    })
}

/// Loads and checks the checkpoint against the configuration the caller expects.
pub fn load_checkpoint_for(path: &Path, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.verify_config(cfg)?;
    Ok(ckpt)
}
