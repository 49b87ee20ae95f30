//! Inference path behind the `transfer` command and the HTTP service.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{preprocess, LesionType, PreprocessConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nets::{generator_forward, GeneratorVariant, Network};
use crate::training::{load_checkpoint, LATEST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Resolution {
    R256,
    R512,
}

impl Resolution {
    pub const ALL: [Resolution; 2] = [Resolution::R256, Resolution::R512];

    pub fn pixels(self) -> usize {
        match self {
            Resolution::R256 => 256,
            Resolution::R512 => 512,
        }
    }
}

impl TryFrom<u32> for Resolution {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            256 => Ok(Resolution::R256),
            512 => Ok(Resolution::R512),
            other => Err(Error::validation(
                "resolution",
                format!("must be 256 or 512, got {other}"),
            )),
        }
    }
}

impl From<Resolution> for u32 {
    fn from(r: Resolution) -> u32 {
        r.pixels() as u32
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::validation("resolution", format!("must be 256 or 512, got `{s}`")))?;
        Resolution::try_from(v)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pixels())
    }
}

/// Which trained model converts the image, by lesion type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelChoice {
    #[serde(rename = "type_I")]
    TypeI,
    #[serde(rename = "type_II")]
    TypeII,
}

impl ModelChoice {
    pub const ALL: [ModelChoice; 2] = [ModelChoice::TypeI, ModelChoice::TypeII];

    pub fn tag(self) -> &'static str {
        match self {
            ModelChoice::TypeI => "type_I",
            ModelChoice::TypeII => "type_II",
        }
    }

    pub fn lesion_type(self) -> LesionType {
        match self {
            ModelChoice::TypeI => LesionType::I,
            ModelChoice::TypeII => LesionType::II,
        }
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "type_I" => Ok(ModelChoice::TypeI),
            "type_II" => Ok(ModelChoice::TypeII),
            other => Err(Error::validation(
                "model",
                format!("must be type_I or type_II, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Output size: shorter side becomes `resolution`, the longer side scales
/// proportionally, rounded half away from zero.
pub fn target_size(in_w: usize, in_h: usize, resolution: Resolution) -> (usize, usize) {
    let r = resolution.pixels();
    let (w, h) = (in_w.max(1), in_h.max(1));
    let scale = |long: usize, short: usize| ((long as f64) * (r as f64) / (short as f64)).round() as usize;
    if w >= h {
        (scale(w, h), r)
    } else {
        (r, scale(h, w))
    }
}

#[derive(Debug, Clone)]
pub struct TransferRequest {
    pub image: Vec<u8>,
    pub model: ModelChoice,
    pub resolution: Resolution,
}

/// Public description of a loaded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub tag: ModelChoice,
    pub variant: GeneratorVariant,
    pub epoch: usize,
    pub fingerprint: String,
}

#[derive(Debug)]
struct LoadedModel {
    info: ModelInfo,
    generator: Network,
}

/// Generators keyed by model choice; read-only once built.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    models: BTreeMap<ModelChoice, LoadedModel>,
}

impl ModelRegistry {
    /// Path of the checkpoint for `choice` under a registry directory.
    pub fn checkpoint_path(dir: &Path, choice: ModelChoice) -> PathBuf {
        dir.join(choice.tag()).join(LATEST)
    }

    /// Loads `DIR/type_I/latest.safetensors` and `DIR/type_II/latest.safetensors`,
    /// skipping absent ones. A present but invalid checkpoint is an error, as is
    /// a directory with no checkpoints at all.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut reg = Self::default();
        for choice in ModelChoice::ALL {
            let path = Self::checkpoint_path(dir, choice);
            if path.is_file() {
                reg.insert_checkpoint(choice, &path)?;
            }
        }
        if reg.models.is_empty() {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                message: "no type_I/ or type_II/ checkpoint found".into(),
            });
        }
        Ok(reg)
    }

    pub fn insert_checkpoint(&mut self, choice: ModelChoice, path: &Path) -> Result<()> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.config.lesion_filter != choice.lesion_type() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("trained on lesion type {}, not {}", ckpt.config.lesion_filter, choice),
            });
        }
        let generator = ckpt.generator()?;
        self.insert(
            ModelInfo {
                tag: choice,
                variant: ckpt.config.variant,
                epoch: ckpt.epoch,
                fingerprint: ckpt.fingerprint.clone(),
            },
            generator,
        );
        Ok(())
    }

    pub fn insert(&mut self, info: ModelInfo, generator: Network) {
        self.models.insert(info.tag, LoadedModel { info, generator });
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.models.values().map(|m| m.info.clone()).collect()
    }

    pub fn generator(&self, choice: ModelChoice) -> Result<&Network> {
        self.models
            .get(&choice)
            .map(|m| &m.generator)
            .ok_or_else(|| Error::UnknownModel(choice.tag().into()))
    }
}

/// Converts one image and returns it as RGB in `[0, 1]`, sized by [`target_size`].
pub fn transfer_tensor(
    img: &ImageTensor,
    model: ModelChoice,
    resolution: Resolution,
    registry: &ModelRegistry,
) -> Result<ImageTensor> {
    let generator = registry.generator(model)?;
    let cfg = PreprocessConfig {
        working_size: resolution.pixels(),
        ..Default::default()
    };
    let x = preprocess(img, &cfg)?;
    let y = generator_forward(generator, &x)?.denormalized();
    let (w, h) = target_size(img.width(), img.height(), resolution);
    y.resize(w, h)
}

pub fn transfer_image(req: &TransferRequest, registry: &ModelRegistry) -> Result<Vec<u8>> {
    // Check the model before spending time on decoding.
    registry.generator(req.model)?;
    let img = ImageTensor::decode(&req.image)?;
    transfer_tensor(&img, req.model, req.resolution, registry)?.encode_png()
}
