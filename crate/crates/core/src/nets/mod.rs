//! Generator and discriminator architectures.

pub mod attention;
pub mod network;
pub mod ops;
pub mod spec;
pub mod spectral;

use candle_core::{DType, Device};

pub use attention::{attention_matrix, self_attention, AttentionParams};
pub use network::{
    residual_block, residual_branch, subpixel_upsample, ConvParams, Mode, Network, ParamStore, ResidualParams,
};
pub use ops::pixel_shuffle;
pub use spec::{
    receptive_field, Activation, DiscriminatorKind, GeneratorVariant, LayerKind, LayerSpec, NetworkSpec, Norm,
};
pub use spectral::{spectral_normalize, PowerIteration, SpectralEstimate};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Realness scores of a discriminator, one per receptive-field patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Runs a generator on one normalized 3-channel image whose sides are divisible by 4.
pub fn generator_forward(generator: &Network, x: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "generator input must have 3 channels, got {c}"
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "generator input sides must be divisible by 4, got {h}x{w}"
        )));
    }
    let input = x.normalized().to_tensor(generator.dtype(), generator.device())?;
    let y = generator.forward(&input, Mode::Eval)?;
    ImageTensor::from_tensor(&y, ValueRange::Normalized)
}

pub fn discriminator_forward(discriminator: &Network, x: &ImageTensor) -> Result<PatchMap> {
    if x.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "discriminator input must have 3 channels, got {}",
            x.channels()
        )));
    }
    let input = x
        .normalized()
        .to_tensor(discriminator.dtype(), discriminator.device())?;
    let y = discriminator.forward(&input, Mode::Eval)?;
    let (_, c, height, width) = y.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("discriminator emitted {c} channels")));
    }
    let values = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(PatchMap { height, width, values })
}

/// Seeded generator for `variant` in f32 on the CPU.
pub fn build_generator(variant: GeneratorVariant, seed: u64) -> Result<Network> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Network::new(variant.generator_spec(), &mut rng, DType::F32, &Device::Cpu)
}

pub fn build_discriminator(kind: DiscriminatorKind, seed: u64) -> Result<Network> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Network::new(kind.spec(), &mut rng, DType::F32, &Device::Cpu)
}
