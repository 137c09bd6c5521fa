//! The three GANomaly networks.
//!
//! * generator: encoder `G_E` (image → latent code) and decoder `G_D`
//!   (latent code → reconstruction, Tanh output),
//! * encoder `E`: same topology as `G_E`, independent parameters, applied
//!   to the reconstruction,
//! * discriminator `D`: strided conv feature stack followed by a 4×4
//!   conv + sigmoid head; the stack's output is the feature map used for
//!   feature matching.
//!
//! Depth follows the input size: `log2(input_size) - 2` stride-2 stages
//! bring the spatial size down to 4×4 (32 → 3 stages, 64 → 4, 128 → 5).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Sequential};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.2;
const KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 32,
            channels: 1,
            latent_dim: 100,
            base_width: 64,
        }
    }
}

impl ArchConfig {
    pub fn new(input_size: usize, channels: usize, latent_dim: usize, base_width: usize) -> Self {
        ArchConfig {
            input_size,
            channels,
            latent_dim,
            base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problems().into_iter().next().map_or(Ok(()), |p| Err(Error::Config(p)))
    }

    /// Every constraint violation, for batch reporting.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_size < 32 || !self.input_size.is_power_of_two() {
            out.push(format!(
                "arch.input_size must be a power of two >= 32, got {}",
                self.input_size
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            out.push(format!("arch.channels must be 1 or 3, got {}", self.channels));
        }
        if self.latent_dim == 0 {
            out.push("arch.latent_dim must be >= 1".into());
        }
        if self.base_width == 0 {
            out.push("arch.base_width must be >= 1".into());
        }
        out
    }

    /// Number of stride-2 down (or up) sampling stages.
    pub fn stages(&self) -> usize {
        self.input_size.trailing_zeros() as usize - 2
    }

    /// Channel width of the 4×4 map at the bottom of the pyramid.
    pub fn top_width(&self) -> usize {
        self.base_width << (self.stages() - 1)
    }

    /// Length of the discriminator feature vector.
    pub fn feature_len(&self) -> usize {
        self.top_width() * 16
    }
}

fn conv_stack(arch: &ArchConfig, first_block_norm: bool, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = arch.channels;
    let mut cout = arch.base_width;
    for stage in 0..arch.stages() {
        layers.push(Layer::Conv(Conv2d::init(cin, cout, KERNEL, 2, 1, rng)));
        if stage > 0 || first_block_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::init(cout, rng)));
        }
        layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
        cin = cout;
        cout *= 2;
    }
    layers
}

fn build_encoder(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = conv_stack(arch, true, rng);
    layers.push(Layer::Conv(Conv2d::init(
        arch.top_width(),
        arch.latent_dim,
        KERNEL,
        1,
        0,
        rng,
    )));
    Sequential::new(layers)
}

fn build_decoder(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut c = arch.top_width();
    let mut layers = vec![
        Layer::ConvT(ConvTranspose2d::init(arch.latent_dim, c, KERNEL, 1, 0, rng)),
        Layer::BatchNorm(BatchNorm2d::init(c, rng)),
        Layer::Relu,
    ];
    for _ in 1..arch.stages() {
        layers.push(Layer::ConvT(ConvTranspose2d::init(c, c / 2, KERNEL, 2, 1, rng)));
        layers.push(Layer::BatchNorm(BatchNorm2d::init(c / 2, rng)));
        layers.push(Layer::Relu);
        c /= 2;
    }
    layers.push(Layer::ConvT(ConvTranspose2d::init(c, arch.channels, KERNEL, 2, 1, rng)));
    layers.push(Layer::Tanh);
    Sequential::new(layers)
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub features: Sequential,
    pub head: Sequential,
}

/// Per-sample discriminator results for a batch.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub probability: Vec<f32>,
    /// `[N, feature_len]`
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub gen_encoder: Sequential,
    pub gen_decoder: Sequential,
    pub encoder: Sequential,
    pub discriminator: Discriminator,
}

/// Network names used in checkpoints and reports.
pub const NETWORK_NAMES: [&str; 5] = [
    "gen_encoder",
    "gen_decoder",
    "encoder",
    "disc_features",
    "disc_head",
];

impl Discriminator {
    pub fn build(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        Discriminator {
            features: Sequential::new(conv_stack(arch, false, rng)),
            head: Sequential::new(vec![
                Layer::Conv(Conv2d::init(arch.top_width(), 1, KERNEL, 1, 0, rng)),
                Layer::Sigmoid,
            ]),
        }
    }
}

pub fn build_models(arch: &ArchConfig, seed: u64) -> Result<ModelBundle> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_encoder = build_encoder(arch, &mut rng);
    let gen_decoder = build_decoder(arch, &mut rng);
    let encoder = build_encoder(arch, &mut rng);
    let discriminator = Discriminator::build(arch, &mut rng);
    Ok(ModelBundle {
        arch: *arch,
        gen_encoder,
        gen_decoder,
        encoder,
        discriminator,
    })
}

/// Forward pass with running batch-norm statistics; no caches, no mutation.
pub fn infer(net: &Sequential, x: &Tensor) -> Result<Tensor> {
    net.infer(x)
}

/// `[N, d, 1, 1]` → `[N, d]`
pub(crate) fn flatten(t: Tensor) -> Result<Tensor> {
    let n = t.batch();
    let rest = t.row_len();
    t.reshape(vec![n, rest])
}

impl ModelBundle {
    pub fn networks(&self) -> [(&'static str, &Sequential); 5] {
        [
            (NETWORK_NAMES[0], &self.gen_encoder),
            (NETWORK_NAMES[1], &self.gen_decoder),
            (NETWORK_NAMES[2], &self.encoder),
            (NETWORK_NAMES[3], &self.discriminator.features),
            (NETWORK_NAMES[4], &self.discriminator.head),
        ]
    }

    pub fn networks_mut(&mut self) -> [(&'static str, &mut Sequential); 5] {
        [
            (NETWORK_NAMES[0], &mut self.gen_encoder),
            (NETWORK_NAMES[1], &mut self.gen_decoder),
            (NETWORK_NAMES[2], &mut self.encoder),
            (NETWORK_NAMES[3], &mut self.discriminator.features),
            (NETWORK_NAMES[4], &mut self.discriminator.head),
        ]
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let a = &self.arch;
        if c != a.channels || h != a.input_size || w != a.input_size {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} images, got {c}x{h}x{w}",
                a.channels, a.input_size, a.input_size
            )));
        }
        Ok(())
    }

    fn check_code(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.shape()[1] != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "latent codes must be [N, {}], got {:?}",
                self.arch.latent_dim,
                z.shape()
            )));
        }
        Ok(())
    }

    /// `z = G_E(x)` in inference mode, shape `[N, d]`.
    pub fn gen_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        flatten(infer(&self.gen_encoder, x)?)
    }

    /// `x̂ = G_D(z)` in inference mode.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_code(z)?;
        let n = z.batch();
        let z4 = z.clone().reshape(vec![n, self.arch.latent_dim, 1, 1])?;
        infer(&self.gen_decoder, &z4)
    }

    /// Reconstruction and latent code: `(x̂, z)` with `z = G_E(x)`, `x̂ = G_D(z)`.
    pub fn generator_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.gen_encode(x)?;
        let x_hat = self.decode(&z)?;
        Ok((x_hat, z))
    }

    /// `ẑ = E(x̂)`, shape `[N, d]`.
    pub fn encode(&self, x_hat: &Tensor) -> Result<Tensor> {
        self.check_input(x_hat)?;
        flatten(infer(&self.encoder, x_hat)?)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        self.check_input(x)?;
        let f = infer(&self.discriminator.features, x)?;
        let p = infer(&self.discriminator.head, &f)?;
        Ok(DiscriminatorOutput {
            probability: p.into_data(),
            features: flatten(f)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, c: usize, s: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(&[n, c, s, s]);
        let mut state = seed;
        for v in t.data_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0;
        }
        t
    }

    fn stride2_convs(net: &Sequential) -> usize {
        net.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv(c) if c.stride == 2))
            .count()
    }

    #[test]
    fn encoder_depth_follows_input_size() {
        let m32 = build_models(&ArchConfig::new(32, 1, 100, 64), 1).unwrap();
        assert_eq!(stride2_convs(&m32.gen_encoder), 3);
        assert_eq!(stride2_convs(&m32.encoder), 3);
        let m64 = build_models(&ArchConfig::new(64, 3, 100, 64), 1).unwrap();
        assert_eq!(stride2_convs(&m64.gen_encoder), 4);
        assert_eq!(stride2_convs(&m64.discriminator.features), 4);
    }

    #[test]
    fn rejects_bad_input_size() {
        for size in [16, 48, 0] {
            let err = build_models(&ArchConfig::new(size, 1, 100, 64), 1).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = ArchConfig::new(32, 1, 8, 4);
        let a = build_models(&arch, 11).unwrap();
        let b = build_models(&arch, 11).unwrap();
        for ((_, na), (_, nb)) in a.networks().iter().zip(b.networks().iter()) {
            for ((_, ta), (_, tb)) in na.state().iter().zip(nb.state().iter()) {
                assert_eq!(ta, tb);
            }
        }
    }

    #[test]
    fn generator_shapes_and_range() {
        let bundle = build_models(&ArchConfig::new(32, 1, 100, 8), 3).unwrap();
        let x = batch(4, 1, 32, 9);
        let (x_hat, z) = bundle.generator_forward(&x).unwrap();
        assert_eq!(x_hat.shape(), &[4, 1, 32, 32]);
        assert_eq!(z.shape(), &[4, 100]);
        assert!(x_hat.max_abs() <= 1.0);
        let (x_hat2, z2) = bundle.generator_forward(&x).unwrap();
        assert_eq!(x_hat, x_hat2);
        assert_eq!(z, z2);
    }

    #[test]
    fn encoder_is_independent_of_generator_encoder() {
        let bundle = build_models(&ArchConfig::new(32, 1, 100, 8), 3).unwrap();
        let x = batch(4, 1, 32, 2);
        let z_hat = bundle.encode(&x).unwrap();
        assert_eq!(z_hat.shape(), &[4, 100]);
        assert_ne!(z_hat, bundle.gen_encode(&x).unwrap());
        assert_eq!(z_hat, bundle.encode(&x).unwrap());
    }

    #[test]
    fn discriminator_outputs() {
        let arch = ArchConfig::new(32, 3, 16, 8);
        let bundle = build_models(&arch, 5).unwrap();
        let out = bundle.discriminate(&batch(3, 3, 32, 4)).unwrap();
        assert_eq!(out.probability.len(), 3);
        assert!(out.probability.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(out.features.shape(), &[3, arch.feature_len()]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let bundle = build_models(&ArchConfig::new(32, 1, 10, 4), 5).unwrap();
        let err = bundle.generator_forward(&batch(1, 1, 64, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = bundle.discriminate(&batch(1, 3, 32, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
