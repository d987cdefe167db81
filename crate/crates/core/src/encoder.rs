//! Desk-scale point-set encoder.
//!
//! A cloud is split into patches (farthest point sampling for centers, k
//! nearest neighbours around each), each patch is tokenized by a shared
//! point MLP followed by a max over the patch, a random subset of tokens is
//! dropped, and the surviving tokens are mean-pooled and passed through a
//! pooling MLP before projection onto the unit sphere.

use rand::seq::index::sample;
use rand::Rng;

use crate::diffkit::{DiffError, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Mlp, MlpVars, ParamSet};
use crate::rot3::{farthest_point_sample, knn_patches, rotate, PatchSet, PointCloud, UnitQuaternion};

/// Tolerance on the unit norm of an [`Embedding`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub num_patches: usize,
    /// Points per patch (k nearest neighbours, center included).
    pub patch_size: usize,
    /// Patch tokens dropped per view.
    pub mask_count: usize,
    pub token_width: usize,
    /// Linear layers in the token MLP.
    pub token_layers: usize,
    pub pool_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            num_patches: 16,
            patch_size: 16,
            mask_count: 4,
            token_width: 64,
            token_layers: 2,
            pool_width: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embedding_dim < 8 {
            return fail(format!("embedding_dim must be >= 8, got {}", self.embedding_dim));
        }
        if self.num_patches == 0 || self.mask_count >= self.num_patches {
            return fail(format!(
                "need 0 <= mask_count < num_patches, got {} and {}",
                self.mask_count, self.num_patches
            ));
        }
        if self.patch_size == 0 || self.token_layers == 0 || self.token_width == 0 || self.pool_width == 0 {
            return fail("patch_size, token_layers, token_width and pool_width must be >= 1".into());
        }
        Ok(())
    }
}

/// Unit-norm global representation of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps values that are already unit norm (within [`UNIT_NORM_TOL`]).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Config(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n >= crate::diffkit::NORMALIZE_EPS) {
            return Err(DiffError::DegenerateNormalization { row: 0, norm: n }.into());
        }
        Ok(Self(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row(self.0.clone())
    }

    pub fn squared_distance(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token: Mlp,
    pub pool: Mlp,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut token_sizes = vec![3];
        token_sizes.extend(std::iter::repeat_n(cfg.token_width, cfg.token_layers));
        Self {
            token: Mlp::init(&token_sizes, true, rng),
            pool: Mlp::init(&[cfg.token_width, cfg.pool_width, cfg.embedding_dim], true, rng),
        }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.token.input_dim() != 3
            || self.token.layers.len() != cfg.token_layers
            || self.token.output_dim() != cfg.token_width
            || self.pool.input_dim() != cfg.token_width
            || self.pool.output_dim() != cfg.embedding_dim
        {
            return Err(Error::Config("encoder parameters do not match config".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            token: self.token.bind(tape, trainable),
            pool: self.pool.bind(tape, trainable),
        }
    }
}

impl ParamSet for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.token.named("encoder.token");
        out.extend(self.pool.named("encoder.pool"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.token.tensors_mut();
        out.extend(self.pool.tensors_mut());
        out
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    token: MlpVars,
    pool: MlpVars,
}

impl EncoderVars {
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        let mut out = self.token.grads(tape, grads);
        out.extend(self.pool.grads(tape, grads));
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.token.vars();
        out.extend(self.pool.vars());
        out
    }
}

/// The random choices behind one encoding: where FPS starts and which patch
/// tokens are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeNoise {
    pub fps_seed: u64,
    pub dropped: Vec<usize>,
}

impl EncodeNoise {
    pub fn draw<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let fps_seed = rng.random();
        let mut dropped = sample(rng, cfg.num_patches, cfg.mask_count).into_vec();
        dropped.sort_unstable();
        Self { fps_seed, dropped }
    }

    /// No masking, FPS started from `fps_seed`.
    pub fn unmasked(fps_seed: u64) -> Self {
        Self {
            fps_seed,
            dropped: Vec::new(),
        }
    }
}

pub fn patchify(cloud: &PointCloud, cfg: &EncoderConfig, fps_seed: u64) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, cfg.num_patches, fps_seed)?;
    Ok(knn_patches(cloud, &centers, cfg.patch_size)?)
}

/// Records the encoder on `tape` for already-built patches.
pub fn encode_patches_on_tape(
    tape: &mut Tape,
    patches: &PatchSet,
    vars: &EncoderVars,
    dropped: &[usize],
) -> Result<Var> {
    let k = patches.patch_size;
    let flat: Vec<f64> = patches.patches.iter().flatten().copied().collect();
    let x = tape.constant(Tensor::new(patches.patches.len(), 3, flat)?);
    let h = vars.token.forward(tape, x)?;
    let mut tokens = tape.max_pool_rows(h, k)?;
    if !dropped.is_empty() {
        let visible: Vec<usize> = (0..patches.num_patches())
            .filter(|i| !dropped.contains(i))
            .collect();
        tokens = tape.select_rows(tokens, &visible)?;
    }
    let pooled = tape.mean_rows(tokens)?;
    let out = vars.pool.forward(tape, pooled)?;
    Ok(tape.l2_normalize(out)?)
}

pub fn encode_on_tape(
    tape: &mut Tape,
    cloud: &PointCloud,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    noise: &EncodeNoise,
) -> Result<Var> {
    let patches = patchify(cloud, cfg, noise.fps_seed)?;
    encode_patches_on_tape(tape, &patches, vars, &noise.dropped)
}

pub fn encode_with_noise(
    cloud: &PointCloud,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    noise: &EncodeNoise,
) -> Result<Embedding> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let z = encode_on_tape(&mut tape, cloud, &vars, cfg, noise)?;
    Ok(Embedding(tape.value(z).data().to_vec()))
}

/// Encodes one masked view; all randomness comes from `rng`.
pub fn encode<R: Rng + ?Sized>(
    cloud: &PointCloud,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<Embedding> {
    cfg.validate()?;
    let noise = EncodeNoise::draw(cfg, rng);
    encode_with_noise(cloud, params, cfg, &noise)
}

/// Siamese pair `(f(x), f(g x))` with independent noise per branch.
pub fn encode_pair<R: Rng + ?Sized>(
    cloud: &PointCloud,
    g: &UnitQuaternion,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<(Embedding, Embedding)> {
    cfg.validate()?;
    let first = EncodeNoise::draw(cfg, rng);
    let second = EncodeNoise::draw(cfg, rng);
    let z = encode_with_noise(cloud, params, cfg, &first)?;
    let z_plus = encode_with_noise(&rotate(cloud, g), params, cfg, &second)?;
    Ok((z, z_plus))
}
