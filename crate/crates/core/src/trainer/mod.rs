//! Joint training of the encoder and the weight predictor.
//!
//! Every optimizer step encodes each cloud of the batch twice (the original
//! and a randomly rotated copy), projects the first embedding with the
//! predicted weight for that rotation, and scores it against the second and
//! against pseudo-negatives built from random rotations. Items are
//! differentiated on their own tapes, possibly in parallel; the only term
//! that couples them, uniformity, is folded in through its gradient with
//! respect to each embedding. Per-item gradients are summed in item order,
//! so sequential and parallel runs agree bit for bit.

mod checkpoint;
mod dataset;
mod optim;

pub use checkpoint::{config_digest, format_id, hex, Checkpoint, FORMAT_VERSION};
pub use dataset::{generate_dataset, ShapeKind, SyntheticShapeSpec};
pub use optim::{adam_step, lr_schedule, AdamState};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::config::{self, value, Section};
use crate::cope::{cope_features_on_tape, mean_pairwise_spread, project_features_on_tape, CopeConfig, CopeParams};
use crate::diffkit::{Tape, Tensor, Var};
use crate::encoder::{encode_on_tape, EncodeNoise, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{cope_term_on_tape, uniformity_on_tape, LossConfig, LossParts, NegativeGradient, NegativeSampling};
use crate::par::Execution;
use crate::params::ParamSet;
use crate::rng::stream;
use crate::rot3::{rotate, sample_rotation_up_to, sample_uniform_quaternion, PointCloud, UnitQuaternion};

/// Distribution of a training rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationSampling {
    /// Haar-uniform on SO(3); small angles are rare.
    UniformSo3,
    /// Angle uniform on `[0, pi]`, axis uniform: the evaluation protocol's
    /// distribution at `theta_max = 180`.
    UniformAngle,
}

impl RotationSampling {
    pub fn sample<R: rand::Rng + ?Sized>(self, rng: &mut R) -> UnitQuaternion {
        match self {
            RotationSampling::UniformSo3 => sample_uniform_quaternion(rng),
            RotationSampling::UniformAngle => sample_rotation_up_to(rng, std::f64::consts::PI),
        }
    }
}

impl fmt::Display for RotationSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationSampling::UniformSo3 => "uniform_so3",
            RotationSampling::UniformAngle => "uniform_angle",
        })
    }
}

/// Orientation of the anchor view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorPose {
    /// Anchors keep the generator's pose.
    Canonical,
    /// Half the items swap roles: the anchor is `g^-1 x` and the positive
    /// is `x`, so the predictor also learns to map posed inputs back.
    Swap,
    /// Every anchor gets a Haar-uniform orientation.
    Uniform,
}

impl AnchorPose {
    /// Anchor orientation for training rotation `g`.
    pub fn sample<R: rand::Rng + ?Sized>(self, g: &UnitQuaternion, rng: &mut R) -> UnitQuaternion {
        match self {
            AnchorPose::Canonical => UnitQuaternion::IDENTITY,
            AnchorPose::Swap => {
                if rng.random_bool(0.5) {
                    g.inverse()
                } else {
                    UnitQuaternion::IDENTITY
                }
            }
            AnchorPose::Uniform => sample_uniform_quaternion(rng),
        }
    }
}

impl fmt::Display for AnchorPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorPose::Canonical => "canonical",
            AnchorPose::Swap => "swap",
            AnchorPose::Uniform => "uniform",
        })
    }
}

impl FromStr for AnchorPose {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "canonical" => Ok(AnchorPose::Canonical),
            "swap" => Ok(AnchorPose::Swap),
            "uniform" => Ok(AnchorPose::Uniform),
            _ => Err("expected canonical, swap or uniform".into()),
        }
    }
}

impl FromStr for RotationSampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform_so3" => Ok(RotationSampling::UniformSo3),
            "uniform_angle" => Ok(RotationSampling::UniformAngle),
            _ => Err("expected uniform_so3 or uniform_angle".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs of pose fine-tuning after pretraining (0 disables it).
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Keep the uniformity term while fine-tuning (weighted by `1 - beta`).
    pub finetune_uniformity: bool,
    pub finetune_mask_count: usize,
    /// Start farthest point sampling at the same index in both views.
    pub finetune_shared_fps: bool,
    /// How the training rotation `g` is drawn while fine-tuning.
    pub finetune_rotation: RotationSampling,
    /// Anchor orientation while pretraining.
    pub anchor_pose: AnchorPose,
    /// Anchor orientation while fine-tuning.
    pub finetune_anchor_pose: AnchorPose,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub cope: CopeConfig,
    pub dataset: SyntheticShapeSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 10,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            finetune_epochs: 0,
            finetune_lr: 1e-3,
            finetune_uniformity: false,
            finetune_mask_count: 0,
            finetune_shared_fps: true,
            finetune_rotation: RotationSampling::UniformAngle,
            anchor_pose: AnchorPose::Swap,
            finetune_anchor_pose: AnchorPose::Swap,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            cope: CopeConfig::default(),
            dataset: SyntheticShapeSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.finetune_lr > 0.0) {
            return Err(Error::Config("lr and finetune_lr must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.dataset.instances < 2 {
            return Err(Error::Config("need at least 2 training clouds".into()));
        }
        if self.finetune_mask_count >= self.encoder.num_patches {
            return Err(Error::Config("finetune_mask_count must be < num_patches".into()));
        }
        if self.encoder.embedding_dim != self.cope.embedding_dim {
            return Err(Error::Config("encoder and predictor disagree on embedding_dim".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.cope.validate()?;
        self.dataset.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.finetune_epochs
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        config::apply(text, &mut [&mut cfg])?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        config::render(&[self])
    }
}

impl Section for TrainConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let l = &self.loss;
        let e = &self.encoder;
        let c = &self.cope;
        let d = &self.dataset;
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_uniformity", self.finetune_uniformity.to_string()),
            ("finetune_mask_count", self.finetune_mask_count.to_string()),
            ("finetune_shared_fps", self.finetune_shared_fps.to_string()),
            ("finetune_rotation", self.finetune_rotation.to_string()),
            ("anchor_pose", self.anchor_pose.to_string()),
            ("finetune_anchor_pose", self.finetune_anchor_pose.to_string()),
            ("tau", l.tau.to_string()),
            ("beta", l.beta.to_string()),
            ("num_negatives", l.num_negatives.to_string()),
            (
                "negative_sampling",
                match l.negative_sampling {
                    NegativeSampling::PerSample => "per_sample",
                    NegativeSampling::PerBatch => "per_batch",
                }
                .to_string(),
            ),
            (
                "negative_gradient",
                match l.negative_gradient {
                    NegativeGradient::Full => "full",
                    NegativeGradient::Detached => "detached",
                }
                .to_string(),
            ),
            ("embedding_dim", e.embedding_dim.to_string()),
            ("num_patches", e.num_patches.to_string()),
            ("patch_size", e.patch_size.to_string()),
            ("mask_count", e.mask_count.to_string()),
            ("token_width", e.token_width.to_string()),
            ("token_layers", e.token_layers.to_string()),
            ("pool_width", e.pool_width.to_string()),
            ("reduction", c.reduction.to_string()),
            ("harmonic_freqs", c.harmonic_freqs.to_string()),
            ("trunk_depth", c.trunk_depth.to_string()),
            ("trunk_width", c.trunk_width.to_string()),
            ("expansion_depth", c.expansion_depth.to_string()),
            ("expansion_width", c.expansion_width.to_string()),
            ("shape_kind", d.shape_kind.to_string()),
            ("points_per_cloud", d.points_per_cloud.to_string()),
            ("jitter", d.jitter.to_string()),
            ("instances", d.instances.to_string()),
            ("dataset_seed", d.dataset_seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = value(key, raw)?,
            "weight_decay" => self.weight_decay = value(key, raw)?,
            "warmup_epochs" => self.warmup_epochs = value(key, raw)?,
            "epochs" => self.epochs = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "finetune_epochs" => self.finetune_epochs = value(key, raw)?,
            "finetune_lr" => self.finetune_lr = value(key, raw)?,
            "finetune_uniformity" => self.finetune_uniformity = value(key, raw)?,
            "finetune_mask_count" => self.finetune_mask_count = value(key, raw)?,
            "finetune_shared_fps" => self.finetune_shared_fps = value(key, raw)?,
            "finetune_rotation" => self.finetune_rotation = value(key, raw)?,
            "anchor_pose" => self.anchor_pose = value(key, raw)?,
            "finetune_anchor_pose" => self.finetune_anchor_pose = value(key, raw)?,
            "tau" => self.loss.tau = value(key, raw)?,
            "beta" => self.loss.beta = value(key, raw)?,
            "num_negatives" => self.loss.num_negatives = value(key, raw)?,
            "negative_sampling" => {
                self.loss.negative_sampling = match raw {
                    "per_sample" => NegativeSampling::PerSample,
                    "per_batch" => NegativeSampling::PerBatch,
                    _ => return Err(Error::Config(format!("bad value `{raw}` for `{key}`"))),
                }
            }
            "negative_gradient" => {
                self.loss.negative_gradient = match raw {
                    "full" => NegativeGradient::Full,
                    "detached" => NegativeGradient::Detached,
                    _ => return Err(Error::Config(format!("bad value `{raw}` for `{key}`"))),
                }
            }
            "embedding_dim" => {
                self.encoder.embedding_dim = value(key, raw)?;
                self.cope.embedding_dim = self.encoder.embedding_dim;
            }
            "num_patches" => self.encoder.num_patches = value(key, raw)?,
            "patch_size" => self.encoder.patch_size = value(key, raw)?,
            "mask_count" => self.encoder.mask_count = value(key, raw)?,
            "token_width" => self.encoder.token_width = value(key, raw)?,
            "token_layers" => self.encoder.token_layers = value(key, raw)?,
            "pool_width" => self.encoder.pool_width = value(key, raw)?,
            "reduction" => self.cope.reduction = value(key, raw)?,
            "harmonic_freqs" => self.cope.harmonic_freqs = value(key, raw)?,
            "trunk_depth" => self.cope.trunk_depth = value(key, raw)?,
            "trunk_width" => self.cope.trunk_width = value(key, raw)?,
            "expansion_depth" => self.cope.expansion_depth = value(key, raw)?,
            "expansion_width" => self.cope.expansion_width = value(key, raw)?,
            "shape_kind" => self.dataset.shape_kind = value(key, raw)?,
            "points_per_cloud" => self.dataset.points_per_cloud = value(key, raw)?,
            "jitter" => self.dataset.jitter = value(key, raw)?,
            "instances" => self.dataset.instances = value(key, raw)?,
            "dataset_seed" => self.dataset.dataset_seed = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Encoder and predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub cope: CopeParams,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut rng = stream(cfg.seed, "init", &[]);
        let encoder = EncoderParams::init(&cfg.encoder, &mut rng);
        let cope = CopeParams::init(&cfg.cope, &mut rng);
        Self { encoder, cope }
    }

    /// Overwrites every parameter from `tensors` (matched by name and shape).
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let found = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if found.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    found.shape(),
                    slot.shape()
                )));
            }
            *slot = found.clone();
        }
        Ok(())
    }

    /// Restores a model and its config from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Model)> {
        let cfg = TrainConfig::parse(&ckpt.config_text)?;
        let mut model = Model::init(&cfg);
        model.load_tensors(&ckpt.tensors)?;
        Ok((cfg, model))
    }

    fn encoder_tensor_count(&self) -> usize {
        self.encoder.named().len()
    }
}

impl ParamSet for Model {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.cope.named());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.cope.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// What one optimizer step optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub cope: CopeConfig,
    pub unif_weight: f64,
}

/// One training example with all its randomness already drawn.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub cloud: &'a PointCloud,
    /// Orientation of the anchor view; the positive view is `g * base`.
    pub base: UnitQuaternion,
    pub g: UnitQuaternion,
    pub noise: EncodeNoise,
    pub noise_rotated: EncodeNoise,
    pub negatives: Vec<UnitQuaternion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Gradient of the batch objective, in [`ParamSet::named`] order.
    pub grads: Vec<Tensor>,
    pub parts: LossParts,
    pub total: f64,
    pub spread: f64,
}

struct ItemPass {
    tape: Tape,
    grad_vars: Vec<Var>,
    z: Var,
    align: Var,
    cope: Var,
    z_value: Vec<f64>,
    spread: f64,
}

fn item_forward(model: &Model, item: &BatchItem<'_>, s: &StepSettings) -> Result<ItemPass> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape, true);
    let cv = model.cope.bind(&mut tape, true);
    let anchor_cloud = rotate(item.cloud, &item.base);
    let z = encode_on_tape(&mut tape, &anchor_cloud, &enc, &s.encoder, &item.noise)?;
    let z_plus = encode_on_tape(&mut tape, &rotate(&anchor_cloud, &item.g), &enc, &s.encoder, &item.noise_rotated)?;
    let q = tape.constant(Tensor::row(item.g.to_array().to_vec()));
    let features = cope_features_on_tape(&mut tape, q, &cv, &s.cope)?;
    let anchor = project_features_on_tape(&mut tape, z, features, &cv)?;
    let align = tape.squared_distance(anchor, z_plus)?;
    let z_neg = match s.loss.negative_gradient {
        NegativeGradient::Full => z,
        NegativeGradient::Detached => tape.detach(z),
    };
    let mut negs = Vec::with_capacity(item.negatives.len());
    for g_r in &item.negatives {
        let q_r = tape.constant(Tensor::row(g_r.to_array().to_vec()));
        let f_r = cope_features_on_tape(&mut tape, q_r, &cv, &s.cope)?;
        negs.push(project_features_on_tape(&mut tape, z_neg, f_r, &cv)?);
    }
    let neg_rows: Vec<&[f64]> = negs.iter().map(|v| tape.value(*v).data()).collect();
    let spread = mean_pairwise_spread(&neg_rows);
    let stacked = tape.concat_rows(&negs)?;
    let cope = cope_term_on_tape(&mut tape, anchor, stacked, z_plus, s.loss.tau)?;
    let mut grad_vars = enc.vars();
    grad_vars.extend(cv.vars());
    let z_value = tape.value(z).data().to_vec();
    Ok(ItemPass {
        tape,
        grad_vars,
        z,
        align,
        cope,
        z_value,
        spread,
    })
}

fn item_backward(mut pass: ItemPass, coupling: Option<Tensor>, s: &StepSettings, n: usize) -> Result<Vec<Tensor>> {
    let tape = &mut pass.tape;
    let inv_n = 1.0 / n as f64;
    let mut loss = tape.scale(pass.align, inv_n);
    if s.loss.beta > 0.0 {
        let c = tape.scale(pass.cope, s.loss.beta * inv_n);
        loss = tape.add(loss, c)?;
    }
    if let Some(c) = coupling {
        // <c, z> carries the uniformity gradient c = d unif / d z into this item
        let c = tape.constant(c);
        let prod = tape.mul(pass.z, c)?;
        let dot = tape.sum(prod);
        loss = tape.add(loss, dot)?;
    }
    let grads = tape.backward(loss)?;
    Ok(pass.grad_vars.iter().map(|v| grads.wrt_or_zeros(tape, *v)).collect())
}

/// Gradient and loss parts of one batch.
pub fn batch_gradients(
    model: &Model,
    items: &[BatchItem<'_>],
    s: &StepSettings,
    execution: Execution,
) -> Result<BatchResult> {
    let n = items.len();
    let passes = execution
        .map(items, |item| item_forward(model, item, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let d = s.encoder.embedding_dim;
    let zs = Tensor::new(n, d, passes.iter().flat_map(|p| p.z_value.iter().copied()).collect())?;
    let mut tape = Tape::new();
    let zv = tape.leaf(zs);
    let unif = uniformity_on_tape(&mut tape, zv, s.loss.tau)?;
    let unif_value = tape.value(unif).item();
    let couplings: Vec<Option<Tensor>> = if s.unif_weight != 0.0 {
        let g = tape.backward(unif)?.wrt_or_zeros(&tape, zv);
        (0..n)
            .map(|i| Some(Tensor::row(g.row_slice(i).iter().map(|v| v * s.unif_weight).collect())))
            .collect()
    } else {
        vec![None; n]
    };

    let align = passes.iter().map(|p| p.tape.value(p.align).item()).sum::<f64>() / n as f64;
    let cope = passes.iter().map(|p| p.tape.value(p.cope).item()).sum::<f64>() / n as f64;
    let spread = passes.iter().map(|p| p.spread).sum::<f64>() / n as f64;
    let parts = LossParts { align, cope, unif: unif_value };
    let total = align + s.loss.beta * cope + s.unif_weight * unif_value;

    let work: Vec<(ItemPass, Option<Tensor>)> = passes.into_iter().zip(couplings).collect();
    let per_item = execution
        .map_owned(work, |(pass, c)| item_backward(pass, c, s, n))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut grads = per_item[0].clone();
    for item in &per_item[1..] {
        for (acc, g) in grads.iter_mut().zip(item) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok(BatchResult {
        grads,
        parts,
        total,
        spread,
    })
}

/// Per-epoch means over the optimizer steps of that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, counted across both phases.
    pub epoch: u64,
    pub phase: Phase,
    pub total: f64,
    pub align: f64,
    pub cope: f64,
    pub unif: f64,
    pub unif_weight: f64,
    pub spread: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_cope: f64,
    /// Learning rate of the last step.
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,phase,total,align,cope,unif,unif_weight,spread,grad_norm_encoder,grad_norm_cope,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.total,
            self.align,
            self.cope,
            self.unif,
            self.unif_weight,
            self.spread,
            self.grad_norm_encoder,
            self.grad_norm_cope,
            self.lr
        )
    }
}

/// Training state: model, optimizer moments and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    dataset: Vec<PointCloud>,
    model: Model,
    adam: AdamState,
    epoch: u64,
    step: u64,
    execution: Execution,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, execution: Execution) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate_dataset(&cfg.dataset)?;
        let model = Model::init(&cfg);
        Ok(Self {
            cfg,
            dataset,
            model,
            adam: AdamState::new(),
            epoch: 0,
            step: 0,
            execution,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, execution: Execution) -> Result<Self> {
        let (cfg, model) = Model::from_checkpoint(ckpt)?;
        let mut trainer = Self::new(cfg, execution)?;
        trainer.model = model;
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        let names: Vec<String> = trainer.model.named().into_iter().map(|(n, _)| n).collect();
        let m: Option<Vec<Tensor>> = names.iter().map(|n| ckpt.tensor(&format!("adam.m.{n}")).cloned()).collect();
        let v: Option<Vec<Tensor>> = names.iter().map(|n| ckpt.tensor(&format!("adam.v.{n}")).cloned()).collect();
        if let (Some(m), Some(v)) = (m, v) {
            let t = ckpt
                .tensor("adam.t")
                .map(|t| t.item() as u64)
                .ok_or_else(|| Error::Checkpoint("missing tensor `adam.t`".into()))?;
            trainer.adam = AdamState { m, v, t };
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        if !self.adam.m.is_empty() {
            let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
            for (n, m) in names.iter().zip(&self.adam.m) {
                tensors.push((format!("adam.m.{n}"), m.clone()));
            }
            for (n, v) in names.iter().zip(&self.adam.v) {
                tensors.push((format!("adam.v.{n}"), v.clone()));
            }
            tensors.push(("adam.t".into(), Tensor::scalar(self.adam.t as f64)));
        }
        Checkpoint {
            config_text: self.cfg.to_text(),
            epoch: self.epoch,
            step: self.step,
            tensors,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dataset(&self) -> &[PointCloud] {
        &self.dataset
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.total_epochs() as u64
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.batch_size.min(self.dataset.len())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size()
    }

    pub fn phase_of(&self, epoch: u64) -> Phase {
        if epoch < self.cfg.epochs as u64 {
            Phase::Pretrain
        } else {
            Phase::Finetune
        }
    }

    /// Objective settings for a phase.
    pub fn settings(&self, phase: Phase) -> StepSettings {
        let cfg = &self.cfg;
        let mut encoder = cfg.encoder.clone();
        let unif_weight = match phase {
            Phase::Pretrain => 1.0 - cfg.loss.beta,
            Phase::Finetune => {
                encoder.mask_count = cfg.finetune_mask_count;
                if cfg.finetune_uniformity {
                    1.0 - cfg.loss.beta
                } else {
                    0.0
                }
            }
        };
        StepSettings {
            loss: cfg.loss.clone(),
            encoder,
            cope: cfg.cope.clone(),
            unif_weight,
        }
    }

    /// Draws the randomness of one batch.
    pub fn batch_items(&self, epoch: u64, batch: usize, indices: &[usize], s: &StepSettings) -> Vec<BatchItem<'_>> {
        let seed = self.cfg.seed;
        let m = s.loss.num_negatives;
        let finetune = self.phase_of(epoch) == Phase::Finetune;
        let shared_fps = finetune && self.cfg.finetune_shared_fps;
        let (sampling, anchor_pose) = if finetune {
            (self.cfg.finetune_rotation, self.cfg.finetune_anchor_pose)
        } else {
            (RotationSampling::UniformSo3, self.cfg.anchor_pose)
        };
        let batch_negs: Option<Vec<UnitQuaternion>> = (s.loss.negative_sampling == NegativeSampling::PerBatch)
            .then(|| {
                let mut rng = stream(seed, "batch-negatives", &[epoch, batch as u64]);
                (0..m).map(|_| sample_uniform_quaternion(&mut rng)).collect()
            });
        indices
            .iter()
            .map(|&i| {
                let mut rng = stream(seed, "item", &[epoch, i as u64]);
                let g = sampling.sample(&mut rng);
                let noise = EncodeNoise::draw(&s.encoder, &mut rng);
                let mut noise_rotated = EncodeNoise::draw(&s.encoder, &mut rng);
                if shared_fps {
                    noise_rotated.fps_seed = noise.fps_seed;
                }
                let negatives = match &batch_negs {
                    Some(n) => n.clone(),
                    None => (0..m).map(|_| sample_uniform_quaternion(&mut rng)).collect(),
                };
                let base = anchor_pose.sample(&g, &mut rng);
                BatchItem {
                    cloud: &self.dataset[i],
                    base,
                    g,
                    noise,
                    noise_rotated,
                    negatives,
                }
            })
            .collect()
    }

    /// Runs one epoch. On error the trainer is rolled back to the start of
    /// the epoch, so [`Trainer::checkpoint`] still returns a good state.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.is_finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let saved = (self.model.clone(), self.adam.clone(), self.step);
        match self.epoch_inner() {
            Ok(m) => {
                self.epoch += 1;
                Ok(m)
            }
            Err(e) => {
                (self.model, self.adam, self.step) = saved;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let phase = self.phase_of(epoch);
        let (phase_epoch, phase_epochs, warmup, lr_max) = match phase {
            Phase::Pretrain => (epoch, self.cfg.epochs, self.cfg.warmup_epochs, self.cfg.lr),
            Phase::Finetune => {
                let first = self.cfg.epochs as u64;
                if epoch == first {
                    self.adam = AdamState::new();
                }
                (epoch - first, self.cfg.finetune_epochs, 0, self.cfg.finetune_lr)
            }
        };
        let s = self.settings(phase);
        let bs = self.batch_size();
        let per_epoch = self.batches_per_epoch() as u64;
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, "shuffle", &[epoch]));

        let mut acc = EpochMetrics {
            epoch: epoch + 1,
            phase,
            total: 0.0,
            align: 0.0,
            cope: 0.0,
            unif: 0.0,
            unif_weight: s.unif_weight,
            spread: 0.0,
            grad_norm_encoder: 0.0,
            grad_norm_cope: 0.0,
            lr: 0.0,
        };
        let n_enc = self.model.encoder_tensor_count();
        for b in 0..per_epoch as usize {
            let items = self.batch_items(epoch, b, &order[b * bs..(b + 1) * bs], &s);
            let result = batch_gradients(&self.model, &items, &s, self.execution)?;
            if !result.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    what: format!("loss is {}", result.total),
                });
            }
            let in_phase = phase_epoch * per_epoch + b as u64;
            let lr = lr_schedule(in_phase, warmup as u64 * per_epoch, phase_epochs as u64 * per_epoch, lr_max);
            let norm = |gs: &[Tensor]| gs.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
            acc.grad_norm_encoder += norm(&result.grads[..n_enc]);
            acc.grad_norm_cope += norm(&result.grads[n_enc..]);
            let mut params = self.model.tensors_mut();
            adam_step(&mut params, &result.grads, &mut self.adam, lr, self.cfg.weight_decay, self.step)?;
            self.step += 1;
            acc.total += result.total;
            acc.align += result.parts.align;
            acc.cope += result.parts.cope;
            acc.unif += result.parts.unif;
            acc.spread += result.spread;
            acc.lr = lr;
        }
        if !self.model.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: "non-finite parameters".into(),
            });
        }
        let k = per_epoch as f64;
        for v in [
            &mut acc.total,
            &mut acc.align,
            &mut acc.cope,
            &mut acc.unif,
            &mut acc.spread,
            &mut acc.grad_norm_encoder,
            &mut acc.grad_norm_cope,
        ] {
            *v /= k;
        }
        Ok(acc)
    }

    /// Runs every remaining epoch, handing each metrics row to `sink`.
    pub fn train(&mut self, mut sink: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            let m = self.run_epoch()?;
            sink(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Collapse diagnostics of a trained model on a set of clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub align: f64,
    pub cope: f64,
    /// Mean pairwise squared distance among each item's pseudo-negatives.
    pub spread: f64,
    /// `log(M + 1)`.
    pub bound: f64,
    pub items: usize,
}

/// Evaluates the repulsion term and pseudo-negative spread with fresh
/// rotations, unmasked encodings and per-sample negatives.
pub fn collapse_report(
    model: &Model,
    cfg: &TrainConfig,
    clouds: &[PointCloud],
    seed: u64,
    execution: Execution,
) -> Result<CollapseReport> {
    let mut encoder = cfg.encoder.clone();
    encoder.mask_count = 0;
    let s = StepSettings {
        loss: cfg.loss.clone(),
        encoder,
        cope: cfg.cope.clone(),
        unif_weight: 0.0,
    };
    let m = cfg.loss.num_negatives;
    let items: Vec<BatchItem<'_>> = clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let mut rng = stream(seed, "collapse-audit", &[i as u64]);
            let g = sample_uniform_quaternion(&mut rng);
            let noise = EncodeNoise::draw(&s.encoder, &mut rng);
            let negatives = (0..m).map(|_| sample_uniform_quaternion(&mut rng)).collect();
            let base = cfg.anchor_pose.sample(&g, &mut rng);
            BatchItem {
                cloud,
                base,
                g,
                noise: noise.clone(),
                noise_rotated: noise,
                negatives,
            }
        })
        .collect();
    let passes = execution
        .map(&items, |item| item_forward(model, item, &s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = passes.len() as f64;
    Ok(CollapseReport {
        align: passes.iter().map(|p| p.tape.value(p.align).item()).sum::<f64>() / n,
        cope: passes.iter().map(|p| p.tape.value(p.cope).item()).sum::<f64>() / n,
        spread: passes.iter().map(|p| p.spread).sum::<f64>() / n,
        bound: cfg.loss.collapse_bound(),
        items: passes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{finite_difference, relative_errors};

    pub(crate) fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            encoder: EncoderConfig {
                embedding_dim: 32,
                num_patches: 8,
                patch_size: 8,
                mask_count: 2,
                token_width: 16,
                token_layers: 2,
                pool_width: 32,
            },
            cope: CopeConfig {
                embedding_dim: 32,
                reduction: 4,
                harmonic_freqs: 2,
                trunk_depth: 2,
                trunk_width: 16,
                expansion_depth: 2,
                expansion_width: 16,
            },
            dataset: SyntheticShapeSpec {
                points_per_cloud: 64,
                instances: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = smoke_config();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::parse("betaa = 0.3\n").unwrap_err().to_string();
        assert!(err.contains("betaa"), "{err}");
        assert!(TrainConfig::parse("beta = 2\n").is_err());
        assert!(TrainConfig::parse("negative_sampling = sometimes\n").is_err());
        for text in ["finetune_rotation = uniform_so3\n", "anchor_pose = uniform\n", "anchor_pose = canonical\n"] {
            let cfg = TrainConfig::parse(text).unwrap();
            assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        assert!(TrainConfig::parse("finetune_rotation = small\n").is_err());
        assert!(TrainConfig::parse("anchor_pose = tilted\n").is_err());
    }

    #[test]
    fn swapped_anchor_maps_back_to_the_generator_pose() {
        let g = sample_uniform_quaternion(&mut stream(4, "t", &[]));
        let mut seen = [false; 2];
        for i in 0..32 {
            let base = AnchorPose::Swap.sample(&g, &mut stream(4, "swap", &[i]));
            let positive = g.mul(&base);
            let swapped = base != UnitQuaternion::IDENTITY;
            seen[swapped as usize] = true;
            if swapped {
                assert!(positive.angle() < 1e-12);
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn smoke_run_emits_one_row_per_epoch() {
        let mut t = Trainer::new(smoke_config(), Execution::Sequential).unwrap();
        let rows = t.train(|_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(t.is_finished());
        for r in &rows {
            assert!(r.total.is_finite());
            let recombined = r.align + 0.3 * r.cope + 0.7 * r.unif;
            assert!((r.total - recombined).abs() < 1e-9);
        }
        assert_eq!(EpochMetrics::CSV_HEADER.split(',').count(), rows[0].csv_row().split(',').count());
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut cfg = smoke_config();
        cfg.epochs = 1;
        let mut a = Trainer::new(cfg.clone(), Execution::Sequential).unwrap();
        let mut b = Trainer::new(cfg, Execution::Parallel).unwrap();
        assert_eq!(a.run_epoch().unwrap(), b.run_epoch().unwrap());
        assert_eq!(a.model(), b.model());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut cfg = smoke_config();
        cfg.encoder.mask_count = 0;
        let trainer = Trainer::new(cfg, Execution::Sequential).unwrap();
        let s = trainer.settings(Phase::Pretrain);
        let items = trainer.batch_items(0, 0, &[0, 1, 2], &s);
        let model = trainer.model().clone();
        let analytic = batch_gradients(&model, &items, &s, Execution::Sequential).unwrap();
        // probe a predictor tensor and an encoder tensor
        for which in [0usize, model.named().len() - 1] {
            let x = model.named()[which].1.clone();
            let numeric = finite_difference(
                |p| {
                    let mut m = model.clone();
                    *m.tensors_mut()[which] = p.clone();
                    batch_gradients(&m, &items, &s, Execution::Sequential).unwrap().total
                },
                &x,
                1e-5,
            );
            let errs = relative_errors(&analytic.grads[which], &numeric, 1e-6);
            let worst = errs.iter().copied().fold(0.0, f64::max);
            assert!(worst < 1e-3, "tensor {which}: worst {worst}");
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let mut cfg = smoke_config();
        cfg.epochs = 3;
        cfg.finetune_epochs = 1;
        let mut straight = Trainer::new(cfg.clone(), Execution::Sequential).unwrap();
        let all = straight.train(|_| {}).unwrap();

        let mut first = Trainer::new(cfg, Execution::Sequential).unwrap();
        first.run_epoch().unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), Execution::Sequential).unwrap();
        let rest = resumed.train(|_| {}).unwrap();
        assert_eq!(&all[1..], &rest[..]);
        assert_eq!(straight.model(), resumed.model());
        assert_eq!(rest.last().unwrap().phase, Phase::Finetune);
        assert_eq!(rest.last().unwrap().unif_weight, 0.0);
    }

    #[test]
    fn divergence_rolls_back() {
        let mut t = Trainer::new(smoke_config(), Execution::Sequential).unwrap();
        t.model.cope.psi.data_mut()[0] = f64::NAN;
        let before = t.checkpoint();
        let err = t.run_epoch().unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::Diff(_) | Error::ThetaUnderflow { .. }), "{err}");
        assert_eq!(t.checkpoint().to_bytes(), before.to_bytes());
    }

    #[test]
    fn collapse_report_is_below_the_bound_for_random_weights() {
        let t = Trainer::new(smoke_config(), Execution::Sequential).unwrap();
        let r = collapse_report(t.model(), t.config(), &t.dataset()[..4], 5, Execution::Sequential).unwrap();
        assert_eq!(r.items, 4);
        assert!(r.cope < r.bound && r.spread > 0.0);
    }
}
