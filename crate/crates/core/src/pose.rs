//! Relative rotation estimation in embedding space.
//!
//! Given embeddings of a source cloud and a rotated target, search for the
//! rotation whose predicted weight maps one onto the other in both
//! directions. The search is plain gradient descent on the raw quaternion
//! followed by renormalization, restarted from several random rotations; the
//! restart with the lowest final loss wins.

use rand::Rng;

use crate::config::{join, list, value, Section};
use crate::cope::{cope_features_on_tape, project_features_on_tape, CopeConfig, CopeParams};
use crate::diffkit::{Tape, Tensor, Var};
use crate::encoder::{encode_with_noise, EncodeNoise, Embedding, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::stream;
use crate::rot3::{rotate, rotation_error_deg, sample_rotation_up_to, sample_uniform_quaternion, PointCloud, UnitQuaternion};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub pose_seed: u64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            iterations: 100,
            step_size: 0.01,
            pose_seed: 0,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.iterations == 0 {
            return Err(Error::Config("restarts and iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

impl Section for PoseConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("restarts", self.restarts.to_string()),
            ("iterations", self.iterations.to_string()),
            ("step_size", self.step_size.to_string()),
            ("pose_seed", self.pose_seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "restarts" => self.restarts = value(key, raw)?,
            "iterations" => self.iterations = value(key, raw)?,
            "step_size" => self.step_size = value(key, raw)?,
            "pose_seed" => self.pose_seed = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Something that maps a rotation to a linear map on embeddings.
pub trait WeightPredictor: Sync {
    /// Records `normalize(Theta_q z)` for the `1 x 4` quaternion row `q` and
    /// the `1 x d` row `z`.
    fn project_on_tape(&self, tape: &mut Tape, q: Var, z: Var) -> Result<Var>;
}

/// The trained predictor with frozen parameters.
#[derive(Debug, Clone, Copy)]
pub struct CopeState<'a> {
    pub params: &'a CopeParams,
    pub cfg: &'a CopeConfig,
}

impl WeightPredictor for CopeState<'_> {
    fn project_on_tape(&self, tape: &mut Tape, q: Var, z: Var) -> Result<Var> {
        let vars = self.params.bind(tape, false);
        let features = cope_features_on_tape(tape, q, &vars, self.cfg)?;
        project_features_on_tape(tape, z, features, &vars)
    }
}

const CONJUGATE: [f64; 4] = [1.0, -1.0, -1.0, -1.0];

/// `|z_tgt - P(g) z_src|^2 + |z_src - P(g^-1) z_tgt|^2` with `P` the
/// normalized projection; `q` is the raw quaternion row.
pub fn pair_loss_on_tape<P: WeightPredictor + ?Sized>(
    tape: &mut Tape,
    q: Var,
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
) -> Result<Var> {
    let src = tape.constant(z_src.as_row());
    let tgt = tape.constant(z_tgt.as_row());
    let forward = predictor.project_on_tape(tape, q, src)?;
    let conj = tape.constant(Tensor::row(CONJUGATE.to_vec()));
    let q_inv = tape.mul(q, conj)?;
    let backward = predictor.project_on_tape(tape, q_inv, tgt)?;
    let a = tape.squared_distance(tgt, forward)?;
    let b = tape.squared_distance(src, backward)?;
    Ok(tape.add(a, b)?)
}

pub fn pair_loss<P: WeightPredictor + ?Sized>(
    g: &UnitQuaternion,
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::row(g.to_array().to_vec()));
    let l = pair_loss_on_tape(&mut tape, q, z_src, z_tgt, predictor)?;
    Ok(tape.value(l).item())
}

/// Loss and its Euclidean gradient with respect to the four raw components.
pub fn pair_loss_and_grad<P: WeightPredictor + ?Sized>(
    q: [f64; 4],
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
) -> Result<(f64, [f64; 4])> {
    let mut tape = Tape::new();
    let qv = tape.leaf(Tensor::row(q.to_vec()));
    let l = pair_loss_on_tape(&mut tape, qv, z_src, z_tgt, predictor)?;
    let grads = tape.backward(l)?;
    let g = grads.wrt_or_zeros(&tape, qv);
    let d = g.data();
    Ok((tape.value(l).item(), [d[0], d[1], d[2], d[3]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub g_est: UnitQuaternion,
    pub loss_min: f64,
    /// Final loss of every restart, `None` for restarts that hit a
    /// non-finite value and were discarded.
    pub restart_losses: Vec<Option<f64>>,
}

impl PoseResult {
    pub fn failed_restarts(&self) -> usize {
        self.restart_losses.iter().filter(|l| l.is_none()).count()
    }
}

/// Runs one restart from `init`; returns the final rotation and its loss.
fn descend<P: WeightPredictor + ?Sized>(
    init: UnitQuaternion,
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
    cfg: &PoseConfig,
) -> Result<(UnitQuaternion, f64)> {
    let mut g = init;
    for _ in 0..cfg.iterations {
        let (_, grad) = pair_loss_and_grad(g.to_array(), z_src, z_tgt, predictor)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: 0,
                what: "non-finite pose gradient".into(),
            });
        }
        let q = g.to_array();
        // gradient step, then back onto the unit sphere with w >= 0
        g = UnitQuaternion::from_array([0, 1, 2, 3].map(|k| q[k] - cfg.step_size * grad[k]))?;
    }
    let loss = pair_loss(&g, z_src, z_tgt, predictor)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            what: "non-finite pose loss".into(),
        });
    }
    Ok((g, loss))
}

/// Restart `j` starts from its own random stream, so using more restarts
/// only ever adds candidates.
pub fn restart_init(seed: u64, j: usize) -> UnitQuaternion {
    sample_uniform_quaternion(&mut stream(seed, "pose-restart", &[j as u64]))
}

pub fn estimate_pose<P: WeightPredictor + ?Sized>(
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
    cfg: &PoseConfig,
    execution: Execution,
) -> Result<PoseResult> {
    estimate_pose_with_inits(z_src, z_tgt, predictor, cfg, &[], execution)
}

/// [`estimate_pose`] with extra restarts seeded at `extra_inits`, run after
/// the random ones.
pub fn estimate_pose_with_inits<P: WeightPredictor + ?Sized>(
    z_src: &Embedding,
    z_tgt: &Embedding,
    predictor: &P,
    cfg: &PoseConfig,
    extra_inits: &[UnitQuaternion],
    execution: Execution,
) -> Result<PoseResult> {
    cfg.validate()?;
    let mut inits: Vec<UnitQuaternion> = (0..cfg.restarts).map(|j| restart_init(cfg.pose_seed, j)).collect();
    inits.extend_from_slice(extra_inits);
    let outcomes = execution.map(&inits, |init| descend(*init, z_src, z_tgt, predictor, cfg));
    let mut best: Option<(UnitQuaternion, f64)> = None;
    let mut restart_losses = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        match outcome {
            Ok((g, loss)) => {
                // strict comparison: the lowest restart index wins ties
                if best.is_none_or(|(_, b)| loss < b) {
                    best = Some((g, loss));
                }
                restart_losses.push(Some(loss));
            }
            Err(Error::Diverged { .. } | Error::ThetaUnderflow { .. } | Error::Diff(_) | Error::Geometry(_)) => {
                restart_losses.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let (g_est, loss_min) = best.ok_or(Error::AllRestartsFailed {
        restarts: inits.len(),
    })?;
    Ok(PoseResult {
        g_est,
        loss_min,
        restart_losses,
    })
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Test pairs per maximum angle.
    pub eval_pairs: usize,
    /// Maximum rotation angles, in degrees.
    pub eval_thetas: Vec<f64>,
    /// Seed of the held-out dataset (same generator as training).
    pub eval_dataset_seed: u64,
    pub eval_instances: usize,
    pub eval_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_pairs: 200,
            eval_thetas: vec![0.0, 45.0, 90.0, 180.0],
            eval_dataset_seed: 1007,
            eval_instances: 64,
            eval_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_pairs == 0 || self.eval_instances == 0 {
            return Err(Error::Config("eval_pairs and eval_instances must be >= 1".into()));
        }
        if self.eval_thetas.is_empty() || self.eval_thetas.iter().any(|t| !(0.0..=180.0).contains(t)) {
            return Err(Error::Config("eval_thetas must be a non-empty list of angles in [0, 180]".into()));
        }
        Ok(())
    }
}

impl Section for EvalConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eval_pairs", self.eval_pairs.to_string()),
            ("eval_thetas", join(&self.eval_thetas)),
            ("eval_dataset_seed", self.eval_dataset_seed.to_string()),
            ("eval_instances", self.eval_instances.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "eval_pairs" => self.eval_pairs = value(key, raw)?,
            "eval_thetas" => self.eval_thetas = list(key, raw)?,
            "eval_dataset_seed" => self.eval_dataset_seed = value(key, raw)?,
            "eval_instances" => self.eval_instances = value(key, raw)?,
            "eval_seed" => self.eval_seed = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One row of the error table.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRow {
    pub theta_max: f64,
    pub mean_deg: f64,
    pub max_deg: f64,
    pub median_deg: f64,
    pub n_pairs: usize,
    /// Per-pair errors, in pair order.
    pub errors: Vec<f64>,
}

impl PoseRow {
    pub const CSV_HEADER: &'static str = "theta_max,mean_deg,max_deg,median_deg,n_pairs";

    pub fn from_errors(theta_max: f64, errors: Vec<f64>) -> Self {
        let n = errors.len();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            theta_max,
            mean_deg: errors.iter().sum::<f64>() / n as f64,
            max_deg: sorted[n - 1],
            median_deg: median,
            n_pairs: n,
            errors,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.theta_max, self.mean_deg, self.max_deg, self.median_deg, self.n_pairs
        )
    }
}

/// Everything needed to embed clouds and search rotations.
#[derive(Debug, Clone, Copy)]
pub struct PoseModel<'a> {
    pub encoder: &'a EncoderParams,
    pub encoder_cfg: &'a EncoderConfig,
    pub cope: CopeState<'a>,
}

/// Rotation error of one evaluation pair: the source cloud and its rotated
/// copy are encoded without masking, from the same FPS start index.
pub fn evaluate_pair(
    model: &PoseModel<'_>,
    cloud: &PointCloud,
    g_gt: &UnitQuaternion,
    fps_seed: u64,
    pose: &PoseConfig,
    execution: Execution,
) -> Result<f64> {
    let noise = EncodeNoise::unmasked(fps_seed);
    let z_src = encode_with_noise(cloud, model.encoder, model.encoder_cfg, &noise)?;
    let z_tgt = encode_with_noise(&rotate(cloud, g_gt), model.encoder, model.encoder_cfg, &noise)?;
    let result = estimate_pose(&z_src, &z_tgt, &model.cope, pose, execution)?;
    Ok(rotation_error_deg(&result.g_est, g_gt))
}

/// For every maximum angle, draws `eval_pairs` rotations (angle uniform in
/// `[0, theta_max]`, uniform axis), estimates each and summarizes the errors.
pub fn evaluate_pose_suite(
    model: &PoseModel<'_>,
    clouds: &[PointCloud],
    eval: &EvalConfig,
    pose: &PoseConfig,
    execution: Execution,
) -> Result<Vec<PoseRow>> {
    eval.validate()?;
    pose.validate()?;
    if clouds.is_empty() {
        return Err(Error::Config("evaluation needs at least one cloud".into()));
    }
    eval.eval_thetas
        .iter()
        .enumerate()
        .map(|(t, &theta)| {
            let pairs: Vec<(usize, UnitQuaternion, u64, u64)> = (0..eval.eval_pairs)
                .map(|j| {
                    let mut rng = stream(eval.eval_seed, "eval-pair", &[t as u64, j as u64]);
                    let g = sample_rotation_up_to(&mut rng, theta.to_radians());
                    (j % clouds.len(), g, rng.random(), rng.random())
                })
                .collect();
            let errors = execution
                .map(&pairs, |(c, g, fps_seed, pose_seed)| {
                    let cfg = PoseConfig {
                        pose_seed: pose.pose_seed ^ pose_seed,
                        ..pose.clone()
                    };
                    evaluate_pair(model, &clouds[*c], g, *fps_seed, &cfg, Execution::Sequential)
                })
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            Ok(PoseRow::from_errors(theta, errors))
        })
        .collect()
}
