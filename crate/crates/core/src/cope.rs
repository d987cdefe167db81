//! The conditional weight predictor.
//!
//! A rotation `g` is lifted into a harmonic feature vector, a trunk MLP maps
//! it to `h` of length `d/k`, each column of the shared matrix `Psi`
//! (`d/k x d`) is scaled elementwise by `h`, and a shared expansion MLP maps
//! every scaled column from `d/k` to `d`. Stacking the expanded columns gives
//! the `d x d` weight `Theta_g`, which depends on `g` and nothing else.
//!
//! On a tape the predictor produces `E = Theta_g^T`, so that projecting a row
//! embedding is the plain product `z E`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffkit::{DiffError, Gradients, Tape, Tensor, Var};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::params::{Mlp, MlpVars, ParamSet};
use crate::rot3::{sample_uniform_quaternion, UnitQuaternion};

#[derive(Debug, Clone, PartialEq)]
pub struct CopeConfig {
    pub embedding_dim: usize,
    /// Reduction factor `k`; the trunk output has `embedding_dim / k` entries.
    pub reduction: usize,
    /// Octaves in the harmonic lift. High octaves make the pose loss rugged
    /// in `g`, trapping gradient descent in spurious minima.
    pub harmonic_freqs: usize,
    /// Linear layers in the trunk MLP.
    pub trunk_depth: usize,
    pub trunk_width: usize,
    /// Linear layers in the shared column-expansion MLP.
    pub expansion_depth: usize,
    pub expansion_width: usize,
}

impl Default for CopeConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            reduction: 4,
            harmonic_freqs: 2,
            trunk_depth: 2,
            trunk_width: 128,
            expansion_depth: 2,
            expansion_width: 64,
        }
    }
}

impl CopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.embedding_dim.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "embedding_dim {} is not divisible by reduction {}",
                self.embedding_dim, self.reduction
            )));
        }
        if self.harmonic_freqs == 0 {
            return Err(Error::Config("harmonic_freqs must be >= 1".into()));
        }
        if self.trunk_depth == 0 || self.expansion_depth == 0 {
            return Err(Error::Config("trunk_depth and expansion_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn reduced_dim(&self) -> usize {
        self.embedding_dim / self.reduction
    }

    pub fn harmonic_dim(&self) -> usize {
        4 + 8 * self.harmonic_freqs
    }

    fn layer_sizes(input: usize, depth: usize, width: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, depth - 1));
        sizes.push(output);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopeParams {
    pub trunk: Mlp,
    /// Shared embedding vectors, `d/k x d`.
    pub psi: Tensor,
    /// Column expansion `d/k -> d`, no output bias.
    pub expansion: Mlp,
}

impl CopeParams {
    pub fn init<R: Rng + ?Sized>(cfg: &CopeConfig, rng: &mut R) -> Self {
        let r = cfg.reduced_dim();
        let d = cfg.embedding_dim;
        let trunk = Mlp::init(
            &CopeConfig::layer_sizes(cfg.harmonic_dim(), cfg.trunk_depth, cfg.trunk_width, r),
            true,
            rng,
        );
        let psi = Tensor::new(r, d, (0..r * d).map(|_| rng.sample(StandardNormal)).collect())
            .expect("sized");
        let expansion = Mlp::init(
            &CopeConfig::layer_sizes(r, cfg.expansion_depth, cfg.expansion_width, d),
            false,
            rng,
        );
        Self {
            trunk,
            psi,
            expansion,
        }
    }

    pub fn check(&self, cfg: &CopeConfig) -> Result<()> {
        let r = cfg.reduced_dim();
        if self.psi.shape() != [r, cfg.embedding_dim]
            || self.trunk.input_dim() != cfg.harmonic_dim()
            || self.trunk.output_dim() != r
            || self.expansion.input_dim() != r
            || self.expansion.output_dim() != cfg.embedding_dim
        {
            return Err(DiffError::ShapeMismatch {
                op: "cope params",
                left: self.psi.shape(),
                right: [r, cfg.embedding_dim],
            }
            .into());
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CopeVars {
        let trunk = self.trunk.bind(tape, trainable);
        let psi = if trainable {
            tape.leaf(self.psi.clone())
        } else {
            tape.constant(self.psi.clone())
        };
        let expansion = self.expansion.bind(tape, trainable);
        // Psi^T is shared by every rotation evaluated on this tape
        let psi_t = tape.transpose(psi);
        CopeVars {
            trunk,
            psi,
            psi_t,
            expansion,
        }
    }
}

impl ParamSet for CopeParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named("cope.trunk");
        out.push(("cope.psi".to_string(), &self.psi));
        out.extend(self.expansion.named("cope.expansion"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.tensors_mut();
        out.push(&mut self.psi);
        out.extend(self.expansion.tensors_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub struct CopeVars {
    trunk: MlpVars,
    psi: Var,
    psi_t: Var,
    expansion: MlpVars,
}

impl CopeVars {
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        let mut out = self.trunk.grads(tape, grads);
        out.push(grads.wrt_or_zeros(tape, self.psi));
        out.extend(self.expansion.grads(tape, grads));
        out
    }

    /// Parameter vars in [`ParamSet::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.trunk.vars();
        out.push(self.psi);
        out.extend(self.expansion.vars());
        out
    }
}

/// The `d x d` weight emitted for one rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformWeight {
    pub matrix: Tensor,
}

impl TransformWeight {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Tensor::identity(d),
        }
    }

    /// `Theta z` as a plain vector.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.matrix.rows())
            .map(|i| self.matrix.row_slice(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Harmonic lift of a `1 x 4` quaternion row: the raw components followed by
/// `sin(2^l pi c)` and `cos(2^l pi c)` blocks for `l = 0..freqs`.
pub fn harmonic_on_tape(tape: &mut Tape, q: Var, freqs: usize) -> Result<Var> {
    let mut parts = vec![q];
    for l in 0..freqs {
        let scaled = tape.scale(q, 2f64.powi(l as i32) * PI);
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    Ok(tape.concat_cols(&parts)?)
}

pub fn harmonic_embed(g: &UnitQuaternion, freqs: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::row(g.to_array().to_vec()));
    let h = harmonic_on_tape(&mut tape, q, freqs).expect("single row");
    tape.value(h).data().to_vec()
}

/// Records the predictor for the quaternion row `q` and returns
/// `E = Theta^T` (`d x d`).
pub fn cope_on_tape(tape: &mut Tape, q: Var, vars: &CopeVars, cfg: &CopeConfig) -> Result<Var> {
    let lifted = harmonic_on_tape(tape, q, cfg.harmonic_freqs)?;
    let h = vars.trunk.forward(tape, lifted)?;
    // row j of gamma_t is column j of Gamma, i.e. h ⊙ Psi[:, j]
    let gamma_t = tape.mul_row(vars.psi_t, h)?;
    Ok(vars.expansion.forward(tape, gamma_t)?)
}

/// `normalize(z E)`, i.e. `Theta z / |Theta z|` as a row.
pub fn project_on_tape(tape: &mut Tape, z: Var, e: Var) -> Result<Var> {
    let raw = tape.matmul(z, e)?;
    normalize_projection(tape, raw)
}

fn normalize_projection(tape: &mut Tape, raw: Var) -> Result<Var> {
    tape.l2_normalize(raw).map_err(|err| match err {
        DiffError::DegenerateNormalization { norm, .. } => Error::ThetaUnderflow { norm },
        other => other.into(),
    })
}

/// Hidden activations `H` of the expansion MLP for every column (`d x w`).
///
/// The expansion output layer has no bias, so `E = H W` and a projection
/// `z E` can be evaluated as `(z H) W` without forming `E`.
pub fn cope_features_on_tape(tape: &mut Tape, q: Var, vars: &CopeVars, cfg: &CopeConfig) -> Result<Var> {
    let lifted = harmonic_on_tape(tape, q, cfg.harmonic_freqs)?;
    let h = vars.trunk.forward(tape, lifted)?;
    let gamma_t = tape.mul_row(vars.psi_t, h)?;
    Ok(vars.expansion.hidden(tape, gamma_t)?)
}

/// `normalize((z H) W)`, equal to [`project_on_tape`] with `E = H W`.
pub fn project_features_on_tape(tape: &mut Tape, z: Var, features: Var, vars: &CopeVars) -> Result<Var> {
    debug_assert!(!vars.expansion.has_output_bias());
    let zh = tape.matmul(z, features)?;
    let raw = vars.expansion.output_layer(tape, zh)?;
    normalize_projection(tape, raw)
}

pub fn cope_forward(g: &UnitQuaternion, params: &CopeParams, cfg: &CopeConfig) -> Result<TransformWeight> {
    cfg.validate()?;
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let q = tape.constant(Tensor::row(g.to_array().to_vec()));
    let e = cope_on_tape(&mut tape, q, &vars, cfg)?;
    Ok(TransformWeight {
        matrix: tape.value(e).transpose(),
    })
}

/// `Theta_{g_r} z / |Theta_{g_r} z|`.
pub fn pseudo_negative(
    z: &Embedding,
    g_r: &UnitQuaternion,
    params: &CopeParams,
    cfg: &CopeConfig,
) -> Result<Embedding> {
    cfg.validate()?;
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let q = tape.constant(Tensor::row(g_r.to_array().to_vec()));
    let features = cope_features_on_tape(&mut tape, q, &vars, cfg)?;
    let zv = tape.constant(z.as_row());
    let p = project_features_on_tape(&mut tape, zv, features, &vars)?;
    Embedding::new(tape.value(p).data().to_vec())
}

/// `m` uniformly random rotations with their pseudo-negatives for `z`.
pub fn sample_pseudo_negative_batch<R: Rng + ?Sized>(
    z: &Embedding,
    m: usize,
    params: &CopeParams,
    cfg: &CopeConfig,
    rng: &mut R,
) -> Result<Vec<(UnitQuaternion, Embedding)>> {
    if m == 0 {
        return Err(Error::Config("number of pseudo-negatives must be >= 1".into()));
    }
    (0..m)
        .map(|_| {
            let g = sample_uniform_quaternion(rng);
            pseudo_negative(z, &g, params, cfg).map(|e| (g, e))
        })
        .collect()
}

/// Mean pairwise squared distance between embeddings.
pub fn mean_pairwise_spread(items: &[&[f64]]) -> f64 {
    let n = items.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for k in (i + 1)..n {
            total += items[i].iter().zip(items[k]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> CopeConfig {
        CopeConfig {
            embedding_dim: 16,
            reduction: 4,
            harmonic_freqs: 2,
            trunk_depth: 2,
            trunk_width: 12,
            expansion_depth: 2,
            expansion_width: 10,
        }
    }

    fn unit(seed: u64, d: usize) -> Embedding {
        let mut rng = stream(seed, "z", &[]);
        Embedding::normalize((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn harmonic_examples() {
        let h = harmonic_embed(&UnitQuaternion::IDENTITY, 1);
        let want = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 1.0];
        assert_eq!(h.len(), 12);
        for (a, b) in h.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{h:?}");
        }
        assert_eq!(harmonic_embed(&UnitQuaternion::IDENTITY, 6).len(), 52);
    }

    #[test]
    fn harmonic_is_continuous() {
        let g = UnitQuaternion::new(0.8, 0.1, -0.3, 0.5).unwrap();
        let base = harmonic_embed(&g, 6);
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let g2 = UnitQuaternion::new(0.8 + eps, 0.1, -0.3 - eps, 0.5).unwrap();
            let d = base
                .iter()
                .zip(harmonic_embed(&g2, 6))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = small();
        let params = CopeParams::init(&cfg, &mut stream(1, "cope", &[]));
        let g = UnitQuaternion::new(0.2, 0.5, 0.1, -0.4).unwrap();
        let a = cope_forward(&g, &params, &cfg).unwrap();
        let b = cope_forward(&g, &params, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matrix.shape(), [16, 16]);
        let bad = CopeConfig { embedding_dim: 32, ..cfg.clone() };
        assert!(cope_forward(&g, &params, &bad).is_err());
        assert!(CopeConfig { reduction: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn pseudo_negative_matches_explicit_composition() {
        let cfg = small();
        let params = CopeParams::init(&cfg, &mut stream(2, "cope", &[]));
        let z = unit(3, 16);
        let g = sample_uniform_quaternion(&mut stream(4, "g", &[]));
        let got = pseudo_negative(&z, &g, &params, &cfg).unwrap();
        // explicit build, matvec, normalize
        let theta = cope_forward(&g, &params, &cfg).unwrap().matrix;
        let mut v = vec![0.0; 16];
        for (i, slot) in v.iter_mut().enumerate() {
            for j in 0..16 {
                *slot += theta.get(i, j) * z.values()[j];
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in got.values().iter().zip(&v) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_weight_leaves_embedding_unchanged() {
        let z = unit(5, 16);
        let theta = TransformWeight::identity(16);
        let out = Embedding::normalize(theta.apply(z.values())).unwrap();
        for (a, b) in out.values().iter().zip(z.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_report_underflow() {
        let cfg = small();
        let mut params = CopeParams::init(&cfg, &mut stream(2, "cope", &[]));
        params.psi = Tensor::zeros(4, 16);
        let err = pseudo_negative(&unit(1, 16), &UnitQuaternion::IDENTITY, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::ThetaUnderflow { .. }));
        assert!(err.to_string().contains("Θz underflow"));
    }

    #[test]
    fn batch_sampling() {
        let cfg = small();
        let params = CopeParams::init(&cfg, &mut stream(2, "cope", &[]));
        let z = unit(1, 16);
        let batch = sample_pseudo_negative_batch(&z, 8, &params, &cfg, &mut stream(3, "neg", &[])).unwrap();
        assert_eq!(batch.len(), 8);
        for (g, e) in &batch {
            assert!(g.w() >= 0.0);
            assert!((e.values().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = sample_pseudo_negative_batch(&z, 8, &params, &cfg, &mut stream(3, "neg", &[])).unwrap();
        assert_eq!(batch, again);
        assert!(sample_pseudo_negative_batch(&z, 0, &params, &cfg, &mut stream(3, "neg", &[])).is_err());
    }

    #[test]
    fn parameter_count_at_full_width() {
        let cfg = CopeConfig {
            embedding_dim: 512,
            ..CopeConfig::default()
        };
        let params = CopeParams::init(&cfg, &mut stream(0, "count", &[]));
        let n = params.parameter_count();
        assert!((100_000..=400_000).contains(&n), "{n}");
    }
}
