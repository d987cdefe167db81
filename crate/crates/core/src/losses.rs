//! Training objectives: transformation-aware alignment, uniformity, the
//! pseudo-negative repulsion term and their combination, plus the SIE
//! regularized objective used as an audit baseline.
//!
//! The `*_on_tape` builders are what training differentiates; the plain
//! functions evaluate the same builders on constant inputs.

use crate::cope::{project_on_tape, TransformWeight};
use crate::diffkit::{DiffError, Tape, Tensor, Var};
use crate::encoder::Embedding;
use crate::error::{Error, Result};

/// Added to self-distances so that their exponentials vanish.
const SELF_PAIR_OFFSET: f64 = 1e6;

/// When pseudo-negative rotations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeSampling {
    #[default]
    PerSample,
    PerBatch,
}

/// Whether the pseudo-negative branch passes gradient back into `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeGradient {
    #[default]
    Full,
    /// `z` is treated as a constant inside the negatives; only the predictor
    /// learns from them.
    Detached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Temperature of the cope and uniformity kernels. At desk scale 0.1
    /// stalls alignment; 0.5 trains.
    pub tau: f64,
    pub beta: f64,
    pub num_negatives: usize,
    pub negative_sampling: NegativeSampling,
    pub negative_gradient: NegativeGradient,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            beta: 0.3,
            num_negatives: 8,
            negative_sampling: NegativeSampling::PerSample,
            negative_gradient: NegativeGradient::Full,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be >= 1".into()));
        }
        Ok(())
    }

    /// `log(M + 1)`, the value of the repulsion term under predictor collapse.
    pub fn collapse_bound(&self) -> f64 {
        ((self.num_negatives + 1) as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub align: f64,
    pub cope: f64,
    pub unif: f64,
}

/// `align + beta cope + (1 - beta) unif`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.align + cfg.beta * parts.cope + (1.0 - cfg.beta) * parts.unif
}

/// Mean row-wise squared distance between normalized anchors and positives.
pub fn align_on_tape(tape: &mut Tape, anchors: Var, positives: Var) -> Result<Var> {
    let d = tape.squared_distance(anchors, positives)?;
    Ok(tape.mean(d))
}

/// `log` of the mean over ordered pairs `i != k` of `exp(-|z_i - z_k|^2 / tau)`.
pub fn uniformity_on_tape(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let n = tape.value(z).rows();
    if n < 2 {
        return Err(DiffError::Invalid {
            op: "uniformity",
            message: format!("needs at least 2 embeddings, got {n}"),
        }
        .into());
    }
    let dist = tape.pairwise_squared_distance(z);
    // shift by the smallest off-diagonal distance so nothing underflows
    let values = tape.value(dist);
    let mut shift = f64::INFINITY;
    let mut offset = Tensor::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            if i == k {
                offset.data_mut()[i * n + k] = SELF_PAIR_OFFSET;
            } else {
                shift = shift.min(values.get(i, k));
            }
        }
    }
    offset.data_mut().iter_mut().for_each(|v| *v -= shift);
    let offset = tape.constant(offset);
    let shifted = tape.add(dist, offset)?;
    let scaled = tape.scale(shifted, -1.0 / tau);
    let e = tape.exp(scaled)?;
    let m = tape.mean_off_diagonal(e)?;
    let l = tape.log(m)?;
    Ok(add_scalar(tape, l, -shift / tau))
}

/// One item of the repulsion term:
/// `log[sum_r exp(-|a - n_r|^2 / tau) + exp(-|a - z_plus|^2 / tau)]`.
///
/// `anchor` and `positive` are `1 x d`, `negatives` is `M x d`.
pub fn cope_term_on_tape(tape: &mut Tape, anchor: Var, negatives: Var, positive: Var, tau: f64) -> Result<Var> {
    let m = tape.value(negatives).rows();
    let targets = tape.concat_rows(&[negatives, positive])?;
    let anchors = tape.broadcast_rows(anchor, m + 1)?;
    let dist = tape.squared_distance(anchors, targets)?;
    let shift = tape.value(dist).data().iter().copied().fold(f64::INFINITY, f64::min);
    let shift_var = tape.constant(Tensor::new(m + 1, 1, vec![-shift; m + 1])?);
    let shifted = tape.add(dist, shift_var)?;
    let scaled = tape.scale(shifted, -1.0 / tau);
    let e = tape.exp(scaled)?;
    let s = tape.sum(e);
    let l = tape.log(s)?;
    Ok(add_scalar(tape, l, -shift / tau))
}

fn add_scalar(tape: &mut Tape, v: Var, c: f64) -> Var {
    let c = tape.constant(Tensor::scalar(c));
    tape.add(v, c).expect("scalar shapes")
}

fn check_dims(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DiffError::ShapeMismatch {
            op,
            left: [1, expected],
            right: [1, got],
        }
        .into());
    }
    Ok(())
}

fn anchor_on_tape(tape: &mut Tape, theta: &TransformWeight, z: &Embedding) -> Result<Var> {
    check_dims("anchor", theta.matrix.cols(), z.dim())?;
    let e = tape.constant(theta.matrix.transpose());
    let zv = tape.constant(z.as_row());
    project_on_tape(tape, zv, e)
}

/// `(1/N) sum |Theta z / |Theta z| - z_plus|^2`.
pub fn align_star(anchors: &[(TransformWeight, Embedding)], positives: &[Embedding]) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != positives.len() {
        return Err(Error::Config(format!(
            "align_star needs matching non-empty batches, got {} and {}",
            anchors.len(),
            positives.len()
        )));
    }
    let mut tape = Tape::new();
    let a = anchors
        .iter()
        .map(|(theta, z)| anchor_on_tape(&mut tape, theta, z))
        .collect::<Result<Vec<_>>>()?;
    let a = tape.concat_rows(&a)?;
    let p = tape.constant(rows_of(positives)?);
    let out = align_on_tape(&mut tape, a, p)?;
    Ok(tape.value(out).item())
}

pub fn uniformity(batch: &[Embedding], tau: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(DiffError::Invalid {
            op: "uniformity",
            message: format!("needs at least 2 embeddings, got {}", batch.len()),
        }
        .into());
    }
    let mut tape = Tape::new();
    let z = tape.constant(rows_of(batch)?);
    let out = uniformity_on_tape(&mut tape, z, tau)?;
    Ok(tape.value(out).item())
}

/// Mean over items of the repulsion term, with anchors `Theta z / |Theta z|`.
pub fn cope_loss(
    items: &[(TransformWeight, Embedding, Embedding)],
    negatives: &[Vec<Embedding>],
    tau: f64,
) -> Result<f64> {
    if items.is_empty() || items.len() != negatives.len() {
        return Err(Error::Config(format!(
            "cope_loss needs one negative set per item, got {} items and {} sets",
            items.len(),
            negatives.len()
        )));
    }
    let m = negatives[0].len();
    let mut total = 0.0;
    for ((theta, z, z_plus), negs) in items.iter().zip(negatives) {
        if negs.len() != m || m == 0 {
            return Err(Error::Config("every item needs the same non-zero number of negatives".into()));
        }
        let mut tape = Tape::new();
        let a = anchor_on_tape(&mut tape, theta, z)?;
        let n = tape.constant(rows_of(negs)?);
        let p = tape.constant(z_plus.as_row());
        let term = cope_term_on_tape(&mut tape, a, n, p, tau)?;
        total += tape.value(term).item();
    }
    Ok(total / items.len() as f64)
}

/// Stacks embeddings as the rows of a matrix.
pub fn rows_of(batch: &[Embedding]) -> Result<Tensor> {
    let d = batch.first().map_or(0, Embedding::dim);
    let mut data = Vec::with_capacity(batch.len() * d);
    for z in batch {
        check_dims("rows_of", d, z.dim())?;
        data.extend_from_slice(z.values());
    }
    Ok(Tensor::new(batch.len(), d, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieConfig {
    pub lambda_inv: f64,
    pub lambda_eq: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub invariant_dim: usize,
    pub equivariant_dim: usize,
}

impl SieConfig {
    /// Unit weights and an even split of `d`.
    pub fn even(d: usize) -> Self {
        Self {
            lambda_inv: 1.0,
            lambda_eq: 1.0,
            lambda_v: 1.0,
            lambda_c: 1.0,
            invariant_dim: d / 2,
            equivariant_dim: d - d / 2,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let weights = [self.lambda_inv, self.lambda_eq, self.lambda_v, self.lambda_c];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("SIE weights must be >= 0".into()));
        }
        if self.invariant_dim + self.equivariant_dim != d {
            return Err(Error::Config(format!(
                "SIE split {} + {} does not sum to {d}",
                self.invariant_dim, self.equivariant_dim
            )));
        }
        Ok(())
    }
}

/// Covariance and variance penalties of a batch `N x d`:
/// `C = (1/d) sum_{i != j} Cov_ij^2`, `V = (1/d) sum_j max(0, 1 - std_j)`.
/// Uses the unbiased `N - 1` estimator.
pub fn sie_regularizers(z: &Tensor) -> Result<(f64, f64)> {
    let (n, d) = (z.rows(), z.cols());
    if n < 2 {
        return Err(DiffError::Invalid {
            op: "sie_regularizers",
            message: format!("needs at least 2 rows, got {n}"),
        }
        .into());
    }
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n * d).map(|k| z.data()[k] - means[k % d]).collect();
    let centered = Tensor::new(n, d, centered)?;
    let cov = centered.transpose().matmul(&centered)?;
    let scale = 1.0 / (n - 1) as f64;
    let mut c = 0.0;
    let mut v = 0.0;
    for i in 0..d {
        for j in 0..d {
            let value = cov.get(i, j) * scale;
            if i == j {
                v += (1.0 - value.max(0.0).sqrt()).max(0.0);
            } else {
                c += value * value;
            }
        }
    }
    Ok((c / d as f64, v / d as f64))
}

/// Unweighted components of the SIE objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SieTerms {
    pub cov_z: f64,
    pub var_z: f64,
    pub cov_z_prime: f64,
    pub var_z_prime: f64,
    /// Mean squared distance between the invariant parts of the two views.
    pub invariance: f64,
    /// Mean squared error of the predicted equivariant part.
    pub equivariance: f64,
    /// Variance penalty of the predictions.
    pub prediction_var: f64,
}

impl SieTerms {
    pub fn weighted(&self, cfg: &SieConfig) -> f64 {
        cfg.lambda_c * (self.cov_z + self.cov_z_prime)
            + cfg.lambda_v * (self.var_z + self.var_z_prime)
            + cfg.lambda_inv * self.invariance
            + cfg.lambda_eq * self.equivariance
            + cfg.lambda_v * self.prediction_var
    }

    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("cov_z", self.cov_z),
            ("var_z", self.var_z),
            ("cov_z_prime", self.cov_z_prime),
            ("var_z_prime", self.var_z_prime),
            ("invariance", self.invariance),
            ("equivariance", self.equivariance),
            ("prediction_var", self.prediction_var),
        ]
    }
}

/// Components of [`sie_loss`].
///
/// `z` and `z_prime` are the two views (`N x d`, invariant columns first);
/// `predicted_eq` holds the predictor applied to the equivariant part of
/// each row of `z` (`N x equivariant_dim`).
pub fn sie_terms(z: &Tensor, z_prime: &Tensor, predicted_eq: &Tensor, cfg: &SieConfig) -> Result<SieTerms> {
    let (n, d) = (z.rows(), z.cols());
    cfg.validate(d)?;
    let (k_inv, k_eq) = (cfg.invariant_dim, cfg.equivariant_dim);
    if z_prime.shape() != z.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "sie_loss",
            left: z.shape(),
            right: z_prime.shape(),
        }
        .into());
    }
    if predicted_eq.shape() != [n, k_eq] {
        return Err(DiffError::ShapeMismatch {
            op: "sie_loss",
            left: [n, k_eq],
            right: predicted_eq.shape(),
        }
        .into());
    }
    let mut inv = 0.0;
    let mut equiv = 0.0;
    for i in 0..n {
        let (a, b) = (z.row_slice(i), z_prime.row_slice(i));
        inv += (0..k_inv).map(|j| (a[j] - b[j]).powi(2)).sum::<f64>();
        let p = predicted_eq.row_slice(i);
        equiv += (0..k_eq).map(|j| (p[j] - b[k_inv + j]).powi(2)).sum::<f64>();
    }
    let (cov_z, var_z) = sie_regularizers(z)?;
    let (cov_z_prime, var_z_prime) = sie_regularizers(z_prime)?;
    let (_, prediction_var) = sie_regularizers(predicted_eq)?;
    Ok(SieTerms {
        cov_z,
        var_z,
        cov_z_prime,
        var_z_prime,
        invariance: inv / n as f64,
        equivariance: equiv / n as f64,
        prediction_var,
    })
}

/// The regularized invariant/equivariant objective, see [`sie_terms`].
pub fn sie_loss(z: &Tensor, z_prime: &Tensor, predicted_eq: &Tensor, cfg: &SieConfig) -> Result<f64> {
    Ok(sie_terms(z, z_prime, predicted_eq, cfg)?.weighted(cfg))
}

/// Rows `1..=d` of a Sylvester-Hadamard matrix of order `n` (a power of two
/// above `d`), scaled by 2: zero column means, zero cross-covariance and
/// per-column standard deviation above one.
pub fn hadamard_batch(n: usize, d: usize) -> Result<Tensor> {
    if !n.is_power_of_two() || d >= n || n < 2 {
        return Err(Error::Config(format!(
            "hadamard batch needs a power-of-two size above the dimension, got n = {n}, d = {d}"
        )));
    }
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    let rows: Vec<Vec<f64>> = h.iter().map(|r| r[1..=d].iter().map(|v| 2.0 * v).collect()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Both objectives on the hand-built degenerate solution.
#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateAudit {
    pub sie: SieTerms,
    pub sie_total: f64,
    pub cope: f64,
    /// `log(M + 1)`.
    pub bound: f64,
}

/// Builds the invariant, non-collapsed configuration: a Hadamard batch seen
/// identically in both views, an identity predictor for the equivariant
/// part and an identity `Theta` for every rotation. SIE has no way to tell
/// it apart from a useful solution; the repulsion term sits at its maximum.
pub fn degenerate_audit(batch: usize, d: usize, num_negatives: usize, tau: f64) -> Result<DegenerateAudit> {
    let z = hadamard_batch(batch, d)?;
    let cfg = SieConfig::even(d);
    let eq: Vec<Vec<f64>> = (0..batch).map(|i| z.row_slice(i)[cfg.invariant_dim..].to_vec()).collect();
    let predicted = Tensor::from_rows(&eq)?;
    let sie = sie_terms(&z, &z, &predicted, &cfg)?;
    let embeddings = (0..batch)
        .map(|i| Embedding::normalize(z.row_slice(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(TransformWeight, Embedding, Embedding)> = embeddings
        .iter()
        .map(|e| (TransformWeight::identity(d), e.clone(), e.clone()))
        .collect();
    let negatives: Vec<Vec<Embedding>> = embeddings.iter().map(|e| vec![e.clone(); num_negatives]).collect();
    Ok(DegenerateAudit {
        sie,
        sie_total: sie.weighted(&cfg),
        cope: cope_loss(&items, &negatives, tau)?,
        bound: ((num_negatives + 1) as f64).ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{finite_difference, relative_errors};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit<R: Rng>(rng: &mut R, d: usize) -> Embedding {
        Embedding::normalize((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn matrix<R: Rng>(rng: &mut R, d: usize) -> TransformWeight {
        TransformWeight {
            matrix: Tensor::new(d, d, (0..d * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
        }
    }

    fn sq(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s
    }

    fn naive_anchor(theta: &TransformWeight, z: &Embedding) -> Vec<f64> {
        let d = z.dim();
        let mut v = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                v[i] += theta.matrix.get(i, j) * z.values()[j];
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn align_examples_and_oracle() {
        let mut rng = stream(1, "losses", &[]);
        let d = 8;
        let items: Vec<(TransformWeight, Embedding)> = (0..5).map(|_| (matrix(&mut rng, d), unit(&mut rng, d))).collect();
        let perfect: Vec<Embedding> = items
            .iter()
            .map(|(t, z)| Embedding::new(naive_anchor(t, z)).unwrap())
            .collect();
        assert_abs_diff_eq!(align_star(&items, &perfect).unwrap(), 0.0, epsilon = 1e-15);
        let opposite: Vec<Embedding> = perfect
            .iter()
            .map(|p| Embedding::new(p.values().iter().map(|v| -v).collect()).unwrap())
            .collect();
        assert_abs_diff_eq!(align_star(&items, &opposite).unwrap(), 4.0, epsilon = 1e-12);

        let positives: Vec<Embedding> = (0..5).map(|_| unit(&mut rng, d)).collect();
        let mut oracle = 0.0;
        for ((t, z), p) in items.iter().zip(&positives) {
            oracle += sq(&naive_anchor(t, z), p.values());
        }
        oracle /= 5.0;
        assert_abs_diff_eq!(align_star(&items, &positives).unwrap(), oracle, epsilon = 1e-12);
        assert!(align_star(&items, &positives[..2]).is_err());
    }

    #[test]
    fn uniformity_examples_and_oracle() {
        let mut rng = stream(2, "losses", &[]);
        let z = unit(&mut rng, 6);
        assert_abs_diff_eq!(uniformity(&[z.clone(), z.clone(), z.clone()], 0.1).unwrap(), 0.0, epsilon = 1e-15);
        let anti = Embedding::new(z.values().iter().map(|v| -v).collect()).unwrap();
        assert_abs_diff_eq!(uniformity(&[z.clone(), anti], 0.1).unwrap(), -40.0, epsilon = 1e-12);
        assert!(uniformity(&[z], 0.1).is_err());

        let batch: Vec<Embedding> = (0..7).map(|_| unit(&mut rng, 6)).collect();
        let mut acc = 0.0;
        for i in 0..7 {
            for k in 0..7 {
                if i != k {
                    acc += (-sq(batch[i].values(), batch[k].values()) / 0.1).exp();
                }
            }
        }
        let oracle = (acc / 42.0).ln();
        assert_abs_diff_eq!(uniformity(&batch, 0.1).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn uniformity_survives_small_temperatures() {
        let mut rng = stream(9, "losses", &[]);
        let batch: Vec<Embedding> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let v = uniformity(&batch, 1e-3).unwrap();
        assert!(v.is_finite() && v < -100.0);
    }

    fn collapse_items(d: usize, n: usize, seed: u64) -> (Vec<(TransformWeight, Embedding, Embedding)>, Vec<Vec<Embedding>>) {
        let mut rng = stream(seed, "collapse", &[]);
        let zs: Vec<Embedding> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let items = zs
            .iter()
            .map(|z| (TransformWeight::identity(d), z.clone(), z.clone()))
            .collect();
        let negs = zs.iter().map(|z| vec![z.clone(); 8]).collect();
        (items, negs)
    }

    #[test]
    fn collapse_gives_log_m_plus_one() {
        let (items, negs) = collapse_items(16, 4, 3);
        assert_abs_diff_eq!(cope_loss(&items, &negs, 0.1).unwrap(), 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(9f64.ln(), 2.1972246, epsilon = 1e-7);
        assert_abs_diff_eq!(LossConfig::default().collapse_bound(), 9f64.ln(), epsilon = 0.0);
    }

    #[test]
    fn orthogonal_negatives() {
        let d = 16;
        let mut basis = |i: usize| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            Embedding::new(v).unwrap()
        };
        let z = basis(0);
        let items = vec![(TransformWeight::identity(d), z.clone(), z.clone())];
        let negs = vec![(1..9).map(&mut basis).collect::<Vec<_>>()];
        let want = (1.0 + 8.0 * (-20f64).exp()).ln();
        let got = cope_loss(&items, &negs, 0.1).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-20);
        assert_abs_diff_eq!(got, 1.65e-8, epsilon = 1e-10);
    }

    #[test]
    fn cope_matches_oracle() {
        let mut rng = stream(4, "losses", &[]);
        let d = 8;
        let tau = 0.2;
        let items: Vec<_> = (0..4)
            .map(|_| (matrix(&mut rng, d), unit(&mut rng, d), unit(&mut rng, d)))
            .collect();
        let negs: Vec<Vec<Embedding>> = (0..4).map(|_| (0..5).map(|_| unit(&mut rng, d)).collect()).collect();
        let mut oracle = 0.0;
        for ((t, z, p), ns) in items.iter().zip(&negs) {
            let a = naive_anchor(t, z);
            let mut s = (-sq(&a, p.values()) / tau).exp();
            for n in ns {
                s += (-sq(&a, n.values()) / tau).exp();
            }
            oracle += s.ln();
        }
        oracle /= 4.0;
        assert_abs_diff_eq!(cope_loss(&items, &negs, tau).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn moving_a_negative_away_lowers_the_loss() {
        let d = 4;
        let z = Embedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let items = vec![(TransformWeight::identity(d), z.clone(), z.clone())];
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let angle = 0.1 + 0.3 * step as f64;
            let moved = Embedding::new(vec![angle.cos(), angle.sin(), 0.0, 0.0]).unwrap();
            let mut negs = vec![z.clone(); 3];
            negs.push(moved);
            let l = cope_loss(&items, &[negs], 0.5).unwrap();
            assert!(l < prev);
            assert!(l < 5f64.ln());
            prev = l;
        }
    }

    #[test]
    fn total_is_affine() {
        let parts = LossParts {
            align: 0.5,
            cope: 2.0,
            unif: -10.0,
        };
        let cfg = LossConfig::default();
        assert_abs_diff_eq!(total_loss(&parts, &cfg), -5.9, epsilon = 1e-12);
        let zero = LossConfig { beta: 0.0, ..cfg.clone() };
        assert_abs_diff_eq!(total_loss(&parts, &zero), -9.5, epsilon = 0.0);
        let one = LossConfig { beta: 1.0, ..cfg };
        assert_abs_diff_eq!(total_loss(&parts, &one), 2.5, epsilon = 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { num_negatives: 0, ..Default::default() }.validate().is_err());
    }

    fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v).unwrap();
        let analytic = tape.backward(out).unwrap().wrt_or_zeros(&tape, v);
        let numeric = finite_difference(
            |p| {
                let mut t = Tape::new();
                let v = t.leaf(p.clone());
                let o = f(&mut t, v).unwrap();
                t.value(o).item()
            },
            x,
            1e-5,
        );
        for e in relative_errors(&analytic, &numeric, 1e-6) {
            assert!(e < 1e-4, "{analytic:?} vs {numeric:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(5, "grad", &[]);
        let raw = |rng: &mut crate::rng::RandomStream, r: usize, c: usize| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
        };
        let x = raw(&mut rng, 6, 5);
        check(
            |t, v| {
                let z = t.l2_normalize(v)?;
                uniformity_on_tape(t, z, 0.5)
            },
            &x,
        );
        let positives = raw(&mut rng, 6, 5);
        check(
            |t, v| {
                let a = t.l2_normalize(v)?;
                let p = t.constant(positives.clone());
                let p = t.l2_normalize(p)?;
                align_on_tape(t, a, p)
            },
            &x,
        );
        // anchor row 0, negatives rows 1..5, positive row 5
        check(
            |t, v| {
                let z = t.l2_normalize(v)?;
                let a = t.select_rows(z, &[0])?;
                let n = t.select_rows(z, &[1, 2, 3, 4])?;
                let p = t.select_rows(z, &[5])?;
                cope_term_on_tape(t, a, n, p, 0.3)
            },
            &x,
        );
    }

    fn naive_cov(z: &Tensor) -> Vec<Vec<f64>> {
        let (n, d) = (z.rows(), z.cols());
        let mut cov = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                let ma = (0..n).map(|i| z.get(i, a)).sum::<f64>() / n as f64;
                let mb = (0..n).map(|i| z.get(i, b)).sum::<f64>() / n as f64;
                for i in 0..n {
                    cov[a][b] += (z.get(i, a) - ma) * (z.get(i, b) - mb);
                }
                cov[a][b] /= (n - 1) as f64;
            }
        }
        cov
    }

    #[test]
    fn sie_regularizer_examples_and_oracle() {
        let z = hadamard_batch(16, 8).unwrap();
        let (c, v) = sie_regularizers(&z).unwrap();
        assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);

        let constant = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 5]).unwrap();
        let (c, v) = sie_regularizers(&constant).unwrap();
        assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        assert!(sie_regularizers(&Tensor::zeros(1, 3)).is_err());

        let mut rng = stream(6, "sie", &[]);
        let z = Tensor::new(10, 4, (0..40).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect()).unwrap();
        let cov = naive_cov(&z);
        let mut c_o = 0.0;
        let mut v_o = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    v_o += (1.0 - cov[a][a].sqrt()).max(0.0);
                } else {
                    c_o += cov[a][b] * cov[a][b];
                }
            }
        }
        let (c, v) = sie_regularizers(&z).unwrap();
        assert_abs_diff_eq!(c, c_o / 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v, v_o / 4.0, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_configuration_fools_sie_but_not_repulsion() {
        let audit = degenerate_audit(16, 8, 8, 0.1).unwrap();
        for (name, v) in audit.sie.components() {
            assert!(v.abs() < 1e-12, "{name} = {v}");
        }
        assert!(audit.sie_total.abs() < 1e-12);
        assert_abs_diff_eq!(audit.cope, 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(audit.bound, 2.1972246, epsilon = 1e-7);
        assert!(hadamard_batch(12, 4).is_err());
        assert!(hadamard_batch(8, 8).is_err());
    }

    #[test]
    fn sie_degenerate_optimum_and_zero_weights() {
        let z = hadamard_batch(16, 8).unwrap();
        let cfg = SieConfig::even(8);
        let eq: Vec<Vec<f64>> = (0..16).map(|i| z.row_slice(i)[4..].to_vec()).collect();
        let predicted = Tensor::from_rows(&eq).unwrap();
        assert_abs_diff_eq!(sie_loss(&z, &z, &predicted, &cfg).unwrap(), 0.0, epsilon = 1e-12);

        let mut rng = stream(7, "sie", &[]);
        let a = Tensor::new(6, 8, (0..48).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let b = Tensor::new(6, 8, (0..48).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let p = Tensor::new(6, 4, (0..24).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let zero = SieConfig {
            lambda_inv: 0.0,
            lambda_eq: 0.0,
            lambda_v: 0.0,
            lambda_c: 0.0,
            ..cfg.clone()
        };
        assert_eq!(sie_loss(&a, &b, &p, &zero).unwrap(), 0.0);

        // term-by-term oracle
        let reg = |m: &Tensor| {
            let cov = naive_cov(m);
            let k = m.cols();
            let mut c = 0.0;
            let mut v = 0.0;
            for x in 0..k {
                for y in 0..k {
                    if x == y {
                        v += (1.0 - cov[x][x].sqrt()).max(0.0);
                    } else {
                        c += cov[x][y] * cov[x][y];
                    }
                }
            }
            (c / k as f64, v / k as f64)
        };
        let (ca, va) = reg(&a);
        let (cb, vb) = reg(&b);
        let (_, vp) = reg(&p);
        let mut inv = 0.0;
        let mut eq = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                inv += (a.get(i, j) - b.get(i, j)).powi(2);
                eq += (p.get(i, j) - b.get(i, 4 + j)).powi(2);
            }
        }
        let oracle = ca + va + cb + vb + inv / 6.0 + eq / 6.0 + vp;
        assert_abs_diff_eq!(sie_loss(&a, &b, &p, &cfg).unwrap(), oracle, epsilon = 1e-10);
        assert!(sie_loss(&a, &b, &p, &SieConfig::even(6)).is_err());
    }
}
