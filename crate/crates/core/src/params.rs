//! Dense layers, MLPs and named parameter collections.

use rand::Rng;

use crate::diffkit::{DiffError, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Fully connected stack with `tanh` between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// An [`Mlp`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Option<Var>)>,
}

impl Mlp {
    /// Xavier-uniform weights and zero biases for `sizes[0] -> ... -> sizes[n]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], output_bias: bool, rng: &mut R) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
                    bias: (i < last || output_bias).then(|| Tensor::zeros(1, fan_out)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), l.bias.as_ref().map(&mut put)))
                .collect(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

impl MlpVars {
    /// Applies the stack to every row of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let h = self.hidden(tape, x)?;
        self.output_layer(tape, h)
    }

    /// Every layer but the last, each followed by `tanh`.
    pub fn hidden(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for (w, b) in &self.layers[..self.layers.len() - 1] {
            h = tape.matmul(h, *w)?;
            if let Some(b) = b {
                h = tape.add_bias(h, *b)?;
            }
            h = tape.tanh(h);
        }
        Ok(h)
    }

    /// The last, linear layer on its own.
    pub fn output_layer(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        let (w, b) = self.layers[self.layers.len() - 1];
        let mut out = tape.matmul(h, w)?;
        if let Some(b) = b {
            out = tape.add_bias(out, b)?;
        }
        Ok(out)
    }

    pub fn has_output_bias(&self) -> bool {
        self.layers.last().is_some_and(|(_, b)| b.is_some())
    }

    /// Gradients in the same order as [`Mlp::named`].
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(grads.wrt_or_zeros(tape, *w));
            if let Some(b) = b {
                out.push(grads.wrt_or_zeros(tape, *b));
            }
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(*w);
            out.extend(b);
        }
        out
    }
}

/// A model whose tensors can be listed by name, updated in place, and
/// restored from a checkpoint.
pub trait ParamSet {
    /// Tensors with stable names, in a fixed order.
    fn named(&self) -> Vec<(String, &Tensor)>;
    /// Mutable tensors in the same order as [`ParamSet::named`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}
