use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMask;

use super::TrainMeta;

/// The explainer network: `input_dim -> hidden_dim (ReLU) -> 1 (sigmoid)`.
///
/// `w1` is stored row-major, `hidden_dim` rows of `input_dim` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpNetModel {
    pub num_heads: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub mask: FeatureMask,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub train_meta: TrainMeta,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

/// Parameter gradients in the same layout as [`ExpNetModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Gradients {
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    pub fn fill_zero(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2 = 0.0;
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.iter_mut() {
            *g *= k;
        }
    }

    /// All entries in canonical order `w1, b1, w2, b2`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(std::iter::once(&mut self.b2))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ExpNetModel {
    /// A model with every parameter set to zero.
    pub fn zeros(num_heads: usize, hidden_dim: usize, mask: FeatureMask) -> Self {
        let input_dim = mask.input_dim(num_heads);
        ExpNetModel {
            num_heads,
            input_dim,
            hidden_dim,
            mask,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
            train_meta: TrainMeta::default(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// All parameters in canonical order `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(std::iter::once(&mut self.b2))
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.mask.input_dim(self.num_heads);
        if self.input_dim != expected {
            return Err(Error::Model(format!(
                "input_dim {} does not match mask {:?} with {} heads (expected {expected})",
                self.input_dim, self.mask, self.num_heads
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Model("hidden_dim must be at least 1".into()));
        }
        for (name, len, want) in [
            ("w1", self.w1.len(), self.hidden_dim * self.input_dim),
            ("b1", self.b1.len(), self.hidden_dim),
            ("w2", self.w2.len(), self.hidden_dim),
        ] {
            if len != want {
                return Err(Error::Model(format!("{name} has {len} entries, expected {want}")));
            }
        }
        if let Some(i) = self.params().position(|p| !p.is_finite()) {
            return Err(Error::Model(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(Error::LengthMismatch {
                context: "feature vector".into(),
                expected: self.input_dim,
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Importance probability of one token.
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        self.check_dim(features)?;
        Ok(self.forward_unchecked(features).prob)
    }

    pub(crate) fn forward_unchecked(&self, features: &[f64]) -> ForwardPass {
        let d = self.input_dim;
        let mut pre_activation = Vec::with_capacity(self.hidden_dim);
        let mut hidden = Vec::with_capacity(self.hidden_dim);
        let mut logit = self.b2;
        for (i, row) in self.w1.chunks_exact(d).enumerate() {
            let z = row
                .iter()
                .zip(features)
                .fold(self.b1[i], |acc, (w, x)| acc + w * x);
            let h = z.max(0.0);
            pre_activation.push(z);
            hidden.push(h);
            logit += self.w2[i] * h;
        }
        ForwardPass {
            pre_activation,
            hidden,
            logit,
            prob: sigmoid(logit),
        }
    }

    pub fn forward_pass(&self, features: &[f64]) -> Result<ForwardPass> {
        self.check_dim(features)?;
        Ok(self.forward_unchecked(features))
    }

    /// Adds the parameter gradient of a loss to `grads`, given the pass and
    /// the loss derivative with respect to the output probability.
    pub fn accumulate_gradients(
        &self,
        features: &[f64],
        pass: &ForwardPass,
        dloss_dprob: f64,
        grads: &mut Gradients,
    ) {
        let d = self.input_dim;
        let dlogit = dloss_dprob * pass.prob * (1.0 - pass.prob);
        grads.b2 += dlogit;
        for i in 0..self.hidden_dim {
            grads.w2[i] += dlogit * pass.hidden[i];
            if pass.pre_activation[i] <= 0.0 {
                continue;
            }
            let dz = dlogit * self.w2[i];
            grads.b1[i] += dz;
            for (g, x) in grads.w1[i * d..(i + 1) * d].iter_mut().zip(features) {
                *g += dz * x;
            }
        }
    }
}
