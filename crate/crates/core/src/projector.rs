//! Two-layer perceptron mapping encoder embeddings into the LM's input space.
//! Its outputs serve as the embeddings of per-passage special tokens.

use crate::error::{Error, Result};
use crate::numerics::{Activation, Linear, Matrix, ParamSet, Parameter, Rng};

#[derive(Clone, Debug)]
pub struct Projector {
    pub first: Linear,
    pub activation: Activation,
    pub second: Linear,
}

/// Intermediate values from [`Projector::forward`], needed by the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectorTrace {
    input: Matrix,
    pre_activation: Matrix,
    hidden: Matrix,
}

impl Projector {
    /// The encoder emits unit-norm vectors, so the first layer is drawn with
    /// unit variance to give unit-variance pre-activations; a fan-based
    /// initialisation would shrink them by `sqrt(d_enc)` and leave the ranking
    /// head starting from nearly constant special tokens.
    pub fn new(rng: &mut Rng, d_enc: usize, d_hidden: usize, d_lm: usize, activation: Activation) -> Self {
        let mut first = Linear::new(rng, d_enc, d_hidden);
        first.weight.value = rng.matrix_normal(d_enc, d_hidden, 1.0);
        Self {
            first,
            activation,
            second: Linear::new(rng, d_hidden, d_lm),
        }
    }

    pub fn d_enc(&self) -> usize {
        self.first.in_dim()
    }

    pub fn d_out(&self) -> usize {
        self.second.out_dim()
    }

    /// Projects one embedding.
    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward(&Matrix::row_vector(e))?;
        Ok(out.into_vec())
    }

    /// Projects each row of `x` (n × d_enc).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ProjectorTrace)> {
        if x.cols() != self.d_enc() {
            return Err(Error::DimensionMismatch {
                expected: self.d_enc(),
                got: x.cols(),
            });
        }
        let pre = self.first.forward(x)?;
        let mut hidden = pre.clone();
        hidden
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = self.activation.apply(*v));
        let out = self.second.forward(&hidden)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("projector output".into()));
        }
        Ok((
            out,
            ProjectorTrace {
                input: x.clone(),
                pre_activation: pre,
                hidden,
            },
        ))
    }

    /// Accumulates weight gradients from `upstream` (n × d_lm) and returns the
    /// gradient with respect to the input embeddings.
    pub fn backward(&mut self, trace: &ProjectorTrace, upstream: &Matrix) -> Result<Matrix> {
        let mut d_hidden = self.second.backward(&trace.hidden, upstream)?;
        for (g, pre) in d_hidden
            .data_mut()
            .iter_mut()
            .zip(trace.pre_activation.data())
        {
            *g *= self.activation.derivative(*pre);
        }
        self.first.backward(&trace.input, &d_hidden)
    }
}

impl ParamSet for Projector {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.first.visit("projector.first", f);
        self.second.visit("projector.second", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.first.visit_mut("projector.first", f);
        self.second.visit_mut("projector.second", f);
    }
}
