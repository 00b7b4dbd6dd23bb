use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng64;
use crate::tensor::{Tape, Tensor, Var};

use super::loss::{concept_loss, Batch};

/// Deterministic concept extractor `x ↦ z ∈ ℝ^k` trained only on concept
/// annotations. Used as the unregularized baseline in leakage comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBottleneck {
    encoder: Mlp,
}

impl ConceptBottleneck {
    pub fn new(input_dim: usize, hidden: &[usize], concepts: usize, rng: &mut Rng64) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(hidden);
        dims.push(concepts);
        Ok(ConceptBottleneck { encoder: Mlp::new(&dims, rng)? })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn concept_count(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.encoder.named_parameters("encoder")
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.parameters_mut()
    }

    /// Concept logits, `[batch×k]`.
    pub fn concepts(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.eval(x)
    }

    /// Batch mean of the masked concept cross-entropy.
    pub fn loss<'t>(&self, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
        batch.validate()?;
        let g = batch
            .concepts
            .as_ref()
            .filter(|_| batch.concept_mask.iter().any(|&m| m))
            .ok_or_else(|| Error::Contract("concept bottleneck needs annotated examples".into()))?;
        let tape: &'t Tape = params[0].tape();
        let z = self.encoder.forward(params, tape.constant(batch.images.clone()))?;
        let mut g = g.clone();
        let width = g.cols();
        for i in (0..batch.len()).filter(|&i| !batch.concept_mask[i]) {
            g.data_mut()[i * width..(i + 1) * width].fill(0.0);
        }
        concept_loss(z, &g)?.mul(tape.constant(batch.mask_tensor()))?.mean()
    }
}
