use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{argmax, GlanceNetModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Position within the interpretable set `J`.
    pub concept: usize,
    /// Index of that concept in the full latent vector.
    pub latent: usize,
    pub weight: f64,
    pub activation: f64,
}

impl Contribution {
    pub fn value(&self) -> f64 {
        self.weight * self.activation
    }
}

/// Concept contributions to the score of the predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub class: usize,
    /// Model score `s_y` for the predicted class.
    pub score: f64,
    /// Sorted by `|weight·activation|`, largest first.
    pub contributions: Vec<Contribution>,
}

impl Explanation {
    /// The class score rebuilt from the contributions alone.
    pub fn reconstructed_score(&self) -> f64 {
        self.contributions.iter().map(Contribution::value).sum()
    }
}

impl GlanceNetModel {
    /// Explains the prediction for a single flattened input.
    pub fn explain(&self, x: &[f64]) -> Result<Explanation> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                "explain",
                format!("input of length {} for input size {}", x.len(), self.input_dim()),
            ));
        }
        let mu = self.encode_mean(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        self.explain_concepts(mu.select_cols(self.split().interpretable())?.row(0))
    }

    /// Explains the prediction for given interpretable activations `z_J`.
    pub fn explain_concepts(&self, z_j: &[f64]) -> Result<Explanation> {
        let scores = self.scores(&Tensor::matrix(1, z_j.len(), z_j.to_vec())?)?;
        let class = argmax(scores.row(0));
        let w = self.classifier().expect("scores checked the classifier");
        let mut contributions: Vec<Contribution> = z_j
            .iter()
            .enumerate()
            .map(|(j, &a)| Contribution {
                concept: j,
                latent: self.split().interpretable()[j],
                weight: w.get(class, j),
                activation: a,
            })
            .collect();
        contributions.sort_by(|a, b| b.value().abs().total_cmp(&a.value().abs()));
        Ok(Explanation { class, score: scores.get(0, class), contributions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::rng::{normal_tensor, seeded};

    fn model(seed: u64) -> GlanceNetModel {
        GlanceNetModel::new(
            &ModelSpec {
                input_dim: 10,
                latent_dim: 5,
                hidden: vec![6],
                interpretable: vec![0, 3, 4],
                num_classes: Some(3),
                num_conditions: 3,
            },
            &mut seeded(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_contributions() {
        let mut m = model(0);
        m.set_classifier(Some(Tensor::zeros(&[3, 3]))).unwrap();
        let e = m.explain(&[0.5; 10]).unwrap();
        assert!(e.contributions.iter().all(|c| c.value() == 0.0));
        assert_eq!(e.score, 0.0);
    }

    #[test]
    fn single_weight() {
        let mut m = model(1);
        let mut w = Tensor::zeros(&[3, 3]);
        w.data_mut()[0] = 2.0;
        m.set_classifier(Some(w)).unwrap();
        let e = m.explain_concepts(&[3.0, 1.0, -1.0]).unwrap();
        assert_eq!(e.class, 0);
        assert_eq!((e.contributions[0].weight, e.contributions[0].activation), (2.0, 3.0));
        assert_eq!(e.score, 6.0);
        assert_eq!(e.contributions.len(), 3);
    }

    #[test]
    fn reconstructed_score_is_faithful() {
        for seed in 0..20 {
            let m = model(seed);
            let x = normal_tensor(&[10], &mut seeded(100 + seed));
            let e = m.explain(x.data()).unwrap();
            assert!((e.reconstructed_score() - e.score).abs() < 1e-9);
            assert!(e.contributions.windows(2).all(|p| p[0].value().abs() >= p[1].value().abs()));
        }
    }
}
