use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::{BoundModel, GlanceNetModel};

/// Training hyperparameters. `recon_weight` scales the reconstruction term and
/// defaults to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub recon_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub supervision_fraction: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            recon_weight: 1.0,
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            supervision_fraction: 1.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda), ("recon_weight", self.recon_weight)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Contract("batch_size and epochs must be positive".into()));
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return Err(Error::Contract(format!("supervision fraction {} outside (0, 1]", self.supervision_fraction)));
        }
        Ok(())
    }
}

/// A minibatch. Rows of `concepts` whose `concept_mask` entry is false are
/// ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<Option<usize>>,
    pub concepts: Option<Tensor>,
    pub concept_mask: Vec<bool>,
    pub conditions: Vec<usize>,
}

impl Batch {
    /// Images only, every example conditioned on prior component 0.
    pub fn unlabeled(images: Tensor) -> Self {
        let n = images.rows();
        Batch { images, labels: vec![None; n], concepts: None, concept_mask: vec![false; n], conditions: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.rank() != 2 {
            return Err(Error::shape("batch", format!("images {:?}", self.images.shape())));
        }
        if self.labels.len() != n || self.concept_mask.len() != n || self.conditions.len() != n {
            return Err(Error::shape(
                "batch",
                format!(
                    "{n} images, {} labels, {} mask flags, {} conditions",
                    self.labels.len(),
                    self.concept_mask.len(),
                    self.conditions.len()
                ),
            ));
        }
        match &self.concepts {
            Some(g) if g.rank() != 2 || g.rows() != n => {
                Err(Error::shape("batch", format!("concepts {:?} for {n} images", g.shape())))
            }
            None if self.concept_mask.iter().any(|&m| m) => {
                Err(Error::Contract("concept mask set without concept annotations".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            concepts: self.concepts.as_ref().map(|g| g.select_rows(rows)).transpose()?,
            concept_mask: rows.iter().map(|&i| self.concept_mask[i]).collect(),
            conditions: rows.iter().map(|&i| self.conditions[i]).collect(),
        })
    }

    /// Mask flags as a `[batch]` 0/1 tensor.
    pub(crate) fn mask_tensor(&self) -> Tensor {
        let m = self.concept_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.len()], m).expect("length matches")
    }
}

/// Loss graph plus batch means of each raw (unweighted) term.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub reconstruction: f64,
    pub kl: f64,
    pub concept: f64,
    pub label: f64,
}

/// `z = μ + exp(log_var/2)·ε`.
pub fn reparameterize<'t>(mu: Var<'t>, log_var: Var<'t>, noise: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != log_var.shape() || mu.shape() != noise.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}, {:?}, {:?}", mu.shape(), log_var.shape(), noise.shape()),
        ));
    }
    mu.add(log_var.scale(0.5)?.exp()?.mul(noise)?)
}

/// Per-example `KL(N(μ, diag e^{lv}) ‖ N(μ_y, I))`, shape `[batch]`.
pub fn kl_to_class_prior<'t>(
    mu: Var<'t>,
    log_var: Var<'t>,
    prior_means: Var<'t>,
    conditions: &[usize],
) -> Result<Var<'t>> {
    let rows = prior_means.shape()[0];
    if let Some(&bad) = conditions.iter().find(|&&c| c >= rows) {
        return Err(Error::Contract(format!("condition id {bad} outside {rows} prior components")));
    }
    if conditions.len() != mu.shape()[0] {
        return Err(Error::shape(
            "kl_to_class_prior",
            format!("{} conditions for {} rows", conditions.len(), mu.shape()[0]),
        ));
    }
    let diff = mu.sub(prior_means.gather_rows(conditions)?)?;
    log_var.exp()?.add(diff.square()?)?.sub(log_var)?.add_scalar(-1.0)?.sum_axis(1)?.scale(0.5)
}

/// Per-example summed Bernoulli cross-entropy `Σ_k softplus(z_k) − g_k·z_k`,
/// shape `[batch]`. Annotations must lie in `[0, 1]`.
pub fn concept_loss<'t>(z_j: Var<'t>, g: &Tensor) -> Result<Var<'t>> {
    if z_j.shape() != g.shape() {
        return Err(Error::shape("concept_loss", format!("{:?} vs {:?}", z_j.shape(), g.shape())));
    }
    if let Some((i, &v)) = g.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("concept annotation {v} at flat index {i} outside [0, 1]")));
    }
    let g = z_j.tape().constant(g.clone());
    z_j.softplus()?.sub(g.mul(z_j)?)?.sum_axis(1)
}

impl<'m, 't> BoundModel<'m, 't> {
    /// Mean over the batch of
    /// `recon_weight·BCE + λ·CE(label) + β·KL + γ·Ω(masked)`.
    /// `noise` supplies the reparameterization draws.
    pub fn loss(&self, batch: &Batch, hyper: &Hyperparameters, noise: &Tensor) -> Result<LossTerms<'t>> {
        batch.validate()?;
        let n = batch.len();
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let model = self.model();
        let k = model.latent_dim();
        if noise.shape() != [n, k] {
            return Err(Error::shape("total_loss", format!("noise {:?} for [{n}, {k}]", noise.shape())));
        }
        let has_labels = model.classifier.is_some() && batch.labels.iter().any(Option::is_some);
        let has_concepts = batch.concept_mask.iter().any(|&m| m);
        if hyper.recon_weight == 0.0 && !has_labels && !has_concepts {
            return Err(Error::Contract("batch has neither labels, annotations, nor a reconstruction target".into()));
        }
        let tape: &'t Tape = self.prior().tape();
        let x = tape.constant(batch.images.clone());
        let (mu, log_var) = self.encode(x)?;
        let z = reparameterize(mu, log_var, tape.constant(noise.clone()))?;
        let logits = self.decode(z)?;
        let recon = logits.softplus()?.sub(x.mul(logits)?)?.sum_axis(1)?;
        let kl = kl_to_class_prior(mu, log_var, self.prior(), &batch.conditions)?;
        let mut per = recon.scale(hyper.recon_weight)?.add(kl.scale(hyper.beta)?)?;
        let mut concept_mean = 0.0;
        let mut label_mean = 0.0;
        if has_concepts {
            let g = batch.concepts.as_ref().expect("validated");
            let mask = batch.mask_tensor();
            // Rows without annotations are zeroed so their placeholder values
            // never reach the range check.
            let mut g_clean = g.clone();
            let width = g.cols();
            for i in (0..n).filter(|&i| !batch.concept_mask[i]) {
                g_clean.data_mut()[i * width..(i + 1) * width].fill(0.0);
            }
            let omega = concept_loss(self.concepts(z)?, &g_clean)?.mul(tape.constant(mask))?;
            concept_mean = omega.with_value(|t| t.data().iter().sum::<f64>()) / n as f64;
            per = per.add(omega.scale(hyper.gamma)?)?;
        }
        if has_labels {
            let c = model.num_classes().expect("classifier present");
            let mut onehot = Tensor::zeros(&[n, c]);
            for (i, y) in batch.labels.iter().enumerate() {
                if let Some(y) = *y {
                    if y >= c {
                        return Err(Error::Contract(format!("label {y} outside {c} classes")));
                    }
                    onehot.data_mut()[i * c + y] = 1.0;
                }
            }
            let logp = self.class_logits(self.concepts(z)?)?.log_softmax(1)?;
            let ce = logp.mul(tape.constant(onehot))?.sum_axis(1)?.neg()?;
            label_mean = ce.with_value(|t| t.data().iter().sum::<f64>()) / n as f64;
            per = per.add(ce.scale(hyper.lambda)?)?;
        }
        let mean_of = |v: Var<'t>| v.with_value(|t| t.data().iter().sum::<f64>()) / n as f64;
        Ok(LossTerms {
            total: per.mean()?,
            reconstruction: mean_of(recon),
            kl: mean_of(kl),
            concept: concept_mean,
            label: label_mean,
        })
    }
}

impl GlanceNetModel {
    /// Value of the training objective with explicit reparameterization noise.
    pub fn total_loss(&self, batch: &Batch, hyper: &Hyperparameters, noise: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.named_parameters().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        self.bind_vars(&vars)?.loss(batch, hyper, noise)?.total.item()
    }
}
