//! Minibatch training shared by every model.

use crate::error::{Error, Result};
use crate::model::{Batch, ConceptBottleneck, GlanceNetModel, Hyperparameters};
use crate::nn::{should_stop, Adam, LrSchedule};
use crate::rng::{derive, normal_tensor, permutation, Rng64};
use crate::tensor::{Tape, Tensor, Var};

/// Anything with named parameters and a differentiable batch loss.
pub trait Trainable: Clone {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// `noise` is `None` for deterministic evaluation.
    fn batch_loss<'t>(
        &self,
        params: &[Var<'t>],
        batch: &Batch,
        hyper: &Hyperparameters,
        noise: Option<&mut Rng64>,
    ) -> Result<Var<'t>>;
}

impl Trainable for GlanceNetModel {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        GlanceNetModel::named_parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        GlanceNetModel::parameters_mut(self)
    }

    fn batch_loss<'t>(
        &self,
        params: &[Var<'t>],
        batch: &Batch,
        hyper: &Hyperparameters,
        noise: Option<&mut Rng64>,
    ) -> Result<Var<'t>> {
        let shape = [batch.len(), self.latent_dim()];
        let eps = match noise {
            Some(rng) => normal_tensor(&shape, rng),
            None => Tensor::zeros(&shape),
        };
        Ok(self.bind_vars(params)?.loss(batch, hyper, &eps)?.total)
    }
}

impl Trainable for ConceptBottleneck {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        ConceptBottleneck::named_parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        ConceptBottleneck::parameters_mut(self)
    }

    fn batch_loss<'t>(
        &self,
        params: &[Var<'t>],
        batch: &Batch,
        _hyper: &Hyperparameters,
        _noise: Option<&mut Rng64>,
    ) -> Result<Var<'t>> {
        self.loss(params, batch)
    }
}

/// Schedule and stopping options beyond [`Hyperparameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub decay: f64,
    pub warmup_epochs: usize,
    pub warmup_start: f64,
    /// Early stopping on validation loss; `None` trains every epoch.
    pub patience: Option<usize>,
    /// Restore the parameters of the best validation epoch at the end.
    pub restore_best: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { decay: 1.0, warmup_epochs: 0, warmup_start: 1e-7, patience: None, restore_best: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean minibatch loss per epoch.
    pub train_losses: Vec<f64>,
    /// Deterministic validation loss per epoch (empty without a validation set).
    pub val_losses: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Trains `model` in place. With a validation set and
/// [`TrainOptions::restore_best`] the parameters of the best validation epoch
/// are restored at the end.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &Batch,
    validation: Option<&Batch>,
    hyper: &Hyperparameters,
    options: &TrainOptions,
    seed: u64,
) -> Result<TrainHistory> {
    hyper.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let schedule = LrSchedule {
        base: hyper.lr,
        warmup_start: if options.warmup_epochs == 0 { hyper.lr } else { options.warmup_start },
        warmup_epochs: options.warmup_epochs,
        decay: options.decay,
    };
    schedule.validate()?;
    let mut order_rng = derive(seed, "shuffle");
    let mut noise_rng = derive(seed, "noise");
    let mut adam = Adam::default();
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, M)> = None;

    for epoch in 0..hyper.epochs {
        let lr = schedule.rate(epoch);
        let order = permutation(data.len(), &mut order_rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch = data.subset(chunk)?;
            let loss = step(model, &mut adam, &names, &batch, hyper, lr, &mut noise_rng).map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("step {}: {msg}", history.steps)),
                other => other,
            })?;
            history.steps += 1;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        history.train_losses.push(total / count as f64);

        if let Some(val) = validation {
            let v = evaluate(model, val, hyper)?;
            history.val_losses.push(v);
            if options.restore_best && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
            }
            if let Some(patience) = options.patience {
                if should_stop(&history.val_losses, patience) {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn step<M: Trainable>(
    model: &mut M,
    adam: &mut Adam,
    names: &[String],
    batch: &Batch,
    hyper: &Hyperparameters,
    lr: f64,
    noise: &mut Rng64,
) -> Result<f64> {
    let tape = Tape::new();
    let params: Vec<Var> = model.named_parameters().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = model.batch_loss(&params, batch, hyper, Some(noise))?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became {value}")));
    }
    loss.backward()?;
    let grads: Vec<Tensor> = params.iter().map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape()))).collect();
    let mut refs = model.parameters_mut();
    adam.step(&mut refs, &grads, names, lr)?;
    Ok(value)
}

/// Deterministic (noise-free) loss averaged over `data` in chunks.
pub fn evaluate<M: Trainable>(model: &M, data: &Batch, hyper: &Hyperparameters) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(hyper.batch_size.max(256)) {
        let tape = Tape::new();
        let params: Vec<Var> = model.named_parameters().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let loss = model.batch_loss(&params, &data.subset(chunk)?, hyper, None)?.item()?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Repeats [`step`] on one fixed batch, returning the loss before each step.
pub fn fit_batch<M: Trainable>(
    model: &mut M,
    batch: &Batch,
    hyper: &Hyperparameters,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::default();
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let mut rng = derive(seed, "noise");
    (0..steps).map(|_| step(model, &mut adam, &names, batch, hyper, hyper.lr, &mut rng)).collect()
}
