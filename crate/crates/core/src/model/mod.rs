//! The concept model and its concept-bottleneck baseline.
//!
//! The latent vector `z ∈ ℝ^{k'}` is split into interpretable coordinates `J`
//! (read by the linear classifier and supervised by concept annotations) and
//! opaque coordinates `J̄` (used only for reconstruction). The prior over `z`
//! is a mixture with one unit-covariance Gaussian per conditioning class whose
//! means are learned jointly with everything else.

mod bottleneck;
mod explain;
mod loss;

pub use bottleneck::ConceptBottleneck;
pub use explain::{Contribution, Explanation};
pub use loss::{concept_loss, kl_to_class_prior, reparameterize, Batch, Hyperparameters, LossTerms};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{Activation, LinearLayer, Mlp};
use crate::rng::Rng64;
use crate::tensor::{Tape, Tensor, Var};

/// Rows per inference chunk.
const EVAL_CHUNK: usize = 512;

/// Partition of latent indices into interpretable `J` and opaque `J̄`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSplit {
    interpretable: Vec<usize>,
    opaque: Vec<usize>,
}

impl LatentSplit {
    pub fn new(latent_dim: usize, interpretable: &[usize]) -> Result<Self> {
        if interpretable.is_empty() {
            return Err(Error::Contract("the interpretable latent set J must be nonempty".into()));
        }
        let set: BTreeSet<usize> = interpretable.iter().copied().collect();
        if set.len() != interpretable.len() {
            return Err(Error::Contract(format!("duplicate indices in J {interpretable:?}")));
        }
        if let Some(&bad) = set.iter().find(|&&j| j >= latent_dim) {
            return Err(Error::Contract(format!("J index {bad} out of range for {latent_dim} latents")));
        }
        let opaque = (0..latent_dim).filter(|j| !set.contains(j)).collect();
        Ok(LatentSplit { interpretable: interpretable.to_vec(), opaque })
    }

    pub fn interpretable(&self) -> &[usize] {
        &self.interpretable
    }

    pub fn opaque(&self) -> &[usize] {
        &self.opaque
    }

    pub fn latent_dim(&self) -> usize {
        self.interpretable.len() + self.opaque.len()
    }
}

/// Architecture of a [`GlanceNetModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub interpretable: Vec<usize>,
    /// `None` disables the classifier head.
    pub num_classes: Option<usize>,
    pub num_conditions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlanceNetModel {
    encoder: Mlp,
    decoder: Mlp,
    classifier: Option<Tensor>,
    prior_means: Tensor,
    split: LatentSplit,
}

impl GlanceNetModel {
    /// Seeded random initialization. Prior means start at the origin.
    pub fn new(spec: &ModelSpec, rng: &mut Rng64) -> Result<Self> {
        let split = LatentSplit::new(spec.latent_dim, &spec.interpretable)?;
        if spec.num_conditions == 0 {
            return Err(Error::Contract("at least one prior component is required".into()));
        }
        let mut enc_dims = vec![spec.input_dim];
        enc_dims.extend(&spec.hidden);
        enc_dims.push(2 * spec.latent_dim);
        let mut dec_dims = vec![spec.latent_dim];
        dec_dims.extend(spec.hidden.iter().rev());
        dec_dims.push(spec.input_dim);
        let encoder = Mlp::new(&enc_dims, rng)?;
        let decoder = Mlp::new(&dec_dims, rng)?;
        let classifier = match spec.num_classes {
            Some(c) if c >= 2 => Some(LinearLayer::init(split.interpretable().len(), c, rng).weight),
            Some(c) => return Err(Error::Contract(format!("classifier needs ≥ 2 classes, got {c}"))),
            None => None,
        };
        let prior_means = Tensor::zeros(&[spec.num_conditions, spec.latent_dim]);
        Ok(GlanceNetModel { encoder, decoder, classifier, prior_means, split })
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        classifier: Option<Tensor>,
        prior_means: Tensor,
        interpretable: &[usize],
    ) -> Result<Self> {
        let latent_dim = decoder.input_dim();
        if encoder.output_dim() != 2 * latent_dim {
            return Err(Error::shape(
                "glancenet",
                format!("encoder emits {} values for {latent_dim} latents", encoder.output_dim()),
            ));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::shape("glancenet", "decoder output differs from encoder input"));
        }
        if prior_means.rank() != 2 || prior_means.shape()[1] != latent_dim {
            return Err(Error::shape(
                "glancenet",
                format!("prior means {:?} for {latent_dim} latents", prior_means.shape()),
            ));
        }
        let split = LatentSplit::new(latent_dim, interpretable)?;
        if let Some(w) = &classifier {
            if w.rank() != 2 || w.shape()[1] != split.interpretable().len() {
                return Err(Error::shape(
                    "glancenet",
                    format!("classifier {:?} for {} concepts", w.shape(), split.interpretable().len()),
                ));
            }
        }
        Ok(GlanceNetModel { encoder, decoder, classifier, prior_means, split })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn classifier(&self) -> Option<&Tensor> {
        self.classifier.as_ref()
    }

    pub fn set_classifier(&mut self, weight: Option<Tensor>) -> Result<()> {
        if let Some(w) = &weight {
            if w.rank() != 2 || w.shape()[1] != self.split.interpretable().len() {
                return Err(Error::shape("set_classifier", format!("{:?}", w.shape())));
            }
        }
        self.classifier = weight;
        Ok(())
    }

    pub fn prior_means(&self) -> &Tensor {
        &self.prior_means
    }

    pub fn set_prior_means(&mut self, means: Tensor) -> Result<()> {
        if means.shape() != self.prior_means.shape() {
            return Err(Error::shape("set_prior_means", format!("{:?}", means.shape())));
        }
        self.prior_means = means;
        Ok(())
    }

    pub fn split(&self) -> &LatentSplit {
        &self.split
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.split.latent_dim()
    }

    pub fn num_conditions(&self) -> usize {
        self.prior_means.shape()[0]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(|w| w.shape()[0])
    }

    /// Encoder, decoder, prior means, then the classifier when present.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_parameters("encoder");
        out.extend(self.decoder.named_parameters("decoder"));
        out.push(("prior.means".into(), &self.prior_means));
        if let Some(w) = &self.classifier {
            out.push(("classifier.weight".into(), w));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.decoder.parameters_mut());
        out.push(&mut self.prior_means);
        if let Some(w) = &mut self.classifier {
            out.push(w);
        }
        out
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        let vars: Vec<Var<'t>> = self.named_parameters().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
        self.bind_vars(&vars).expect("parameter count matches by construction")
    }

    fn bind_constant<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        let vars: Vec<Var<'t>> = self.named_parameters().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        self.bind_vars(&vars).expect("parameter count matches by construction")
    }

    /// Uses caller-supplied variables (in [`Self::named_parameters`] order) as
    /// the model parameters.
    pub fn bind_vars<'m, 't>(&'m self, vars: &[Var<'t>]) -> Result<BoundModel<'m, 't>> {
        let ne = self.encoder.param_count();
        let nd = self.decoder.param_count();
        let expected = ne + nd + 1 + usize::from(self.classifier.is_some());
        if vars.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter vars, got {}", vars.len())));
        }
        Ok(BoundModel {
            model: self,
            encoder: vars[..ne].to_vec(),
            decoder: vars[ne..ne + nd].to_vec(),
            prior: vars[ne + nd],
            classifier: self.classifier.as_ref().map(|_| vars[ne + nd + 1]),
        })
    }

    /// Encoder means and log-variances, `[batch×k']` each.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut mu = Vec::new();
        let mut lv = Vec::new();
        for chunk in row_chunks(x)? {
            let tape = Tape::new();
            let m = self.bind_constant(&tape);
            let (a, b) = m.encode(tape.constant(chunk))?;
            mu.extend(a.value().into_data());
            lv.extend(b.value().into_data());
        }
        let k = self.latent_dim();
        Ok((Tensor::matrix(x.rows(), k, mu)?, Tensor::matrix(x.rows(), k, lv)?))
    }

    /// Encoder means only.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.0)
    }

    /// Bernoulli logits for each pixel, `[batch×d]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.cols() != self.latent_dim() {
            return Err(Error::shape("decode", format!("latents {:?} for {} dims", z.shape(), self.latent_dim())));
        }
        let mut out = Vec::with_capacity(z.rows() * self.input_dim());
        for chunk in row_chunks(z)? {
            let tape = Tape::new();
            let m = self.bind_constant(&tape);
            out.extend(m.decode(tape.constant(chunk))?.value().into_data());
        }
        Tensor::matrix(z.rows(), self.input_dim(), out)
    }

    /// Decoded pixel probabilities.
    pub fn decode_image(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode(z)?.map(crate::tensor::sigmoid))
    }

    /// `softmax(W·μ_J)` for encoder means restricted to `J`.
    pub fn classify(&self, mu_j: &Tensor) -> Result<Tensor> {
        let w = self.require_classifier()?;
        let tape = Tape::new();
        let z = tape.constant(mu_j.clone());
        let w = tape.constant(w.clone());
        if mu_j.rank() != 2 || mu_j.cols() != w.shape()[1] {
            return Err(Error::shape("classify", format!("concepts {:?}", mu_j.shape())));
        }
        Ok(z.matmul(w.transpose()?)?.softmax(1)?.value())
    }

    /// Argmax of [`Self::classify`] on the encoder means of `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mu = self.encode_mean(x)?;
        let probs = self.classify(&mu.select_cols(self.split.interpretable())?)?;
        Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
    }

    /// Class scores `s_y = Σ_j w_yj·z_j`, `[batch×c]`.
    pub fn scores(&self, mu_j: &Tensor) -> Result<Tensor> {
        let w = self.require_classifier()?;
        let tape = Tape::new();
        Ok(tape.constant(mu_j.clone()).matmul(tape.constant(w.transpose()?))?.value())
    }

    fn require_classifier(&self) -> Result<&Tensor> {
        self.classifier.as_ref().ok_or_else(|| Error::Contract("model was built without a classifier head".into()))
    }

    /// Squared reconstruction error `‖x − σ(decode(μ(x)))‖²` per row.
    pub fn reconstruction_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mu = self.encode_mean(x)?;
        let recon = self.decode_image(&mu)?;
        Ok((0..x.rows()).map(|i| x.row(i).iter().zip(recon.row(i)).map(|(a, b)| (a - b) * (a - b)).sum()).collect())
    }

    /// Decodes `z_base` with coordinate `dim` replaced by each of `values`.
    pub fn traverse(&self, z_base: &[f64], dim: usize, values: &[f64]) -> Result<Vec<Tensor>> {
        let k = self.latent_dim();
        if z_base.len() != k || dim >= k {
            return Err(Error::Contract(format!(
                "traversal of dim {dim} on a {}-vector for {k} latents",
                z_base.len()
            )));
        }
        if values.is_empty() {
            return Ok(Vec::new());
        }
        let mut rows = Vec::with_capacity(values.len() * k);
        for &v in values {
            let mut z = z_base.to_vec();
            z[dim] = v;
            rows.extend(z);
        }
        let images = self.decode_image(&Tensor::matrix(values.len(), k, rows)?)?;
        (0..values.len()).map(|i| Tensor::vector(images.row(i).to_vec())).collect()
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let j: Vec<f64> = self.split.interpretable().iter().map(|&j| j as f64).collect();
        out.push(("meta.interpretable".into(), Tensor::vector(j).expect("J nonempty")));
        out
    }

    /// Inverse of [`Self::to_named_tensors`]. Hidden layers use ReLU, output
    /// layers identity.
    pub fn from_named_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let mlp = |prefix: &str| -> Result<Mlp> {
            let mut layers = Vec::new();
            while let (Some(w), Some(b)) =
                (find(&format!("{prefix}.{}.weight", layers.len())), find(&format!("{prefix}.{}.bias", layers.len())))
            {
                layers.push(LinearLayer::from_parts(w, b)?);
            }
            if layers.is_empty() {
                return Err(Error::Data(format!("checkpoint has no {prefix} layers")));
            }
            let mut acts = vec![Activation::Relu; layers.len()];
            *acts.last_mut().expect("nonempty") = Activation::Identity;
            Mlp::from_layers(layers, acts)
        };
        let prior = find("prior.means").ok_or_else(|| Error::Data("checkpoint lacks prior.means".into()))?;
        let j = find("meta.interpretable").ok_or_else(|| Error::Data("checkpoint lacks meta.interpretable".into()))?;
        let j: Vec<usize> = j.data().iter().map(|&v| v as usize).collect();
        GlanceNetModel::from_parts(mlp("encoder")?, mlp("decoder")?, find("classifier.weight"), prior, &j)
    }
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'m, 't> {
    model: &'m GlanceNetModel,
    encoder: Vec<Var<'t>>,
    decoder: Vec<Var<'t>>,
    prior: Var<'t>,
    classifier: Option<Var<'t>>,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn model(&self) -> &'m GlanceNetModel {
        self.model
    }

    pub fn prior(&self) -> Var<'t> {
        self.prior
    }

    pub fn encode(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.model.input_dim() {
            return Err(Error::shape("encode", format!("input {shape:?} for input size {}", self.model.input_dim())));
        }
        let h = self.model.encoder.forward(&self.encoder, x)?;
        let k = self.model.latent_dim();
        Ok((h.slice_cols(0, k)?, h.slice_cols(k, 2 * k)?))
    }

    pub fn decode(&self, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.model.latent_dim() {
            return Err(Error::shape("decode", format!("latents {shape:?} for {} dims", self.model.latent_dim())));
        }
        self.model.decoder.forward(&self.decoder, z)
    }

    /// Interpretable coordinates of `z`.
    pub fn concepts(&self, z: Var<'t>) -> Result<Var<'t>> {
        z.select_cols(self.model.split.interpretable())
    }

    /// Class logits `z_J·Wᵀ`.
    pub fn class_logits(&self, z_j: Var<'t>) -> Result<Var<'t>> {
        let w = self.classifier.ok_or_else(|| Error::Contract("model was built without a classifier head".into()))?;
        z_j.matmul(w.transpose()?)
    }
}

fn row_chunks(x: &Tensor) -> Result<Vec<Tensor>> {
    if x.rank() != 2 {
        return Err(Error::shape("batch", format!("expected a matrix, got {:?}", x.shape())));
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    rows.chunks(EVAL_CHUNK).map(|c| x.select_rows(c)).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 12,
            latent_dim: 4,
            hidden: vec![8],
            interpretable: vec![1, 2],
            num_classes: Some(3),
            num_conditions: 3,
        }
    }

    fn zeroed(mut m: GlanceNetModel) -> GlanceNetModel {
        for p in m.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn split_validation() {
        assert!(LatentSplit::new(4, &[]).is_err());
        assert!(LatentSplit::new(4, &[1, 1]).is_err());
        assert!(LatentSplit::new(4, &[4]).is_err());
        let s = LatentSplit::new(5, &[3, 0]).unwrap();
        assert_eq!(s.opaque(), &[1, 2, 4]);
    }

    #[test]
    fn zero_encoder_returns_bias_halves() {
        let mut m = GlanceNetModel::new(&spec(), &mut seeded(0)).unwrap();
        let last = m.encoder_mut().layers_mut().last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let bias: Vec<f64> = last.bias.data().to_vec();
        let x = Tensor::full(&[3, 12], 0.5);
        let (mu, lv) = m.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[3, 4]);
        for i in 0..3 {
            assert_eq!(mu.row(i), &bias[..4]);
            assert_eq!(lv.row(i), &bias[4..]);
        }
        assert!(lv.is_finite());
    }

    #[test]
    fn zero_decoder_emits_bias_and_roundtrip_shape() {
        let m = GlanceNetModel::new(&spec(), &mut seeded(1)).unwrap();
        let x = Tensor::full(&[5, 12], 0.25);
        let recon = m.decode(&m.encode_mean(&x).unwrap()).unwrap();
        assert_eq!(recon.shape(), x.shape());
        let z = zeroed(m);
        let logits = z.decode(&Tensor::full(&[2, 4], 3.0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_values() {
        let mut m = zeroed(GlanceNetModel::new(&spec(), &mut seeded(2)).unwrap());
        let mu_j = Tensor::matrix(1, 2, vec![3.0, 1.0]).unwrap();
        let p = m.classify(&mu_j).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.set_classifier(Some(w.clone())).unwrap();
        let p = m.classify(&mu_j).unwrap();
        let e3 = 3f64.exp();
        let e1 = 1f64.exp();
        assert!((p.data()[0] - e3 / (e3 + e1)).abs() < 1e-15);
        assert!((p.data()[0] - 0.881).abs() < 1e-3);

        let mut rng = seeded(3);
        let w = crate::rng::normal_tensor(&[3, 2], &mut rng);
        let z = crate::rng::normal_tensor(&[20, 2], &mut rng);
        m.set_classifier(Some(w.clone())).unwrap();
        let a = m.classify(&z).unwrap();
        m.set_classifier(Some(w.map(|v| 7.5 * v))).unwrap();
        let b = m.classify(&z).unwrap();
        for i in 0..20 {
            assert_eq!(argmax(a.row(i)), argmax(b.row(i)));
        }
    }

    #[test]
    fn traversal() {
        let m = GlanceNetModel::new(&spec(), &mut seeded(4)).unwrap();
        let base = [0.3, -0.2, 1.0, 0.5];
        let one = m.traverse(&base, 2, &[1.0]).unwrap();
        let direct = m.decode_image(&Tensor::matrix(1, 4, base.to_vec()).unwrap()).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].data(), direct.data());
        let values: Vec<f64> = (0..11).map(|i| -5.0 + i as f64).collect();
        assert_eq!(m.traverse(&base, 0, &values).unwrap().len(), 11);
        assert!(m.traverse(&base, 4, &values).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let m = GlanceNetModel::new(&spec(), &mut seeded(5)).unwrap();
        let back = GlanceNetModel::from_named_tensors(&m.to_named_tensors()).unwrap();
        assert_eq!(m, back);
        let no_head = GlanceNetModel::new(&ModelSpec { num_classes: None, ..spec() }, &mut seeded(5)).unwrap();
        assert_eq!(GlanceNetModel::from_named_tensors(&no_head.to_named_tensors()).unwrap(), no_head);
    }
}
