//! Task builders for the leakage and alignment experiments.

use crate::error::{Error, Result};
use crate::rng::{derive, standard_normal, uniform, Rng64};
use crate::tensor::Tensor;

use super::sprites::{render_sprite, Shape, SpriteFactors, FACTOR_SCHEMA};
use super::{FactorSet, LabeledDataset};

/// Digits 4 and 5 with concept annotations, plus every other digit labeled by
/// parity.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityTask {
    /// `g = (𝟙[4], 𝟙[5])`, condition 0 for a 4 and 1 for a 5, no labels.
    pub closed: LabeledDataset,
    /// Label 0 for even and 1 for odd digits; the condition keeps the digit.
    pub open: LabeledDataset,
}

pub fn build_parity_task(mnist: &LabeledDataset) -> Result<ParityTask> {
    let digits = mnist.required_labels()?;
    let closed_rows: Vec<usize> = (0..digits.len()).filter(|&i| matches!(digits[i], 4 | 5)).collect();
    let open_rows: Vec<usize> = (0..digits.len()).filter(|&i| !matches!(digits[i], 4 | 5)).collect();
    if closed_rows.is_empty() || open_rows.is_empty() {
        return Err(Error::Data("parity task needs both 4/5 digits and other digits".into()));
    }
    let mut closed = mnist.subset(&closed_rows)?;
    let n = closed.len();
    let mut g = Tensor::zeros(&[n, 2]);
    for (r, &i) in closed_rows.iter().enumerate() {
        g.data_mut()[r * 2 + usize::from(digits[i] == 5)] = 1.0;
    }
    closed.name = format!("{}-closed45", mnist.name);
    closed.factors = Some(FactorSet { schema: vec!["is_4".into(), "is_5".into()], values: g, mask: vec![true; n] });
    closed.conditions = closed_rows.iter().map(|&i| usize::from(digits[i] == 5)).collect();
    closed.labels = vec![None; n];

    let mut open = mnist.subset(&open_rows)?;
    open.name = format!("{}-open-parity", mnist.name);
    open.labels = open_rows.iter().map(|&i| Some(digits[i] % 2)).collect();
    open.conditions = open_rows.iter().map(|&i| digits[i]).collect();
    open.factors = None;
    Ok(ParityTask { closed, open })
}

fn random_sprite(rng: &mut Rng64, pos: (f64, f64)) -> SpriteFactors {
    let shape = Shape::ALL[rng_index(rng, 3)];
    SpriteFactors {
        shape,
        size: uniform(rng, 0.0, 1.0),
        rotation: uniform(rng, 0.0, 1.0),
        pos_x: uniform(rng, pos.0, pos.1),
        pos_y: uniform(rng, pos.0, pos.1),
    }
}

fn rng_index(rng: &mut Rng64, n: usize) -> usize {
    use rand::Rng;
    rng.random_range(0..n)
}

/// Draws `n` sprites with positions uniform in `[lo, hi]²`. Sizes are drawn
/// from `[0.5, 1]` so every sprite is visible.
pub fn sample_sprites(n: usize, position: (f64, f64), rng: &mut Rng64) -> Vec<SpriteFactors> {
    (0..n)
        .map(|_| {
            let mut f = random_sprite(rng, position);
            f.size = 0.5 + 0.5 * f.size;
            f
        })
        .collect()
}

fn sprite_dataset(
    name: &str,
    factors: &[SpriteFactors],
    labels: Vec<Option<usize>>,
    conditions: Vec<usize>,
    resolution: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let n = factors.len();
    let d = resolution * resolution;
    let mut pixels = Vec::with_capacity(n * d);
    let mut g = Vec::with_capacity(n * 7);
    for f in factors {
        pixels.extend(render_sprite(f, resolution)?);
        g.extend(f.encode());
    }
    Ok(LabeledDataset {
        name: name.into(),
        provenance: format!("sprites:r{resolution}:seed{seed}"),
        images: Tensor::matrix(n, d, pixels)?,
        labels,
        factors: Some(FactorSet {
            schema: FACTOR_SCHEMA.iter().map(|s| s.to_string()).collect(),
            values: Tensor::matrix(n, 7, g)?,
            mask: vec![true; n],
        }),
        conditions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakTask {
    /// Positions in `[0.45, 0.55]²`, conditioned on shape, unlabeled.
    pub train: LabeledDataset,
    /// Free positions, label `𝟙[pos_x + pos_y > 1]`.
    pub test: LabeledDataset,
}

/// Builds `n` training and `n` test sprites.
pub fn build_sprites_leak_task(n: usize, seed: u64, resolution: usize) -> Result<LeakTask> {
    if n < 100 {
        return Err(Error::Contract(format!("leak task needs n ≥ 100, got {n}")));
    }
    let train_f = sample_sprites(n, (0.45, 0.55), &mut derive(seed, "leak-train"));
    let test_f = sample_sprites(n, (0.0, 1.0), &mut derive(seed, "leak-test"));
    let cond = |fs: &[SpriteFactors]| fs.iter().map(|f| f.shape.index()).collect::<Vec<_>>();
    let train = sprite_dataset("sprites-leak-train", &train_f, vec![None; n], cond(&train_f), resolution, seed)?;
    let labels = test_f.iter().map(|f| Some(usize::from(f.pos_x + f.pos_y > 1.0))).collect();
    let test = sprite_dataset("sprites-leak-test", &test_f, labels, cond(&test_f), resolution, seed)?;
    Ok(LeakTask { train, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTask {
    /// Labels double as prior conditions.
    pub dataset: LabeledDataset,
    /// Separator over `(size, rotation, pos_x, pos_y)`.
    pub weights: [f64; 4],
    pub threshold: f64,
}

impl AlignmentTask {
    pub fn score(weights: &[f64; 4], f: &SpriteFactors) -> f64 {
        weights[0] * f.size + weights[1] * f.rotation + weights[2] * f.pos_x + weights[3] * f.pos_y
    }
}

/// Label `𝟙[wᵀg_cont > b]` with a seeded `w` and `b` the lower median, which
/// yields exactly `⌊n/2⌋` positives when scores are distinct.
pub fn build_sprites_alignment_task(n: usize, seed: u64, resolution: usize) -> Result<AlignmentTask> {
    if n < 100 {
        return Err(Error::Contract(format!("alignment task needs n ≥ 100, got {n}")));
    }
    let mut wrng = derive(seed, "separator");
    let weights = [
        standard_normal(&mut wrng),
        standard_normal(&mut wrng),
        standard_normal(&mut wrng),
        standard_normal(&mut wrng),
    ];
    let factors = sample_sprites(n, (0.0, 1.0), &mut derive(seed, "alignment"));
    let mut scores: Vec<f64> = factors.iter().map(|f| AlignmentTask::score(&weights, f)).collect();
    scores.sort_by(f64::total_cmp);
    let threshold = scores[n.div_ceil(2) - 1];
    let labels: Vec<usize> =
        factors.iter().map(|f| usize::from(AlignmentTask::score(&weights, f) > threshold)).collect();
    let dataset = sprite_dataset(
        "sprites-alignment",
        &factors,
        labels.iter().map(|&y| Some(y)).collect(),
        labels.clone(),
        resolution,
        seed,
    )?;
    Ok(AlignmentTask { dataset, weights, threshold })
}
