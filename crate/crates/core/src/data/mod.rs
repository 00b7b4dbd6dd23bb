//! Datasets, ingestion and task construction.

mod idx;
mod sprites;
mod tasks;

pub use idx::{load_idx, load_idx_where, parse_images, parse_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC};
pub use sprites::{render_sprite, sprite_center, travel, Shape, SpriteFactors, DEFAULT_RESOLUTION, FACTOR_SCHEMA};
pub use tasks::{
    build_parity_task, build_sprites_alignment_task, build_sprites_leak_task, sample_sprites, AlignmentTask, LeakTask,
    ParityTask,
};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::nn::checkpoint;
use crate::rng::{permutation, seeded};
use crate::tensor::Tensor;

/// Factor annotations with a per-example presence flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    pub schema: Vec<String>,
    /// `[m×n]`, entries in `[0, 1]`.
    pub values: Tensor,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub provenance: String,
    /// `[m×d]`, pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<Option<usize>>,
    pub factors: Option<FactorSet>,
    /// Prior component for each example.
    pub conditions: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if self.images.rank() != 2 {
            return Err(Error::Data(format!("{}: images must be a matrix", self.name)));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{}: pixel value {v} outside [0, 1]", self.name)));
        }
        if self.labels.len() != m || self.conditions.len() != m {
            return Err(Error::Data(format!("{}: per-example vectors disagree with {m} images", self.name)));
        }
        if let Some(f) = &self.factors {
            if f.values.rank() != 2 || f.values.rows() != m || f.mask.len() != m || f.values.cols() != f.schema.len() {
                return Err(Error::Data(format!("{}: factor block does not match schema", self.name)));
            }
            if let Some(v) = f.values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("{}: factor value {v} outside [0, 1]", self.name)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            factors: self
                .factors
                .as_ref()
                .map(|f| -> Result<FactorSet> {
                    Ok(FactorSet {
                        schema: f.schema.clone(),
                        values: f.values.select_rows(rows)?,
                        mask: rows.iter().map(|&i| f.mask[i]).collect(),
                    })
                })
                .transpose()?,
            conditions: rows.iter().map(|&i| self.conditions[i]).collect(),
        })
    }

    /// Labels, failing if any example is unlabeled.
    pub fn required_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, y)| y.ok_or_else(|| Error::Data(format!("{}: example {i} has no label", self.name))))
            .collect()
    }

    /// Factor columns by name.
    pub fn factor_columns(&self, names: &[&str]) -> Result<Tensor> {
        let f = self.factors.as_ref().ok_or_else(|| Error::Data(format!("{} has no factor annotations", self.name)))?;
        let idx = names
            .iter()
            .map(|n| f.schema.iter().position(|s| s == n).ok_or_else(|| Error::Data(format!("unknown factor {n}"))))
            .collect::<Result<Vec<_>>>()?;
        f.values.select_cols(&idx)
    }

    /// Training batch whose concept annotations are the named factor columns
    /// (or none).
    pub fn to_batch(&self, concepts: Option<&[&str]>) -> Result<Batch> {
        let n = self.len();
        let (concepts, mask) = match concepts {
            Some(names) => (
                Some(self.factor_columns(names)?),
                self.factors.as_ref().expect("checked by factor_columns").mask.clone(),
            ),
            None => (None, vec![false; n]),
        };
        Ok(Batch {
            images: self.images.clone(),
            labels: self.labels.clone(),
            concepts,
            concept_mask: mask,
            conditions: self.conditions.clone(),
        })
    }

    /// CSV with columns `id,label,condition,<factors…>,mask`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,condition");
        if let Some(f) = &self.factors {
            for s in &f.schema {
                out.push(',');
                out.push_str(s);
            }
            out.push_str(",mask");
        }
        out.push('\n');
        for i in 0..self.len() {
            let label = self.labels[i].map(|y| y.to_string()).unwrap_or_default();
            let _ = write!(out, "{i},{label},{}", self.conditions[i]);
            if let Some(f) = &self.factors {
                for v in f.values.row(i) {
                    let _ = write!(out, ",{v}");
                }
                let _ = write!(out, ",{}", u8::from(f.mask[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.glnc` (images in the checkpoint format).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        checkpoint::save(&dir.join(format!("{stem}.glnc")), &[("images".into(), &self.images)])
    }
}

/// Seeded shuffle then contiguous partition into
/// `round(f₀·m)`, `round(f₁·m)` and the remainder.
pub fn split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<[LabeledDataset; 3]> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("split fractions {fractions:?} must be ≥ 0 and sum to 1")));
    }
    let m = ds.len();
    let n0 = (fractions[0] * m as f64).round() as usize;
    let n1 = ((fractions[1] * m as f64).round() as usize).min(m - n0.min(m));
    if n0 == 0 || n1 == 0 || n0 + n1 >= m {
        return Err(Error::Contract(format!("split of {m} examples leaves an empty partition")));
    }
    let order = permutation(m, &mut seeded(seed));
    Ok([ds.subset(&order[..n0])?, ds.subset(&order[n0..n0 + n1])?, ds.subset(&order[n0 + n1..])?])
}

/// Keeps annotations on exactly `round(fraction·m)` seeded examples.
pub fn mask_supervision(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("supervision fraction {fraction} outside (0, 1]")));
    }
    let m = ds.len();
    let keep = (fraction * m as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Contract(format!("fraction {fraction} of {m} examples annotates none")));
    }
    let mut out = ds.clone();
    let f =
        out.factors.as_mut().ok_or_else(|| Error::Data(format!("{} has no factor annotations to mask", ds.name)))?;
    let order = permutation(m, &mut seeded(seed));
    f.mask = vec![false; m];
    for &i in &order[..keep] {
        f.mask[i] = true;
    }
    Ok(out)
}

/// Min–max bounds of each factor column over `reference`.
pub fn factor_bounds(reference: &LabeledDataset) -> Result<Vec<(f64, f64)>> {
    let f = reference
        .factors
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no factor annotations", reference.name)))?;
    let (m, n) = (f.values.rows(), f.values.cols());
    Ok((0..n)
        .map(|j| {
            (0..m).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(f.values.get(i, j)), hi.max(f.values.get(i, j)))
            })
        })
        .collect())
}

/// Applies training-split min–max bounds, clipping to `[0, 1]`. Constant
/// columns are left unchanged.
pub fn rescale_factors(ds: &LabeledDataset, bounds: &[(f64, f64)]) -> Result<LabeledDataset> {
    let mut out = ds.clone();
    let f = out.factors.as_mut().ok_or_else(|| Error::Data(format!("{} has no factor annotations", ds.name)))?;
    let n = f.values.cols();
    if bounds.len() != n {
        return Err(Error::Contract(format!("{} bounds for {n} factors", bounds.len())));
    }
    for (k, v) in f.values.data_mut().iter_mut().enumerate() {
        let (lo, hi) = bounds[k % n];
        if hi > lo {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(m: usize) -> LabeledDataset {
        let images = Tensor::new(vec![m, 2], (0..2 * m).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        LabeledDataset {
            name: "toy".into(),
            provenance: "test".into(),
            images,
            labels: (0..m).map(|i| Some(i % 2)).collect(),
            factors: Some(FactorSet {
                schema: vec!["a".into(), "b".into()],
                values: Tensor::new(vec![m, 2], (0..2 * m).map(|i| i as f64 / (2 * m) as f64).collect()).unwrap(),
                mask: vec![true; m],
            }),
            conditions: (0..m).map(|i| i % 2).collect(),
        }
    }

    fn ids(ds: &LabeledDataset) -> Vec<usize> {
        (0..ds.len()).map(|i| (ds.factors.as_ref().unwrap().values.get(i, 0) * 200.0).round() as usize / 2).collect()
    }

    #[test]
    fn split_sizes_and_membership() {
        let ds = toy(100);
        let [a, b, c] = split(&ds, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = ids(&a).into_iter().chain(ids(&b)).chain(ids(&c)).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let [a2, _, _] = split(&ds, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!(a, a2);
        assert!(split(&toy(5), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split(&ds, [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn masking_counts() {
        let ds = toy(1000);
        let full = mask_supervision(&ds, 1.0, 1).unwrap();
        assert!(full.factors.unwrap().mask.iter().all(|&m| m));
        let tenth = mask_supervision(&ds, 0.1, 1).unwrap();
        assert_eq!(tenth.factors.as_ref().unwrap().mask.iter().filter(|&&m| m).count(), 100);
        assert_eq!(tenth, mask_supervision(&ds, 0.1, 1).unwrap());
        assert!(mask_supervision(&toy(10), 0.01, 1).is_err());
    }

    #[test]
    fn validation_catches_out_of_range() {
        let mut ds = toy(4);
        ds.validate().unwrap();
        ds.images.data_mut()[0] = 1.5;
        assert!(matches!(ds.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn csv_and_batch() {
        let ds = toy(3);
        let csv = ds.to_csv();
        assert!(csv.starts_with("id,label,condition,a,b,mask\n0,0,0,"));
        assert_eq!(csv.lines().count(), 4);
        let batch = ds.to_batch(Some(&["b"])).unwrap();
        assert_eq!(batch.concepts.unwrap().shape(), &[3, 1]);
        assert!(ds.to_batch(Some(&["zzz"])).is_err());
        let plain = ds.to_batch(None).unwrap();
        assert!(plain.concept_mask.iter().all(|&m| !m));
    }

    #[test]
    fn rescaling_uses_reference_bounds() {
        let ds = toy(10);
        let bounds = factor_bounds(&ds.subset(&[2, 3, 4]).unwrap()).unwrap();
        let r = rescale_factors(&ds, &bounds).unwrap();
        let v = &r.factors.unwrap().values;
        assert_eq!(v.get(2, 0), 0.0);
        assert_eq!(v.get(4, 0), 1.0);
        assert_eq!(v.get(9, 1), 1.0);
        let distinct: BTreeSet<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        assert!(distinct.len() > 2);
    }
}
