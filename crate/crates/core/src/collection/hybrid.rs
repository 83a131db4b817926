//! Hybrid real/synthetic selection and training-set assembly.

use std::collections::HashMap;

use crate::collection::bank::{EmbeddingBank, Group, Provenance, RowMeta};
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::numeric::{dot, FeatureMatrix};

/// Collected features for one class, each with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub class: usize,
    pub features: FeatureMatrix,
    pub provenance: Vec<Provenance>,
}

/// Indices of `pool` rows sorted by descending cosine to `anchor`, ties by
/// row order.
fn ranked(pool: &FeatureMatrix, anchor: &[f64]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = pool
        .rows()
        .enumerate()
        .map(|(i, r)| (i, dot(r, anchor)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Keeps real candidates whose cosine to the anchor exceeds `kappa`, best
/// first, and fills the remaining slots from the synthetic pool, best first.
/// Rows are expected unit-norm.
pub fn hybrid_collect(
    real_pool: &FeatureMatrix,
    synth_pool: &FeatureMatrix,
    anchor: &[f64],
    kappa: f64,
    n: usize,
) -> Result<(FeatureMatrix, Vec<Provenance>)> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Range(format!(
            "kappa must lie in (0, 1), got {kappa}"
        )));
    }
    if synth_pool.is_empty() {
        return Err(Error::EmptyInput("synthetic pool"));
    }
    let dim = anchor.len();
    for pool in [real_pool, synth_pool] {
        if !pool.is_empty() && pool.dim() != dim {
            return Err(Error::dims(dim, pool.dim()));
        }
    }
    let real: Vec<(usize, f64)> = if real_pool.is_empty() {
        Vec::new()
    } else {
        ranked(real_pool, anchor)
            .into_iter()
            .filter(|&(_, c)| c > kappa)
            .take(n)
            .collect()
    };
    let missing = n - real.len();
    if synth_pool.len() < missing {
        return Err(Error::InsufficientCandidates {
            class: String::new(),
            requested: n,
            available: real.len() + synth_pool.len(),
        });
    }
    let mut out = FeatureMatrix::with_capacity(dim, n);
    let mut provenance = Vec::with_capacity(n);
    for &(i, _) in &real {
        out.push_row(real_pool.row(i))?;
        provenance.push(Provenance::Real);
    }
    for (i, _) in ranked(synth_pool, anchor).into_iter().take(missing) {
        out.push_row(synth_pool.row(i))?;
        provenance.push(Provenance::Synthetic);
    }
    Ok((out, provenance))
}

/// Training rows with one-hot (or mixed) soft labels over all `C + M`
/// classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: FeatureMatrix,
    pub classes: Vec<usize>,
    soft_labels: Vec<f64>,
    num_classes: usize,
    pub provenance: Vec<Provenance>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn soft_label(&self, i: usize) -> &[f64] {
        &self.soft_labels[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn soft_labels(&self) -> &[f64] {
        &self.soft_labels
    }

    /// Persists rows with their class names, `id`/`neg` groups and
    /// provenance.
    pub fn to_bank(&self, space: &LabelSpace) -> Result<EmbeddingBank> {
        let meta = self
            .classes
            .iter()
            .zip(&self.provenance)
            .map(|(&k, &p)| {
                let group = if space.is_id(k) {
                    Group::Id
                } else {
                    Group::Neg
                };
                RowMeta::new(space.label(k), group, p)
            })
            .collect();
        EmbeddingBank::from_features(&self.features, meta)
    }

    pub fn from_bank(bank: &EmbeddingBank, space: &LabelSpace) -> Result<Self> {
        let features = bank.features();
        let mut per_class: Vec<ClassFeatures> = Vec::new();
        for (entry, row) in bank.manifest().iter().zip(features.rows()) {
            let class = space
                .class_index(&entry.label)
                .ok_or_else(|| Error::UnknownLabel(entry.label.clone()))?;
            match per_class.last_mut() {
                Some(last) if last.class == class => {
                    last.features.push_row(row)?;
                    last.provenance.push(entry.provenance);
                }
                _ => per_class.push(ClassFeatures {
                    class,
                    features: FeatureMatrix::from_rows(bank.dim(), &[row])?,
                    provenance: vec![entry.provenance],
                }),
            }
        }
        build_training_set(&per_class, space)
    }
}

/// Stacks per-class features and assigns one-hot soft labels.
pub fn build_training_set(per_class: &[ClassFeatures], space: &LabelSpace) -> Result<TrainingSet> {
    let k_total = space.num_classes();
    let mut features = FeatureMatrix::new(space.dim());
    let mut classes = Vec::new();
    let mut soft_labels = Vec::new();
    let mut provenance = Vec::new();
    for group in per_class {
        if group.class >= k_total {
            return Err(Error::IndexOutOfRange {
                index: group.class,
                len: k_total,
            });
        }
        if group.features.len() != group.provenance.len() {
            return Err(Error::LengthMismatch {
                left: group.features.len(),
                right: group.provenance.len(),
            });
        }
        features.extend(&group.features)?;
        for &p in &group.provenance {
            classes.push(group.class);
            provenance.push(p);
            let mut label = vec![0.0; k_total];
            label[group.class] = 1.0;
            soft_labels.extend(label);
        }
    }
    Ok(TrainingSet {
        features,
        classes,
        soft_labels,
        num_classes: k_total,
        provenance,
    })
}

/// Runs [`hybrid_collect`] for every class of `space`, taking candidates
/// from pool banks by label.
pub fn collect_training_set(
    space: &LabelSpace,
    real_pool: &EmbeddingBank,
    synth_pool: &EmbeddingBank,
    kappa: f64,
    n: usize,
) -> Result<TrainingSet> {
    let dim = space.dim();
    for bank in [real_pool, synth_pool] {
        if !bank.is_empty() && bank.dim() != dim {
            return Err(Error::dims(dim, bank.dim()));
        }
    }
    fn group_rows(bank: &EmbeddingBank, dim: usize) -> HashMap<&str, FeatureMatrix> {
        let feats = bank.features();
        let mut by_label: HashMap<&str, FeatureMatrix> = HashMap::new();
        for (label, row) in bank.labels().zip(feats.rows()) {
            by_label
                .entry(label)
                .or_insert_with(|| FeatureMatrix::new(dim))
                .push_row(row)
                .expect("bank rows share the bank dimension");
        }
        by_label
    }
    let real = group_rows(real_pool, dim);
    let synth = group_rows(synth_pool, dim);
    let empty = FeatureMatrix::new(dim);
    let mut per_class = Vec::with_capacity(space.num_classes());
    for k in 0..space.num_classes() {
        let label = space.label(k);
        let r = real.get(label).unwrap_or(&empty);
        let s = synth.get(label).unwrap_or(&empty);
        let (features, provenance) =
            hybrid_collect(r, s, space.anchor(k), kappa, n).map_err(|e| match e {
                Error::InsufficientCandidates {
                    requested,
                    available,
                    ..
                } => Error::InsufficientCandidates {
                    class: label.to_string(),
                    requested,
                    available,
                },
                Error::EmptyInput(_) => Error::InsufficientCandidates {
                    class: label.to_string(),
                    requested: n,
                    available: r.len(),
                },
                other => other,
            })?;
        per_class.push(ClassFeatures {
            class: k,
            features,
            provenance,
        });
    }
    build_training_set(&per_class, space)
}
