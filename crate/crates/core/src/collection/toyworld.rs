//! Deterministic toy world standing in for the frozen encoders, the
//! text-to-image generator and text-based retrieval.
//!
//! Concepts are unit prototypes. The text embedding of a concept is its
//! prototype. An image of a concept is
//! `normalize(prototype + gap(domain) + N(0, sigma^2 I))`, where `gap` is
//! the image/text offset of the concept's domain. ID classes and near-OOD
//! concepts share the ID domain; corpus words and far-OOD concepts share the
//! open domain. Both offsets have length `modality_gap` and are built as
//! `normalize(shared + domain_shift * own)`, so `domain_shift = 0` gives one
//! global offset and `modality_gap = 0` gives images centred on their text
//! embeddings.
//!
//! Candidate pools exist for every ID class and corpus word:
//! - synthetic: spread `sigma_syn`, always on-label;
//! - retrieval: spread `sigma_ret`, with `round(eta * n)` rows per class
//!   replaced by an image of a uniformly drawn other concept (label noise).

use serde::{Deserialize, Serialize};

use crate::collection::bank::{EmbeddingBank, Group, Provenance, RowMeta};
use crate::error::{Error, Result};
use crate::labelspace::CorpusBank;
use crate::numeric::{dot, l2_normalize_in_place, FeatureMatrix, RngStream, StreamTag};

/// Pairwise prototype cosines must stay below this.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.95;
const MAX_RESAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    pub dim: usize,
    pub id_classes: usize,
    pub corpus_size: usize,
    pub sigma_id: f64,
    pub sigma_syn: f64,
    pub sigma_ret: f64,
    pub eta: f64,
    pub samples_per_class: usize,
    pub modality_gap: f64,
    pub domain_shift: f64,
    pub test_per_class: usize,
    pub ood_classes: usize,
    pub ood_per_class: usize,
    pub near_ood_spread: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            id_classes: 5,
            corpus_size: 60,
            sigma_id: 0.25,
            sigma_syn: 0.1,
            sigma_ret: 0.4,
            eta: 0.2,
            samples_per_class: 16,
            modality_gap: 1.0,
            domain_shift: 1.0,
            test_per_class: 40,
            ood_classes: 20,
            ood_per_class: 10,
            near_ood_spread: 0.6,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.id_classes == 0 {
            return bad("id_classes must be positive");
        }
        for (name, v) in [
            ("sigma_id", self.sigma_id),
            ("sigma_syn", self.sigma_syn),
            ("sigma_ret", self.sigma_ret),
            ("modality_gap", self.modality_gap),
            ("domain_shift", self.domain_shift),
            ("near_ood_spread", self.near_ood_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        Ok(())
    }
}

/// Everything the toy world produces.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub id_labels: Vec<String>,
    /// Text embeddings of the ID labels (their prototypes).
    pub id_anchors: FeatureMatrix,
    pub corpus: CorpusBank,
    /// Retrieval candidates for every ID class and corpus word.
    pub real_pool: EmbeddingBank,
    /// Synthetic candidates for every ID class and corpus word.
    pub synthetic_pool: EmbeddingBank,
    pub test_id: EmbeddingBank,
    /// Named OOD test splits: `near` then `far`.
    pub test_ood: Vec<(String, EmbeddingBank)>,
}

impl ToyWorld {
    /// ID anchors as a bank with group `id`.
    pub fn id_anchor_bank(&self) -> Result<EmbeddingBank> {
        let meta = self
            .id_labels
            .iter()
            .map(|l| RowMeta::new(l.clone(), Group::Id, Provenance::External))
            .collect();
        EmbeddingBank::from_features(&self.id_anchors, meta)
    }

    /// Corpus words as a bank with group `corpus`.
    pub fn corpus_bank(&self) -> Result<EmbeddingBank> {
        corpus_to_bank(&self.corpus)
    }
}

pub fn corpus_to_bank(corpus: &CorpusBank) -> Result<EmbeddingBank> {
    let meta = corpus
        .words()
        .iter()
        .map(|w| RowMeta::new(w.clone(), Group::Corpus, Provenance::External))
        .collect();
    EmbeddingBank::from_features(corpus.embeddings(), meta)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Domain {
    Id,
    Open,
}

struct Concept {
    label: String,
    prototype: Vec<f64>,
    domain: Domain,
}

struct Sampler {
    rng: RngStream,
    dim: usize,
    gap_id: Vec<f64>,
    gap_open: Vec<f64>,
}

impl Sampler {
    fn image(&mut self, concept: &Concept, sigma: f64) -> Vec<f64> {
        let gap = match concept.domain {
            Domain::Id => &self.gap_id,
            Domain::Open => &self.gap_open,
        };
        loop {
            let mut v: Vec<f64> = concept
                .prototype
                .iter()
                .zip(gap)
                .map(|(p, g)| p + g + sigma * self.rng.gaussian())
                .collect();
            if l2_normalize_in_place(&mut v).is_ok() {
                return v;
            }
        }
    }

    /// Unit vector whose cosine with every row of `existing` stays below the
    /// prototype bound; `propose` draws candidates.
    fn separated(
        &mut self,
        existing: &[&[f64]],
        mut propose: impl FnMut(&mut Self) -> Vec<f64>,
    ) -> Result<Vec<f64>> {
        for _ in 0..MAX_RESAMPLES {
            let v = propose(self);
            if existing.iter().all(|e| dot(e, &v) < MAX_PROTOTYPE_COSINE) {
                return Ok(v);
            }
        }
        Err(Error::Config(format!(
            "could not place {} separated prototypes in dimension {}",
            existing.len() + 1,
            self.dim
        )))
    }
}

pub fn generate_toy_world(cfg: &ToyWorldConfig) -> Result<ToyWorld> {
    cfg.validate()?;
    let dim = cfg.dim;
    let rng = RngStream::new(cfg.seed, StreamTag::ToyWorld);
    let mut s = Sampler {
        rng,
        dim,
        gap_id: vec![0.0; dim],
        gap_open: vec![0.0; dim],
    };

    let mut concepts: Vec<Concept> = Vec::with_capacity(cfg.id_classes + cfg.corpus_size);
    for k in 0..cfg.id_classes + cfg.corpus_size {
        let existing: Vec<&[f64]> = concepts.iter().map(|c| c.prototype.as_slice()).collect();
        let prototype = s.separated(&existing, |s| s.rng.unit_vector(dim))?;
        let (label, domain) = if k < cfg.id_classes {
            (format!("class-{k:02}"), Domain::Id)
        } else {
            (format!("word-{:03}", k - cfg.id_classes), Domain::Open)
        };
        concepts.push(Concept {
            label,
            prototype,
            domain,
        });
    }

    let shared = s.rng.unit_vector(dim);
    let own_id = s.rng.unit_vector(dim);
    let own_open = s.rng.unit_vector(dim);
    s.gap_id = domain_gap(&shared, &own_id, cfg.domain_shift, cfg.modality_gap);
    s.gap_open = domain_gap(&shared, &own_open, cfg.domain_shift, cfg.modality_gap);

    let n = cfg.samples_per_class;
    let noisy = (cfg.eta * n as f64).round() as usize;
    let mut synth = FeatureMatrix::with_capacity(dim, concepts.len() * n);
    let mut real = FeatureMatrix::with_capacity(dim, concepts.len() * n);
    let mut synth_meta = Vec::with_capacity(concepts.len() * n);
    let mut real_meta = Vec::with_capacity(concepts.len() * n);
    for (k, concept) in concepts.iter().enumerate() {
        let group = match concept.domain {
            Domain::Id => Group::Id,
            Domain::Open => Group::Corpus,
        };
        for _ in 0..n {
            synth.push_row(&s.image(concept, cfg.sigma_syn))?;
            synth_meta.push(RowMeta::new(
                concept.label.clone(),
                group,
                Provenance::Synthetic,
            ));
        }
        let mut slots: Vec<usize> = (0..n).collect();
        s.rng.shuffle(&mut slots);
        let mut off_label = vec![false; n];
        for &slot in &slots[..noisy] {
            off_label[slot] = true;
        }
        for &wrong in &off_label {
            let source = if wrong && concepts.len() > 1 {
                &concepts[s.rng.index_except(concepts.len(), k)]
            } else {
                concept
            };
            real.push_row(&s.image(source, cfg.sigma_ret))?;
            real_meta.push(RowMeta::new(concept.label.clone(), group, Provenance::Real));
        }
    }

    let mut test_id = FeatureMatrix::with_capacity(dim, cfg.id_classes * cfg.test_per_class);
    let mut test_id_meta = Vec::new();
    for concept in &concepts[..cfg.id_classes] {
        for _ in 0..cfg.test_per_class {
            test_id.push_row(&s.image(concept, cfg.sigma_id))?;
            test_id_meta.push(RowMeta::new(
                concept.label.clone(),
                Group::TestId,
                Provenance::Real,
            ));
        }
    }

    let mut placed: Vec<Vec<f64>> = concepts.iter().map(|c| c.prototype.clone()).collect();
    let mut near = Vec::with_capacity(cfg.ood_classes);
    for j in 0..cfg.ood_classes {
        let existing: Vec<&[f64]> = placed.iter().map(Vec::as_slice).collect();
        let prototype = s.separated(&existing, |s| {
            let base = &concepts[s.rng.index(cfg.id_classes)].prototype;
            let mut v: Vec<f64> = base
                .iter()
                .map(|b| b + cfg.near_ood_spread * s.rng.gaussian())
                .collect();
            match l2_normalize_in_place(&mut v) {
                Ok(_) => v,
                Err(_) => s.rng.unit_vector(dim),
            }
        })?;
        placed.push(prototype.clone());
        near.push(Concept {
            label: format!("near-ood-{j:02}"),
            prototype,
            domain: Domain::Id,
        });
    }
    let mut far = Vec::with_capacity(cfg.ood_classes);
    for j in 0..cfg.ood_classes {
        let existing: Vec<&[f64]> = placed.iter().map(Vec::as_slice).collect();
        let prototype = s.separated(&existing, |s| s.rng.unit_vector(dim))?;
        placed.push(prototype.clone());
        far.push(Concept {
            label: format!("far-ood-{j:02}"),
            prototype,
            domain: Domain::Open,
        });
    }
    let mut test_ood = Vec::with_capacity(2);
    for (name, split) in [("near", &near), ("far", &far)] {
        let mut feats = FeatureMatrix::with_capacity(dim, split.len() * cfg.ood_per_class);
        let mut meta = Vec::new();
        for concept in split {
            for _ in 0..cfg.ood_per_class {
                feats.push_row(&s.image(concept, cfg.sigma_id))?;
                meta.push(RowMeta::new(
                    concept.label.clone(),
                    Group::TestOod,
                    Provenance::Real,
                ));
            }
        }
        test_ood.push((
            name.to_string(),
            EmbeddingBank::from_features(&feats, meta)?,
        ));
    }

    let id_labels: Vec<String> = concepts[..cfg.id_classes]
        .iter()
        .map(|c| c.label.clone())
        .collect();
    let id_anchors = FeatureMatrix::from_rows(
        dim,
        &concepts[..cfg.id_classes]
            .iter()
            .map(|c| c.prototype.clone())
            .collect::<Vec<_>>(),
    )?;
    let corpus = CorpusBank::new(
        concepts[cfg.id_classes..]
            .iter()
            .map(|c| c.label.clone())
            .collect(),
        FeatureMatrix::from_rows(
            dim,
            &concepts[cfg.id_classes..]
                .iter()
                .map(|c| c.prototype.clone())
                .collect::<Vec<_>>(),
        )?,
    )?;

    Ok(ToyWorld {
        id_labels,
        id_anchors,
        corpus,
        real_pool: EmbeddingBank::from_features(&real, real_meta)?,
        synthetic_pool: EmbeddingBank::from_features(&synth, synth_meta)?,
        test_id: EmbeddingBank::from_features(&test_id, test_id_meta)?,
        test_ood,
    })
}

fn domain_gap(shared: &[f64], own: &[f64], shift: f64, length: f64) -> Vec<f64> {
    let mut v: Vec<f64> = shared.iter().zip(own).map(|(a, b)| a + shift * b).collect();
    if l2_normalize_in_place(&mut v).is_err() {
        v = shared.to_vec();
    }
    v.iter_mut().for_each(|x| *x *= length);
    v
}
