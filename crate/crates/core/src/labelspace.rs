//! ID and negative label sets with their anchor text embeddings, and the
//! percentile-affinity rule used to mine negative labels from a corpus.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize_in_place, FeatureMatrix};

/// ID labels followed by negative labels. Class index `k < C` is an ID
/// class, `k >= C` a negative class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    id_labels: Vec<String>,
    neg_labels: Vec<String>,
    id_anchors: FeatureMatrix,
    neg_anchors: FeatureMatrix,
}

impl LabelSpace {
    /// Builds a label space, normalizing every anchor. Labels must be unique
    /// across both sets.
    pub fn new(
        id_labels: Vec<String>,
        mut id_anchors: FeatureMatrix,
        neg_labels: Vec<String>,
        mut neg_anchors: FeatureMatrix,
    ) -> Result<Self> {
        if id_labels.is_empty() {
            return Err(Error::EmptyInput("ID label set"));
        }
        if id_labels.len() != id_anchors.len() {
            return Err(Error::LengthMismatch {
                left: id_labels.len(),
                right: id_anchors.len(),
            });
        }
        if neg_labels.len() != neg_anchors.len() {
            return Err(Error::LengthMismatch {
                left: neg_labels.len(),
                right: neg_anchors.len(),
            });
        }
        if !neg_anchors.is_empty() && neg_anchors.dim() != id_anchors.dim() {
            return Err(Error::dims(id_anchors.dim(), neg_anchors.dim()));
        }
        let mut seen = HashSet::new();
        for label in id_labels.iter().chain(&neg_labels) {
            if !seen.insert(label.as_str()) {
                return Err(Error::Config(format!("duplicate label `{label}`")));
            }
        }
        for i in 0..id_anchors.len() {
            l2_normalize_in_place(id_anchors.row_mut(i))?;
        }
        for i in 0..neg_anchors.len() {
            l2_normalize_in_place(neg_anchors.row_mut(i))?;
        }
        let neg_anchors = if neg_anchors.is_empty() {
            FeatureMatrix::new(id_anchors.dim())
        } else {
            neg_anchors
        };
        Ok(Self {
            id_labels,
            neg_labels,
            id_anchors,
            neg_anchors,
        })
    }

    pub fn dim(&self) -> usize {
        self.id_anchors.dim()
    }

    pub fn num_id(&self) -> usize {
        self.id_labels.len()
    }

    pub fn num_neg(&self) -> usize {
        self.neg_labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_id() + self.num_neg()
    }

    pub fn is_id(&self, class: usize) -> bool {
        class < self.num_id()
    }

    pub fn id_labels(&self) -> &[String] {
        &self.id_labels
    }

    pub fn neg_labels(&self) -> &[String] {
        &self.neg_labels
    }

    pub fn id_anchors(&self) -> &FeatureMatrix {
        &self.id_anchors
    }

    pub fn neg_anchors(&self) -> &FeatureMatrix {
        &self.neg_anchors
    }

    pub fn label(&self, class: usize) -> &str {
        if class < self.num_id() {
            &self.id_labels[class]
        } else {
            &self.neg_labels[class - self.num_id()]
        }
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        if class < self.num_id() {
            self.id_anchors.row(class)
        } else {
            self.neg_anchors.row(class - self.num_id())
        }
    }

    /// All anchors, ID rows first.
    pub fn anchors(&self) -> FeatureMatrix {
        let mut all = self.id_anchors.clone();
        all.extend(&self.neg_anchors)
            .expect("label space anchors share one dimension");
        all
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.id_labels
            .iter()
            .chain(&self.neg_labels)
            .position(|l| l == label)
    }
}

/// Candidate words for negative mining, with unit-norm text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBank {
    words: Vec<String>,
    embs: FeatureMatrix,
}

impl CorpusBank {
    pub fn new(words: Vec<String>, mut embs: FeatureMatrix) -> Result<Self> {
        if words.len() != embs.len() {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: embs.len(),
            });
        }
        let mut seen = HashSet::new();
        for w in &words {
            if !seen.insert(w.as_str()) {
                return Err(Error::Config(format!("duplicate corpus word `{w}`")));
            }
        }
        for i in 0..embs.len() {
            l2_normalize_in_place(embs.row_mut(i))?;
        }
        Ok(Self { words, embs })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn embeddings(&self) -> &FeatureMatrix {
        &self.embs
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Negative labels chosen by [`mine_negatives`], in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    pub labels: Vec<String>,
    pub anchors: FeatureMatrix,
    /// Affinity of each selected word to the ID set.
    pub affinities: Vec<f64>,
}

/// Nearest-rank percentile of `values` (`p = 1` is the maximum).
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = (p * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Picks the `m` corpus words least similar to the ID set.
///
/// The affinity of a word is the `p`-th percentile of its cosine similarity
/// to the ID anchors. Words that equal an ID label verbatim are never
/// eligible. Ties are broken by lexicographic word order.
pub fn mine_negatives(
    id_labels: &[String],
    id_anchors: &FeatureMatrix,
    corpus: &CorpusBank,
    m: usize,
    p: f64,
) -> Result<MinedNegatives> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Range(format!(
            "percentile must be in (0, 1], got {p}"
        )));
    }
    if id_anchors.is_empty() {
        return Err(Error::EmptyInput("ID anchors"));
    }
    if !corpus.is_empty() && corpus.embs.dim() != id_anchors.dim() {
        return Err(Error::dims(id_anchors.dim(), corpus.embs.dim()));
    }
    let required = m + id_anchors.len();
    if m > 0 && corpus.len() < required {
        return Err(Error::InsufficientCorpus {
            requested: required,
            available: corpus.len(),
        });
    }

    let id_set: HashSet<&str> = id_labels.iter().map(String::as_str).collect();
    let mut scratch = Vec::with_capacity(id_anchors.len());
    let mut scored: Vec<(f64, usize)> = corpus
        .words
        .iter()
        .enumerate()
        .filter(|(_, w)| !id_set.contains(w.as_str()))
        .map(|(i, _)| {
            let emb = corpus.embs.row(i);
            scratch.clear();
            scratch.extend(id_anchors.rows().map(|a| dot(emb, a)));
            (percentile(&mut scratch, p), i)
        })
        .collect();
    if scored.len() < m {
        return Err(Error::InsufficientCorpus {
            requested: m,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => corpus.words[a.1].cmp(&corpus.words[b.1]),
        other => other,
    });
    scored.truncate(m);

    let mut anchors = FeatureMatrix::with_capacity(id_anchors.dim(), m);
    let mut labels = Vec::with_capacity(m);
    let mut affinities = Vec::with_capacity(m);
    for (aff, i) in scored {
        anchors.push_row(corpus.embs.row(i))?;
        labels.push(corpus.words[i].clone());
        affinities.push(aff);
    }
    Ok(MinedNegatives {
        labels,
        anchors,
        affinities,
    })
}
