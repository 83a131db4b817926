//! Learnable context tokens and the composition head that turns them into
//! class embeddings.
//!
//! The head is additive and order-invariant: for class `k` resolved to
//! token set `s`,
//!
//! ```text
//! u_k   = anchor_k + (1 / max(N, 1)) * sum_n V_n^(s)
//! row_k = u_k / |u_k|
//! ```
//!
//! Its reverse pass sends a row gradient `g` through the normalization
//! Jacobian `(I - row row^T) / |u_k|` and splits it evenly over the `N`
//! tokens of set `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::numeric::{dot, l2_normalize_in_place, FeatureMatrix, RngStream, StreamTag};

/// Standard deviation of randomly initialized token entries.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// One token set shared by every class.
    Unified,
    /// One token set per class.
    ClassSpecific,
    /// One set shared by ID classes, one shared by negative classes.
    DistributionAware,
}

impl Scheme {
    pub fn set_count(self, num_classes: usize) -> usize {
        match self {
            Scheme::Unified => 1,
            Scheme::ClassSpecific => num_classes,
            Scheme::DistributionAware => 2,
        }
    }

    /// Token set used by `class`; classes below `num_id` are ID classes.
    pub fn set_for(self, class: usize, num_id: usize) -> usize {
        match self {
            Scheme::Unified => 0,
            Scheme::ClassSpecific => class,
            Scheme::DistributionAware => usize::from(class >= num_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptInit {
    /// I.i.d. `N(0, INIT_STD^2)` entries.
    Random,
    /// Every token slot starts as a copy of the given embedding.
    FromEmbedding(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Random,
    FromEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    pub scheme: Scheme,
    pub n_tokens: usize,
    pub dim: usize,
    pub seed: u64,
    pub init: InitKind,
    /// One flat `n_tokens x dim` buffer per set.
    pub token_sets: Vec<Vec<f64>>,
}

pub fn init_prompts(
    scheme: Scheme,
    n_tokens: usize,
    dim: usize,
    num_classes: usize,
    init: &PromptInit,
    seed: u64,
) -> Result<PromptParams> {
    if dim == 0 {
        return Err(Error::Config("prompt dimension must be positive".into()));
    }
    if scheme == Scheme::ClassSpecific && num_classes == 0 {
        return Err(Error::Config(
            "class-specific prompts need at least one class".into(),
        ));
    }
    let sets = scheme.set_count(num_classes);
    let token_sets = match init {
        PromptInit::Random => {
            let mut rng = RngStream::new(seed, StreamTag::PromptInit);
            (0..sets)
                .map(|_| rng.gaussian_vec(n_tokens * dim, INIT_STD))
                .collect()
        }
        PromptInit::FromEmbedding(emb) => {
            if emb.len() != dim {
                return Err(Error::dims(dim, emb.len()));
            }
            if emb.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("initial embedding must be finite".into()));
            }
            (0..sets).map(|_| emb.repeat(n_tokens)).collect()
        }
    };
    Ok(PromptParams {
        scheme,
        n_tokens,
        dim,
        seed,
        init: match init {
            PromptInit::Random => InitKind::Random,
            PromptInit::FromEmbedding(_) => InitKind::FromEmbedding,
        },
        token_sets,
    })
}

impl PromptParams {
    /// Checks that the parameters can be composed with `space`.
    pub fn check_compatible(&self, space: &LabelSpace) -> Result<()> {
        if self.dim != space.dim() {
            return Err(Error::dims(space.dim(), self.dim));
        }
        let expected = self.scheme.set_count(space.num_classes());
        if self.token_sets.len() != expected {
            return Err(Error::Config(format!(
                "{:?} prompts need {expected} token sets, found {}",
                self.scheme,
                self.token_sets.len()
            )));
        }
        for set in &self.token_sets {
            if set.len() != self.n_tokens * self.dim {
                return Err(Error::dims(self.n_tokens * self.dim, set.len()));
            }
        }
        Ok(())
    }

    fn token_mean(&self, set: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        if self.n_tokens == 0 {
            return mean;
        }
        for token in self.token_sets[set].chunks_exact(self.dim) {
            for (m, t) in mean.iter_mut().zip(token) {
                *m += t;
            }
        }
        let scale = 1.0 / self.n_tokens as f64;
        mean.iter_mut().for_each(|m| *m *= scale);
        mean
    }

    /// `params -= lr * grads`, set by set.
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.token_sets.len() {
            return Err(Error::LengthMismatch {
                left: self.token_sets.len(),
                right: grads.len(),
            });
        }
        for (set, g) in self.token_sets.iter_mut().zip(grads) {
            if set.len() != g.len() {
                return Err(Error::dims(set.len(), g.len()));
            }
            for (p, d) in set.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
        if self.token_sets.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prompt tokens"));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.token_sets.iter().map(|s| vec![0.0; s.len()]).collect()
    }
}

/// Pre-normalization sums `u_k` for every class.
fn composed(p: &PromptParams, space: &LabelSpace) -> Result<FeatureMatrix> {
    p.check_compatible(space)?;
    let means: Vec<Vec<f64>> = (0..p.token_sets.len()).map(|s| p.token_mean(s)).collect();
    let mut out = FeatureMatrix::with_capacity(p.dim, space.num_classes());
    let mut u = vec![0.0; p.dim];
    for k in 0..space.num_classes() {
        let mean = &means[p.scheme.set_for(k, space.num_id())];
        for ((dst, a), m) in u.iter_mut().zip(space.anchor(k)).zip(mean) {
            *dst = a + m;
        }
        out.push_row(&u)?;
    }
    Ok(out)
}

/// Unit-norm class embeddings, ID classes first.
pub fn class_embeddings(p: &PromptParams, space: &LabelSpace) -> Result<FeatureMatrix> {
    let mut rows = composed(p, space)?;
    for k in 0..rows.len() {
        l2_normalize_in_place(rows.row_mut(k))?;
    }
    Ok(rows)
}

/// Gradient of a scalar loss with respect to every token set, given its
/// gradient with respect to the class embeddings.
pub fn class_embeddings_backward(
    p: &PromptParams,
    space: &LabelSpace,
    grad_rows: &FeatureMatrix,
) -> Result<Vec<Vec<f64>>> {
    if grad_rows.len() != space.num_classes() {
        return Err(Error::LengthMismatch {
            left: space.num_classes(),
            right: grad_rows.len(),
        });
    }
    if grad_rows.dim() != p.dim {
        return Err(Error::dims(p.dim, grad_rows.dim()));
    }
    let mut grads = p.zero_grads();
    if p.n_tokens == 0 {
        return Ok(grads);
    }
    let u = composed(p, space)?;
    let scale = 1.0 / p.n_tokens as f64;
    let mut row = vec![0.0; p.dim];
    // per-set gradient with respect to the token mean
    let mut mean_grads = vec![vec![0.0; p.dim]; p.token_sets.len()];
    for k in 0..u.len() {
        row.copy_from_slice(u.row(k));
        let len = l2_normalize_in_place(&mut row)?;
        let g = grad_rows.row(k);
        let radial = dot(&row, g);
        let acc = &mut mean_grads[p.scheme.set_for(k, space.num_id())];
        for ((a, gi), ri) in acc.iter_mut().zip(g).zip(&row) {
            *a += (gi - ri * radial) / len;
        }
    }
    for (set, mg) in grads.iter_mut().zip(&mean_grads) {
        for token in set.chunks_exact_mut(p.dim) {
            for (t, m) in token.iter_mut().zip(mg) {
                *t = m * scale;
            }
        }
    }
    Ok(grads)
}

/// On-disk form of learned prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub scheme: Scheme,
    #[serde(rename = "N")]
    pub n_tokens: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitKind,
    pub token_sets: Vec<Vec<Vec<f64>>>,
    pub config_hash: String,
}

fn default_init() -> InitKind {
    InitKind::Random
}

impl PromptFile {
    pub fn new(p: &PromptParams, config_hash: impl Into<String>) -> Self {
        let token_sets = p
            .token_sets
            .iter()
            .map(|set| {
                if p.dim == 0 {
                    Vec::new()
                } else {
                    set.chunks_exact(p.dim).map(<[f64]>::to_vec).collect()
                }
            })
            .collect();
        Self {
            scheme: p.scheme,
            n_tokens: p.n_tokens,
            dim: p.dim,
            seed: p.seed,
            init: p.init,
            token_sets,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("prompt file serializes");
        s.push('\n');
        s
    }

    /// Parses and validates the shape of every token set.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PromptFile = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("prompt dimension must be positive".into()));
        }
        let sets = self.token_sets.len();
        let ok = match self.scheme {
            Scheme::Unified => sets == 1,
            Scheme::DistributionAware => sets == 2,
            Scheme::ClassSpecific => sets >= 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} prompts cannot have {sets} token sets",
                self.scheme
            )));
        }
        for set in &self.token_sets {
            if set.len() != self.n_tokens {
                return Err(Error::Config(format!(
                    "token set has {} tokens, N = {}",
                    set.len(),
                    self.n_tokens
                )));
            }
            for token in set {
                if token.len() != self.dim {
                    return Err(Error::dims(self.dim, token.len()));
                }
                if token.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("prompt file tokens"));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> PromptParams {
        PromptParams {
            scheme: self.scheme,
            n_tokens: self.n_tokens,
            dim: self.dim,
            seed: self.seed,
            init: self.init,
            token_sets: self.token_sets.iter().map(|s| s.concat()).collect(),
        }
    }
}
