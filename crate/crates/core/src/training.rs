//! Soft-label cross-entropy, the two feature-mixing augmentations, and the
//! SGD loop that fits prompt tokens.

use serde::{Deserialize, Serialize};

use crate::collection::TrainingSet;
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::numeric::{
    check_temperature, dot, l2_normalize_in_place, sample_beta, FeatureMatrix, RngStream, StreamTag,
};
use crate::prompts::{class_embeddings, class_embeddings_backward, PromptParams};

/// Attempts at redrawing a mixing coefficient after an exact cancellation.
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_train: f64,
    /// Beta parameter for cross-modal mixing.
    pub alpha: f64,
    /// Beta parameter for cross-distribution mixing.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            epochs: 10,
            batch_size: 32,
            tau_train: 0.1,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, name: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {x}"
                )))
            }
        };
        positive(self.lr0, "lr0")?;
        positive(self.tau_train, "tau_train")?;
        positive(self.alpha, "alpha")?;
        positive(self.beta, "beta")?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L")]
    pub l_plain: f64,
    #[serde(rename = "L_cm")]
    pub l_cm: f64,
    #[serde(rename = "L_cd")]
    pub l_cd: f64,
    #[serde(rename = "L_all")]
    pub l_all: f64,
}

impl LossBreakdown {
    pub fn new(l_plain: f64, l_cm: f64, l_cd: f64) -> Self {
        Self {
            l_plain,
            l_cm,
            l_cd,
            l_all: l_plain + l_cm + l_cd,
        }
    }
}

/// Features with flat row-major soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: FeatureMatrix,
    pub labels: Vec<f64>,
    /// Class whose anchor each row mixes with; the argmax of its label.
    pub classes: Vec<usize>,
    pub num_classes: usize,
}

impl Batch {
    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: FeatureMatrix::new(dim),
            labels: Vec::new(),
            classes: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn label(&self, i: usize) -> &[f64] {
        &self.labels[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Rows `indices` of a training set.
    pub fn from_training_set(ts: &TrainingSet, indices: &[usize]) -> Self {
        let mut labels = Vec::with_capacity(indices.len() * ts.num_classes());
        for &i in indices {
            labels.extend_from_slice(ts.soft_label(i));
        }
        Self {
            features: ts.features.select(indices),
            labels,
            classes: indices.iter().map(|&i| ts.classes[i]).collect(),
            num_classes: ts.num_classes(),
        }
    }

    fn push(&mut self, v: &[f64], label: &[f64], class: usize) -> Result<()> {
        self.features.push_row(v)?;
        self.labels.extend_from_slice(label);
        self.classes.push(class);
        Ok(())
    }
}

/// Mean soft-label cross-entropy of `softmax(rows . v / tau)` over the
/// batch, and its gradient with respect to each class row.
pub fn ce_loss(
    features: &FeatureMatrix,
    soft_labels: &[f64],
    class_rows: &FeatureMatrix,
    tau: f64,
) -> Result<(f64, FeatureMatrix)> {
    check_temperature(tau)?;
    let k = class_rows.len();
    if features.dim() != class_rows.dim() {
        return Err(Error::dims(class_rows.dim(), features.dim()));
    }
    if soft_labels.len() != features.len() * k {
        return Err(Error::LengthMismatch {
            left: features.len() * k,
            right: soft_labels.len(),
        });
    }
    let mut grad = FeatureMatrix::zeros(class_rows.dim(), k);
    if features.is_empty() {
        return Ok((0.0, grad));
    }
    let b = features.len() as f64;
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for (n, v) in features.rows().enumerate() {
        let l = &soft_labels[n * k..(n + 1) * k];
        for (zi, row) in z.iter_mut().zip(class_rows.rows()) {
            *zi = dot(v, row) / tau;
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|zi| (zi - max).exp()).sum::<f64>().ln();
        let mass: f64 = l.iter().sum();
        for i in 0..k {
            let log_p = z[i] - log_sum;
            loss -= l[i] * log_p;
            // d/dz_i of -sum_j l_j log p_j
            let dz = log_p.exp() * mass - l[i];
            let coef = dz / (tau * b);
            grad.row_mut(i)
                .iter_mut()
                .zip(v)
                .for_each(|(g, x)| *g += coef * x);
        }
    }
    Ok((loss / b, grad))
}

/// `normalize(lambda * v + (1 - lambda) * anchor)`.
pub fn mix_cross_modal_with(v: &[f64], anchor: &[f64], lambda: f64) -> Result<Vec<f64>> {
    blend(v, anchor, lambda)
}

fn blend(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    if lambda == 1.0 {
        return Ok(a.to_vec());
    }
    if lambda == 0.0 {
        return Ok(b.to_vec());
    }
    let mut out: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

/// Draws `lambda ~ Beta(param, param)` and blends, redrawing on an exact
/// cancellation.
fn blend_random(a: &[f64], b: &[f64], param: f64, rng: &mut RngStream) -> Result<(Vec<f64>, f64)> {
    let mut last = Error::ZeroVector { norm: 0.0 };
    for _ in 0..MAX_REDRAWS {
        let lambda = sample_beta(param, rng)?;
        match blend(a, b, lambda) {
            Ok(v) => return Ok((v, lambda)),
            Err(e @ Error::ZeroVector { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Blends every row with its class anchor; labels are unchanged.
pub fn mix_cross_modal(
    batch: &Batch,
    space: &LabelSpace,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Batch> {
    let mut out = Batch::empty(batch.features.dim(), batch.num_classes);
    for i in 0..batch.len() {
        let class = batch.classes[i];
        if class >= space.num_classes() {
            return Err(Error::IndexOutOfRange {
                index: class,
                len: space.num_classes(),
            });
        }
        let (v, _) = blend_random(batch.features.row(i), space.anchor(class), alpha, rng)?;
        out.push(&v, batch.label(i), class)?;
    }
    Ok(out)
}

/// Explicit-lambda form of one cross-distribution pair.
pub fn mix_cross_distribution_with(
    v_id: &[f64],
    l_id: &[f64],
    v_neg: &[f64],
    l_neg: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if l_id.len() != l_neg.len() {
        return Err(Error::LengthMismatch {
            left: l_id.len(),
            right: l_neg.len(),
        });
    }
    let v = blend(v_id, v_neg, lambda)?;
    let l = l_id
        .iter()
        .zip(l_neg)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((v, l))
}

/// Pairs every ID row with a uniformly drawn negative row of the same
/// batch and blends features and labels with one shared coefficient.
/// Returns an empty batch when either side is missing.
pub fn mix_cross_distribution(
    batch: &Batch,
    num_id: usize,
    beta: f64,
    rng: &mut RngStream,
) -> Result<Batch> {
    let mut out = Batch::empty(batch.features.dim(), batch.num_classes);
    let (ids, negs): (Vec<usize>, Vec<usize>) =
        (0..batch.len()).partition(|&i| batch.classes[i] < num_id);
    if ids.is_empty() || negs.is_empty() {
        return Ok(out);
    }
    for &i in &ids {
        let j = negs[rng.index(negs.len())];
        let (v, lambda) = blend_random(batch.features.row(i), batch.features.row(j), beta, rng)?;
        let label: Vec<f64> = batch
            .label(i)
            .iter()
            .zip(batch.label(j))
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        out.push(&v, &label, batch.classes[i])?;
    }
    Ok(out)
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!(
            "step {step} outside [0, {total_steps}]"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Selects which loss terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub plain: bool,
    pub cross_modal: bool,
    pub cross_distribution: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        plain: true,
        cross_modal: true,
        cross_distribution: true,
    };
    pub const PLAIN: Terms = Terms {
        plain: true,
        cross_modal: false,
        cross_distribution: false,
    };
    pub const CROSS_MODAL: Terms = Terms {
        plain: false,
        cross_modal: true,
        cross_distribution: false,
    };
    pub const CROSS_DISTRIBUTION: Terms = Terms {
        plain: false,
        cross_modal: false,
        cross_distribution: true,
    };
}

/// The three batches one SGD step sees.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatches {
    pub plain: Batch,
    pub cross_modal: Batch,
    pub cross_distribution: Batch,
}

impl StepBatches {
    /// Builds both mixed batches from `plain`, drawing from `rng`
    /// (cross-modal first, then cross-distribution).
    pub fn draw(
        plain: Batch,
        space: &LabelSpace,
        cfg: &TrainConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let cross_modal = mix_cross_modal(&plain, space, cfg.alpha, rng)?;
        let cross_distribution = mix_cross_distribution(&plain, space.num_id(), cfg.beta, rng)?;
        Ok(Self {
            plain,
            cross_modal,
            cross_distribution,
        })
    }
}

/// Objective and its gradient with respect to every token set. Terms
/// left out of `terms` report a zero loss.
pub fn objective(
    p: &PromptParams,
    space: &LabelSpace,
    batches: &StepBatches,
    tau: f64,
    terms: Terms,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let rows = class_embeddings(p, space)?;
    let mut grad_rows = FeatureMatrix::zeros(rows.dim(), rows.len());
    let mut term = |on: bool, b: &Batch| -> Result<f64> {
        if !on {
            return Ok(0.0);
        }
        let (loss, g) = ce_loss(&b.features, &b.labels, &rows, tau)?;
        grad_rows
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(a, x)| *a += x);
        Ok(loss)
    };
    let l_plain = term(terms.plain, &batches.plain)?;
    let l_cm = term(terms.cross_modal, &batches.cross_modal)?;
    let l_cd = term(terms.cross_distribution, &batches.cross_distribution)?;
    let grads = class_embeddings_backward(p, space, &grad_rows)?;
    Ok((LossBreakdown::new(l_plain, l_cm, l_cd), grads))
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PromptParams,
    pub records: Vec<BatchRecord>,
    /// Mean losses per epoch.
    pub epoch_means: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn check_training_inputs(p: &PromptParams, ts: &TrainingSet, space: &LabelSpace) -> Result<()> {
    p.check_compatible(space)?;
    if ts.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if ts.features.dim() != space.dim() {
        return Err(Error::dims(space.dim(), ts.features.dim()));
    }
    if ts.num_classes() != space.num_classes() {
        return Err(Error::LengthMismatch {
            left: space.num_classes(),
            right: ts.num_classes(),
        });
    }
    Ok(())
}

/// Runs plain SGD with cosine annealing over shuffled mini-batches.
pub fn train_prompts(
    p: &PromptParams,
    ts: &TrainingSet,
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_training_inputs(p, ts, space)?;
    let mut params = p.clone();
    let n = ts.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order_rng = RngStream::new(cfg.seed, StreamTag::BatchOrder);
    let mut mix_rng = RngStream::new(cfg.seed, StreamTag::Mixing);
    let mut records = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batches =
                StepBatches::draw(Batch::from_training_set(ts, idx), space, cfg, &mut mix_rng)?;
            let (loss, grads) = objective(&params, space, &batches, cfg.tau_train, Terms::ALL)?;
            if !loss.l_all.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let lr = cosine_lr(step, total, cfg.lr0)?;
            params.sgd_step(&grads, lr)?;
            records.push(BatchRecord {
                epoch,
                batch: bi,
                loss,
                lr,
            });
            sum = LossBreakdown::new(
                sum.l_plain + loss.l_plain,
                sum.l_cm + loss.l_cm,
                sum.l_cd + loss.l_cd,
            );
            step += 1;
        }
        let k = per_epoch as f64;
        epoch_means.push(LossBreakdown::new(
            sum.l_plain / k,
            sum.l_cm / k,
            sum.l_cd / k,
        ));
    }
    Ok(TrainOutcome {
        params,
        records,
        epoch_means,
    })
}

/// Largest elementwise relative gap between the analytic gradient and
/// central differences with step `h`, using `max(|a|, |n|, floor)` as the
/// denominator.
pub fn gradient_check(
    p: &PromptParams,
    space: &LabelSpace,
    batches: &StepBatches,
    tau: f64,
    terms: Terms,
    h: f64,
) -> Result<f64> {
    const FLOOR: f64 = 1e-8;
    let (_, analytic) = objective(p, space, batches, tau, terms)?;
    let mut q = p.clone();
    let mut worst = 0.0f64;
    for s in 0..q.token_sets.len() {
        for i in 0..q.token_sets[s].len() {
            let orig = q.token_sets[s][i];
            q.token_sets[s][i] = orig + h;
            let plus = objective(&q, space, batches, tau, terms)?.0.l_all;
            q.token_sets[s][i] = orig - h;
            let minus = objective(&q, space, batches, tau, terms)?.0.l_all;
            q.token_sets[s][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[s][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
