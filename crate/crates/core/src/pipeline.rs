//! Stage orchestration over an output directory.
//!
//! Each stage reads the artifacts of earlier stages, writes its own, and
//! leaves a `<stage>.stamp.json` recording the config hash and the content
//! hash of every file it wrote. The same stage logic is available in memory
//! through [`simulate`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collection::bank::{manifest_path, write_atomic};
use crate::collection::{
    collect_training_set, generate_toy_world, EmbeddingBank, Group, Provenance, RowMeta,
    ToyWorldConfig, TrainingSet,
};
use crate::error::{Error, Result};
use crate::labelspace::{mine_negatives, CorpusBank, LabelSpace, MinedNegatives};
use crate::metrics::{evaluate, EvalReport, IdSplit, ReportEcho};
use crate::numeric::{l2_normalize, FeatureMatrix, RngStream, StreamTag};
use crate::prompts::{
    class_embeddings, init_prompts, PromptFile, PromptInit, PromptParams, Scheme,
};
use crate::scoring::thread_budget;
use crate::training::{
    gradient_check, train_prompts, Batch, StepBatches, Terms, TrainConfig, TrainOutcome,
};

pub const ID_ANCHORS: &str = "id_anchors.bank";
pub const CORPUS: &str = "corpus.bank";
pub const POOL_REAL: &str = "pool_real.bank";
pub const POOL_SYNTH: &str = "pool_synth.bank";
pub const TEST_ID: &str = "test_id.bank";
pub const LABEL_SPACE: &str = "labelspace.bank";
pub const TRAINING: &str = "training.bank";
pub const PROMPTS: &str = "prompts.json";
pub const LOSS_TRACE: &str = "loss_trace.jsonl";
pub const REPORT: &str = "report.json";
pub const REPORT_BASELINE: &str = "report_baseline.json";

/// Relative tolerance of the `--gradcheck` mode.
pub const GRADCHECK_LIMIT: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;

pub fn test_ood_file(split: &str) -> String {
    format!("test_ood_{split}.bank")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Random,
    /// Every token starts at the normalized centroid of the ID anchors.
    FromAnchors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

/// Externally produced banks that replace the toy world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalInputs {
    pub id_anchors: PathBuf,
    pub corpus: PathBuf,
    pub pool_real: PathBuf,
    pub pool_synth: PathBuf,
    pub test_id: PathBuf,
    pub test_ood: Vec<NamedPath>,
}

/// Every tunable of a run, as one flat JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

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

    pub neg_labels: usize,
    pub percentile: f64,

    pub kappa: f64,
    pub n_per_class: usize,

    pub scheme: Scheme,
    pub n_tokens: usize,
    pub init: InitMode,

    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_train: f64,
    pub alpha: f64,
    pub beta: f64,

    pub tau_score: f64,
    pub gamma: f64,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<ExternalInputs>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyWorldConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            dim: toy.dim,
            id_classes: toy.id_classes,
            corpus_size: toy.corpus_size,
            sigma_id: toy.sigma_id,
            sigma_syn: toy.sigma_syn,
            sigma_ret: toy.sigma_ret,
            eta: toy.eta,
            samples_per_class: toy.samples_per_class,
            modality_gap: toy.modality_gap,
            domain_shift: toy.domain_shift,
            test_per_class: toy.test_per_class,
            ood_classes: toy.ood_classes,
            ood_per_class: toy.ood_per_class,
            near_ood_spread: toy.near_ood_spread,
            neg_labels: 15,
            percentile: 1.0,
            kappa: 0.3,
            n_per_class: 16,
            scheme: Scheme::DistributionAware,
            n_tokens: 2,
            init: InitMode::Random,
            lr0: train.lr0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            tau_train: train.tau_train,
            alpha: train.alpha,
            beta: train.beta,
            tau_score: 0.01,
            gamma: 0.5,
            inputs: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `--key value` style overrides to a config document. Values
    /// that parse as JSON are taken as such, anything else as a string.
    /// Hyphens in keys are read as underscores.
    pub fn from_value_with_overrides(
        mut doc: serde_json::Value,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            obj.insert(key.replace('-', "_"), value);
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn toy(&self) -> ToyWorldConfig {
        ToyWorldConfig {
            dim: self.dim,
            id_classes: self.id_classes,
            corpus_size: self.corpus_size,
            sigma_id: self.sigma_id,
            sigma_syn: self.sigma_syn,
            sigma_ret: self.sigma_ret,
            eta: self.eta,
            samples_per_class: self.samples_per_class,
            modality_gap: self.modality_gap,
            domain_shift: self.domain_shift,
            test_per_class: self.test_per_class,
            ood_classes: self.ood_classes,
            ood_per_class: self.ood_per_class,
            near_ood_spread: self.near_ood_spread,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            tau_train: self.tau_train,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_none() {
            self.toy().validate()?;
        }
        self.train().validate()?;
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::Config(format!(
                "percentile must be in (0, 1], got {}",
                self.percentile
            )));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!(
                "kappa must be in (0, 1), got {}",
                self.kappa
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.neg_labels == 0 {
            return Err(Error::Config("neg_labels must be positive".into()));
        }
        if !(self.tau_score > 0.0 && self.tau_score.is_finite()) {
            return Err(Error::Config(format!(
                "tau_score must be positive, got {}",
                self.tau_score
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if let Some(inputs) = &self.inputs {
            if inputs.test_ood.is_empty() {
                return Err(Error::Config(
                    "inputs.test_ood needs at least one split".into(),
                ));
            }
            for s in &inputs.test_ood {
                if s.name.is_empty()
                    || !s
                        .name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                {
                    return Err(Error::Config(format!("invalid split name {:?}", s.name)));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form; field order is fixed by the type.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn mining_rule(&self) -> String {
        format!(
            "affinity = nearest-rank percentile {} of cosine to the ID anchors; keep the {} lowest; exact ID names excluded; ties by word",
            self.percentile, self.neg_labels
        )
    }
}

/// All banks a run starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldBanks {
    pub id_anchors: EmbeddingBank,
    pub corpus: EmbeddingBank,
    pub pool_real: EmbeddingBank,
    pub pool_synth: EmbeddingBank,
    pub test_id: EmbeddingBank,
    pub test_ood: Vec<(String, EmbeddingBank)>,
}

fn load_input(path: &Path) -> Result<EmbeddingBank> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    if !manifest_path(path).exists() {
        return Err(Error::MissingArtifact(manifest_path(path)));
    }
    EmbeddingBank::load(path)
}

pub fn build_world(cfg: &RunConfig) -> Result<WorldBanks> {
    match &cfg.inputs {
        None => {
            let w = generate_toy_world(&cfg.toy())?;
            Ok(WorldBanks {
                id_anchors: w.id_anchor_bank()?,
                corpus: w.corpus_bank()?,
                pool_real: w.real_pool,
                pool_synth: w.synthetic_pool,
                test_id: w.test_id,
                test_ood: w.test_ood,
            })
        }
        Some(inp) => {
            let world = WorldBanks {
                id_anchors: load_input(&inp.id_anchors)?,
                corpus: load_input(&inp.corpus)?,
                pool_real: load_input(&inp.pool_real)?,
                pool_synth: load_input(&inp.pool_synth)?,
                test_id: load_input(&inp.test_id)?,
                test_ood: inp
                    .test_ood
                    .iter()
                    .map(|s| Ok((s.name.clone(), load_input(&s.path)?)))
                    .collect::<Result<_>>()?,
            };
            let dim = world.id_anchors.dim();
            for b in [
                &world.corpus,
                &world.pool_real,
                &world.pool_synth,
                &world.test_id,
            ]
            .into_iter()
            .chain(world.test_ood.iter().map(|(_, b)| b))
            {
                if !b.is_empty() && b.dim() != dim {
                    return Err(Error::dims(dim, b.dim()));
                }
            }
            Ok(world)
        }
    }
}

/// Mines negatives from the corpus and assembles the label space.
pub fn mine_label_space(
    cfg: &RunConfig,
    id_anchors: &EmbeddingBank,
    corpus: &EmbeddingBank,
) -> Result<(LabelSpace, MinedNegatives)> {
    let id_labels: Vec<String> = id_anchors.labels().map(str::to_string).collect();
    let id_feats = id_anchors.features();
    let corpus = CorpusBank::new(
        corpus.labels().map(str::to_string).collect(),
        corpus.features(),
    )?;
    let mined = mine_negatives(
        &id_labels,
        &id_feats,
        &corpus,
        cfg.neg_labels,
        cfg.percentile,
    )?;
    let space = LabelSpace::new(
        id_labels,
        id_feats,
        mined.labels.clone(),
        mined.anchors.clone(),
    )?;
    Ok((space, mined))
}

/// ID rows (group `id`) followed by negative rows (group `neg`).
pub fn label_space_to_bank(space: &LabelSpace) -> Result<EmbeddingBank> {
    let meta = (0..space.num_classes())
        .map(|k| {
            let group = if space.is_id(k) {
                Group::Id
            } else {
                Group::Neg
            };
            RowMeta::new(space.label(k), group, Provenance::External)
        })
        .collect();
    EmbeddingBank::from_features(&space.anchors(), meta)
}

pub fn label_space_from_bank(bank: &EmbeddingBank) -> Result<LabelSpace> {
    let feats = bank.features();
    let ids = bank.indices_in(Group::Id);
    let negs = bank.indices_in(Group::Neg);
    if ids.len() + negs.len() != bank.len() {
        return Err(Error::ManifestMismatch(
            "label space rows must be in group id or neg".into(),
        ));
    }
    let labels = |idx: &[usize]| {
        idx.iter()
            .map(|&i| bank.manifest()[i].label.clone())
            .collect()
    };
    LabelSpace::new(
        labels(&ids),
        feats.select(&ids),
        labels(&negs),
        feats.select(&negs),
    )
}

pub fn initial_prompts(cfg: &RunConfig, space: &LabelSpace) -> Result<PromptParams> {
    let init = match cfg.init {
        InitMode::Random => PromptInit::Random,
        InitMode::FromAnchors => {
            let mut sum = vec![0.0; space.dim()];
            for row in space.id_anchors().rows() {
                sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            PromptInit::FromEmbedding(l2_normalize(&sum)?)
        }
    };
    init_prompts(
        cfg.scheme,
        cfg.n_tokens,
        space.dim(),
        space.num_classes(),
        &init,
        cfg.seed,
    )
}

pub fn fit(cfg: &RunConfig, space: &LabelSpace, ts: &TrainingSet) -> Result<TrainOutcome> {
    train_prompts(&initial_prompts(cfg, space)?, ts, space, &cfg.train())
}

/// Scores the test banks against `space`, with trained prompts or, when
/// `prompts` is `None`, against the bare anchors.
pub fn evaluate_banks(
    cfg: &RunConfig,
    space: &LabelSpace,
    space_hash: &str,
    test_id: &EmbeddingBank,
    test_ood: &[(String, EmbeddingBank)],
    prompts: Option<&PromptParams>,
) -> Result<EvalReport> {
    let class_rows = match prompts {
        Some(p) => class_embeddings(p, space)?,
        None => space.anchors(),
    };
    let truth: Vec<usize> = test_id
        .labels()
        .map(|l| match space.class_index(l) {
            Some(k) if space.is_id(k) => Ok(k),
            _ => Err(Error::UnknownLabel(l.to_string())),
        })
        .collect::<Result<_>>()?;
    let id_feats = test_id.features();
    let ood_feats: Vec<(String, FeatureMatrix)> = test_ood
        .iter()
        .map(|(n, b)| (n.clone(), b.features()))
        .collect();
    let ood_refs: Vec<(String, &FeatureMatrix)> =
        ood_feats.iter().map(|(n, f)| (n.clone(), f)).collect();
    let mut report = evaluate(
        &[IdSplit {
            features: &id_feats,
            truth: &truth,
        }],
        &ood_refs,
        &class_rows,
        space.num_id(),
        cfg.tau_score,
        thread_budget(),
    )?;
    let mut bank_hashes = vec![
        ("labelspace".to_string(), space_hash.to_string()),
        ("test_id".to_string(), test_id.content_hash()),
    ];
    bank_hashes.extend(
        test_ood
            .iter()
            .map(|(n, b)| (format!("test_ood_{n}"), b.content_hash())),
    );
    report.config = ReportEcho {
        tau: cfg.tau_score,
        scheme: match prompts {
            Some(p) => scheme_name(p.scheme).to_string(),
            None => "none".to_string(),
        },
        n_tokens: prompts.map_or(0, |p| p.n_tokens),
        seeds: vec![cfg.seed],
        bank_hashes,
        negative_mining: cfg.mining_rule(),
        config_hash: cfg.hash(),
    };
    Ok(report)
}

pub fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Unified => "unified",
        Scheme::ClassSpecific => "class-specific",
        Scheme::DistributionAware => "distribution-aware",
    }
}

/// Result of running every stage in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub baseline: EvalReport,
    pub trained: EvalReport,
    pub outcome: TrainOutcome,
}

/// Runs all stages without touching the filesystem (unless the config
/// names external input banks). Banks pass through their on-disk encoding
/// so results match a file-based run exactly.
pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    cfg.validate()?;
    let roundtrip = |b: &EmbeddingBank| EmbeddingBank::decode(&b.encode(), &b.encode_manifest());
    let world = build_world(cfg)?;
    let (space, _) = mine_label_space(
        cfg,
        &roundtrip(&world.id_anchors)?,
        &roundtrip(&world.corpus)?,
    )?;
    let space_bank = roundtrip(&label_space_to_bank(&space)?)?;
    let space = label_space_from_bank(&space_bank)?;
    let ts = collect_training_set(
        &space,
        &roundtrip(&world.pool_real)?,
        &roundtrip(&world.pool_synth)?,
        cfg.kappa,
        cfg.n_per_class,
    )?;
    let ts = TrainingSet::from_bank(&roundtrip(&ts.to_bank(&space)?)?, &space)?;
    let outcome = fit(cfg, &space, &ts)?;
    let params =
        PromptFile::from_json(&PromptFile::new(&outcome.params, cfg.hash()).to_json())?.params();
    let test_id = roundtrip(&world.test_id)?;
    let test_ood = world
        .test_ood
        .iter()
        .map(|(n, b)| Ok((n.clone(), roundtrip(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let hash = space_bank.content_hash();
    Ok(Simulation {
        baseline: evaluate_banks(cfg, &space, &hash, &test_id, &test_ood, None)?,
        trained: evaluate_banks(cfg, &space, &hash, &test_id, &test_ood, Some(&params))?,
        outcome,
    })
}

/// Provenance record written next to each stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    /// File name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ood_splits: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<(String, f64)>,
}

/// Stage runner bound to one config and output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            out: out.into(),
            force: false,
        })
    }

    /// Accept artifacts produced under a different config.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn load_bank(&self, name: &str) -> Result<EmbeddingBank> {
        load_input(&self.path(name))
    }

    fn read_text(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    fn save_bank(
        &self,
        name: &str,
        bank: &EmbeddingBank,
        hashes: &mut BTreeMap<String, String>,
    ) -> Result<()> {
        bank.save(self.path(name))?;
        hashes.insert(name.to_string(), sha256_hex(&bank.encode()));
        let manifest = manifest_path(Path::new(name))
            .to_string_lossy()
            .into_owned();
        hashes.insert(manifest, sha256_hex(bank.encode_manifest().as_bytes()));
        Ok(())
    }

    fn save_text(
        &self,
        name: &str,
        text: &str,
        hashes: &mut BTreeMap<String, String>,
    ) -> Result<()> {
        write_atomic(&self.path(name), text.as_bytes())?;
        hashes.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    fn write_stamp(&self, stamp: &Stamp) -> Result<()> {
        let mut text = serde_json::to_string_pretty(stamp)?;
        text.push('\n');
        write_atomic(
            &self.path(&format!("{}.stamp.json", stamp.stage)),
            text.as_bytes(),
        )
    }

    fn stamp(&self, stage: &str, artifacts: BTreeMap<String, String>) -> Stamp {
        Stamp {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
            artifacts,
            ood_splits: Vec::new(),
            negatives: Vec::new(),
        }
    }

    pub fn read_stamp(&self, stage: &str) -> Result<Stamp> {
        let text = self.read_text(&format!("{stage}.stamp.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn check_hash(&self, artifact: &str, found: &str) -> Result<()> {
        if self.force || found == self.hash {
            return Ok(());
        }
        Err(Error::HashMismatch {
            artifact: artifact.to_string(),
            expected: self.hash.clone(),
            found: found.to_string(),
        })
    }

    pub fn toygen(&self) -> Result<()> {
        self.ensure_out()?;
        let world = build_world(&self.cfg)?;
        let mut hashes = BTreeMap::new();
        self.save_bank(ID_ANCHORS, &world.id_anchors, &mut hashes)?;
        self.save_bank(CORPUS, &world.corpus, &mut hashes)?;
        self.save_bank(POOL_REAL, &world.pool_real, &mut hashes)?;
        self.save_bank(POOL_SYNTH, &world.pool_synth, &mut hashes)?;
        self.save_bank(TEST_ID, &world.test_id, &mut hashes)?;
        for (name, bank) in &world.test_ood {
            self.save_bank(&test_ood_file(name), bank, &mut hashes)?;
        }
        let mut stamp = self.stamp("toygen", hashes);
        stamp.ood_splits = world.test_ood.iter().map(|(n, _)| n.clone()).collect();
        self.write_stamp(&stamp)
    }

    pub fn mine_neg(&self) -> Result<MinedNegatives> {
        let (space, mined) = mine_label_space(
            &self.cfg,
            &self.load_bank(ID_ANCHORS)?,
            &self.load_bank(CORPUS)?,
        )?;
        self.ensure_out()?;
        let mut hashes = BTreeMap::new();
        self.save_bank(LABEL_SPACE, &label_space_to_bank(&space)?, &mut hashes)?;
        let mut stamp = self.stamp("mine-neg", hashes);
        stamp.negatives = mined
            .labels
            .iter()
            .cloned()
            .zip(mined.affinities.iter().copied())
            .collect();
        self.write_stamp(&stamp)?;
        Ok(mined)
    }

    fn space(&self) -> Result<(LabelSpace, String)> {
        let bank = self.load_bank(LABEL_SPACE)?;
        Ok((label_space_from_bank(&bank)?, bank.content_hash()))
    }

    pub fn collect(&self) -> Result<TrainingSet> {
        let (space, _) = self.space()?;
        let ts = collect_training_set(
            &space,
            &self.load_bank(POOL_REAL)?,
            &self.load_bank(POOL_SYNTH)?,
            self.cfg.kappa,
            self.cfg.n_per_class,
        )?;
        let mut hashes = BTreeMap::new();
        self.save_bank(TRAINING, &ts.to_bank(&space)?, &mut hashes)?;
        self.write_stamp(&self.stamp("collect", hashes))?;
        Ok(ts)
    }

    fn training_inputs(&self) -> Result<(LabelSpace, TrainingSet)> {
        let (space, _) = self.space()?;
        let ts = TrainingSet::from_bank(&self.load_bank(TRAINING)?, &space)?;
        Ok((space, ts))
    }

    pub fn train(&self) -> Result<TrainOutcome> {
        let (space, ts) = self.training_inputs()?;
        let outcome = fit(&self.cfg, &space, &ts)?;
        let mut hashes = BTreeMap::new();
        self.save_text(
            PROMPTS,
            &PromptFile::new(&outcome.params, &self.hash).to_json(),
            &mut hashes,
        )?;
        self.save_text(LOSS_TRACE, &outcome.trace_jsonl(), &mut hashes)?;
        self.write_stamp(&self.stamp("train", hashes))?;
        Ok(outcome)
    }

    /// Checks the analytic gradient of the full objective on the first
    /// training batch against central differences.
    pub fn gradcheck(&self) -> Result<f64> {
        let (space, ts) = self.training_inputs()?;
        let cfg = self.cfg.train();
        let p = initial_prompts(&self.cfg, &space)?;
        let idx: Vec<usize> = (0..ts.len().min(cfg.batch_size)).collect();
        let mut rng = RngStream::new(cfg.seed, StreamTag::Mixing);
        let batches =
            StepBatches::draw(Batch::from_training_set(&ts, &idx), &space, &cfg, &mut rng)?;
        let worst = gradient_check(
            &p,
            &space,
            &batches,
            cfg.tau_train,
            Terms::ALL,
            GRADCHECK_STEP,
        )?;
        if worst.is_nan() || worst >= GRADCHECK_LIMIT {
            return Err(Error::GradientCheck {
                worst,
                limit: GRADCHECK_LIMIT,
            });
        }
        Ok(worst)
    }

    /// Scores the test banks. With `baseline` the bare anchors are used and
    /// the report goes to `report_baseline.json`; otherwise the trained
    /// prompts are used and it goes to `report.json`.
    pub fn eval(&self, baseline: bool) -> Result<EvalReport> {
        let toygen = self.read_stamp("toygen")?;
        self.check_hash("toygen.stamp.json", &toygen.config_hash)?;
        let mine = self.read_stamp("mine-neg")?;
        self.check_hash("mine-neg.stamp.json", &mine.config_hash)?;
        let (space, space_hash) = self.space()?;
        let prompts = if baseline {
            None
        } else {
            let file = PromptFile::from_json(&self.read_text(PROMPTS)?)?;
            self.check_hash(PROMPTS, &file.config_hash)?;
            Some(file.params())
        };
        let test_id = self.load_bank(TEST_ID)?;
        let test_ood = toygen
            .ood_splits
            .iter()
            .map(|n| Ok((n.clone(), self.load_bank(&test_ood_file(n))?)))
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate_banks(
            &self.cfg,
            &space,
            &space_hash,
            &test_id,
            &test_ood,
            prompts.as_ref(),
        )?;
        let name = if baseline { REPORT_BASELINE } else { REPORT };
        write_atomic(&self.path(name), report.to_json().as_bytes())?;
        Ok(report)
    }

    /// Every stage in order, then both evaluations. Returns the baseline
    /// and trained reports.
    pub fn run_all(&self) -> Result<(EvalReport, EvalReport)> {
        self.toygen()?;
        self.mine_neg()?;
        self.collect()?;
        self.train()?;
        let baseline = self.eval(true)?;
        let trained = self.eval(false)?;
        Ok((baseline, trained))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Process exit status for an error: 2 for configuration and input
/// problems, 3 for missing or unreadable artifacts, 4 for numeric
/// failures, 1 for anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::Range(_)
        | Error::UnknownLabel(_)
        | Error::HashMismatch { .. }
        | Error::InsufficientCorpus { .. }
        | Error::InsufficientCandidates { .. }
        | Error::NonPositiveTemperature(_)
        | Error::NonPositiveParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::EmptyInput(_) => 2,
        Error::MissingArtifact(_)
        | Error::BadMagic
        | Error::TruncatedFile { .. }
        | Error::ManifestMismatch(_)
        | Error::NormViolation { .. } => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::ZeroVector { .. } | Error::NonFinite(_) | Error::GradientCheck { .. } => 4,
        Error::Io { .. } => 1,
    }
}
