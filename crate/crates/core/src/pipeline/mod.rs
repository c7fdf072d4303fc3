//! End-to-end orchestration: run configuration, entry presets, training of
//! every model from a split, per-turn prediction and report emission.

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{
    parse_labels, snippet_text, write_json, Candidate, CorpusError, DataPaths, Dataset, TurnLabel,
};
use crate::generator::{build_input, generate_extractive, GenInput, GeneratorError, GeneratorModel};
use crate::inference::{
    detect_context_only, detect_schema_guided, ensemble_average, ensemble_vote, prefilter_snippets,
    rank_snippets, CandidatePool, InferenceError, Ranking,
};
use crate::metrics::{EvalReport, MetricsError};
use crate::neural::{AdamConfig, FitConfig, FitReport, NeuralError, TransformerConfig};
use crate::sampler::{
    build_decision_samples, build_selection_instance, InstanceSeed, NegativeStrategy, SamplerError,
};
use crate::scorer::{
    assemble_context_only, assemble_pair, pretrain_curriculum, CurriculumConfig, EncodedContext,
    LabeledPair, PairGroup, ScorerError, ScorerModel,
};
use crate::tokenizer::{train_bpe, TokenizerError, Vocab};

pub use synth::{gen_synthetic_corpus, SynthSizes, SPLITS};

/// Number of ranked snippets written per knowledge-seeking turn.
pub const TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("entry must be in 0..=4, got {0}")]
    UnknownEntry(u8),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("missing checkpoint {0} (enable train_if_missing or run train first)")]
    MissingCheckpoint(PathBuf),
    #[error("split has no gold labels")]
    NoLabels,
    #[error("turn {turn}: {source}")]
    Turn {
        turn: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Bad configuration or input data, as opposed to a failure while
    /// running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config { .. }
                | Self::UnknownEntry(_)
                | Self::MissingFile(_)
                | Self::NoLabels
                | Self::Corpus(_)
        )
    }

    fn at(turn: usize) -> impl FnOnce(PipelineError) -> PipelineError {
        move |e| PipelineError::Turn {
            turn,
            source: Box::new(e),
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionMode {
    ContextOnly,
    SchemaGuided,
    EnsembleVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    Single,
    EnsembleAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseMode {
    Beam(usize),
    Extractive,
}

/// One of the five system configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryPreset {
    pub entry_id: u8,
    pub detection: DetectionMode,
    pub selection: SelectionMode,
    pub response: ResponseMode,
}

impl EntryPreset {
    pub fn new(entry_id: u8) -> Result<Self> {
        use DetectionMode::*;
        use ResponseMode::*;
        use SelectionMode::*;
        let (detection, selection, response) = match entry_id {
            0 => (ContextOnly, Single, Beam(5)),
            1 => (SchemaGuided, Single, Beam(5)),
            2 => (EnsembleVote, EnsembleAverage, Beam(5)),
            3 => (EnsembleVote, EnsembleAverage, Beam(3)),
            4 => (EnsembleVote, EnsembleAverage, Extractive),
            other => return Err(PipelineError::UnknownEntry(other)),
        };
        Ok(Self {
            entry_id,
            detection,
            selection,
            response,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub path: PathBuf,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigs {
    /// Shared by the schema-guided and context-only detectors.
    pub detector: TransformerConfig,
    pub selector: TransformerConfig,
    pub generator: TransformerConfig,
}

/// Optimizer settings of one training stage; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
}

impl StageConfig {
    pub fn fit(&self, seed: u64) -> FitConfig {
        let base = FitConfig::default();
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam.clone().unwrap_or(base.adam),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStages {
    pub language_model: StageConfig,
    pub sentence_order: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub detector: StageConfig,
    pub selector: StageConfig,
    pub generator: StageConfig,
    #[serde(default)]
    pub negatives: NegativeStrategy,
    /// Optional scorer initialization; off when absent.
    #[serde(default)]
    pub curriculum: Option<CurriculumStages>,
}

/// An ensemble member: the base model config with its own seed and
/// optionally its own depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub seed_offset: u64,
    #[serde(default)]
    pub layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<MemberSpec>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: (1..=3)
                .map(|seed_offset| MemberSpec {
                    seed_offset,
                    layers: None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub dir: PathBuf,
    pub dialogues: usize,
}

/// A complete run description, read from one JSON file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train: DataPaths,
    pub eval: DataPaths,
    pub vocab: VocabConfig,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub entry: u8,
    #[serde(default)]
    pub train_if_missing: bool,
    /// Score only snippets of mentioned entities or domains.
    #[serde(default)]
    pub prefilter: bool,
    pub models: ModelConfigs,
    pub training: TrainingConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_data(base: &Path, d: &mut DataPaths) {
    rebase(base, &mut d.logs);
    rebase(base, &mut d.knowledge);
    rebase(base, &mut d.schema);
    if let Some(p) = d.labels.as_mut() {
        rebase(base, p);
    }
    if let Some(p) = d.api_positives.as_mut() {
        rebase(base, p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| PipelineError::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate().map_err(err)?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase_data(base, &mut self.train);
        rebase_data(base, &mut self.eval);
        rebase(base, &mut self.vocab.path);
        rebase(base, &mut self.checkpoint_dir);
        rebase(base, &mut self.output_dir);
        if let Some(s) = self.synth.as_mut() {
            rebase(base, &mut s.dir);
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.entry > 4 {
            return Err(format!("entry must be in 0..=4, got {}", self.entry));
        }
        for (name, m) in [
            ("detector", &self.models.detector),
            ("selector", &self.models.selector),
            ("generator", &self.models.generator),
        ] {
            m.validate().map_err(|e| format!("models.{name}: {e}"))?;
        }
        for (i, m) in self.ensemble.members.iter().enumerate() {
            if m.layers == Some(0) {
                return Err(format!("ensemble member {i} has zero layers"));
            }
        }
        if self.ensemble.members.is_empty() {
            return Err("ensemble needs at least one member".into());
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<EntryPreset> {
        EntryPreset::new(self.entry)
    }

    pub fn paths(&self) -> CheckpointPaths {
        CheckpointPaths {
            dir: self.checkpoint_dir.clone(),
        }
    }
}

/// File layout of trained models inside the checkpoint directory.
#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub dir: PathBuf,
}

impl CheckpointPaths {
    pub fn detector(&self) -> PathBuf {
        self.dir.join("detector.ckpt")
    }
    pub fn context_detector(&self) -> PathBuf {
        self.dir.join("context_detector.ckpt")
    }
    pub fn selector(&self) -> PathBuf {
        self.dir.join("selector.ckpt")
    }
    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.ckpt")
    }
    pub fn detector_member(&self, i: usize) -> PathBuf {
        self.dir.join(format!("detector_member_{i}.ckpt"))
    }
    pub fn selector_member(&self, i: usize) -> PathBuf {
        self.dir.join(format!("selector_member_{i}.ckpt"))
    }
}

/// Tokenized contexts and candidate texts of one split.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    pub contexts: Vec<EncodedContext>,
    pub pool: CandidatePool,
}

impl EncodedSplit {
    pub fn new(vocab: &Vocab, ds: &Dataset) -> Self {
        Self {
            contexts: ds.contexts.iter().map(|c| EncodedContext::new(vocab, c)).collect(),
            pool: CandidatePool::new(vocab, &ds.knowledge, &ds.schema),
        }
    }
}

fn labels(ds: &Dataset) -> Result<&[TurnLabel]> {
    ds.labels.as_deref().ok_or(PipelineError::NoLabels)
}

fn pair(enc: &EncodedSplit, i: usize, c: Candidate, label: f64, max_len: usize) -> Result<LabeledPair> {
    Ok(LabeledPair {
        input: assemble_pair(&enc.contexts[i], enc.pool.ids(c), max_len)?,
        label,
    })
}

/// Decision-loss groups of one epoch: gold snippets or schema positives
/// with four mixed negatives each. API turns without any schema positive
/// are skipped.
pub fn decision_groups(
    ds: &Dataset,
    enc: &EncodedSplit,
    max_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<PairGroup>> {
    let labels = labels(ds)?;
    let mut groups = Vec::with_capacity(ds.len());
    for (i, label) in labels.iter().enumerate() {
        let positives: Vec<Candidate> = if label.target {
            ds.gold_snippets(i).into_iter().map(Candidate::Snippet).collect()
        } else {
            ds.api_positives(i).into_iter().map(Candidate::Schema).collect()
        };
        if positives.is_empty() {
            continue;
        }
        let inst = build_decision_samples(
            i,
            &positives,
            &ds.knowledge,
            &ds.schema,
            InstanceSeed::new(seed, epoch, i),
        )?;
        let mut group = Vec::with_capacity(inst.positives.len() + inst.negatives.len());
        for &c in &inst.positives {
            group.push(pair(enc, i, c, 1.0, max_len)?);
        }
        for &c in &inst.negatives {
            group.push(pair(enc, i, c, 0.0, max_len)?);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// Selection-loss groups of one epoch: the first gold snippet of every
/// knowledge-seeking turn plus its four negatives.
pub fn selection_groups(
    ds: &Dataset,
    enc: &EncodedSplit,
    max_len: usize,
    strategy: NegativeStrategy,
    seed: u64,
    epoch: usize,
) -> Result<Vec<PairGroup>> {
    let labels = labels(ds)?;
    let mut groups = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let Some(&positive) = ds.gold_snippets(i).first().filter(|_| label.target) else {
            continue;
        };
        let inst = build_selection_instance(
            i,
            positive,
            &ds.contexts[i],
            &ds.knowledge,
            strategy,
            InstanceSeed::new(seed, epoch, i),
        )?;
        let mut group = vec![pair(enc, i, Candidate::Snippet(positive), 1.0, max_len)?];
        for n in &inst.negatives {
            group.push(pair(enc, i, Candidate::Snippet(n.snippet), 0.0, max_len)?);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// `[CLS] context [SEP]` labeled with the gold target.
pub fn context_pairs(ds: &Dataset, enc: &EncodedSplit, max_len: usize) -> Result<Vec<LabeledPair>> {
    labels(ds)?
        .iter()
        .zip(&enc.contexts)
        .map(|(l, c)| {
            Ok(LabeledPair {
                input: assemble_context_only(c, max_len)?,
                label: if l.target { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// `(knowledge, context, response)` inputs of every knowledge-seeking turn,
/// conditioned on the first gold snippet.
pub fn generator_inputs(ds: &Dataset, vocab: &Vocab, max_len: usize) -> Result<Vec<GenInput>> {
    let labels = labels(ds)?;
    let mut out = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let (Some(&k), Some(r)) = (ds.gold_snippets(i).first(), label.response.as_deref()) else {
            continue;
        };
        out.push(build_input(vocab, ds.knowledge.get(k), &ds.contexts[i], Some(r), max_len)?);
    }
    Ok(out)
}

fn curriculum_for(stages: &CurriculumStages, seed: u64) -> CurriculumConfig {
    CurriculumConfig {
        language_model: stages.language_model.fit(seed),
        sentence_order: stages.sentence_order.fit(seed),
    }
}

fn maybe_pretrain(
    model: &mut ScorerModel,
    ds: &Dataset,
    enc: &EncodedSplit,
    vocab: &Vocab,
    curriculum: Option<&CurriculumStages>,
    seed: u64,
) -> Result<()> {
    let Some(stages) = curriculum else { return Ok(()) };
    let dialogues: Vec<(EncodedContext, Vec<u32>)> = labels(ds)?
        .iter()
        .zip(&enc.contexts)
        .filter_map(|(l, c)| l.response.as_deref().map(|r| (c.clone(), vocab.encode(r))))
        .collect();
    pretrain_curriculum(model, &dialogues, &curriculum_for(stages, seed))?;
    Ok(())
}

/// Schema-guided detector trained on mixed snippet and schema candidates.
pub fn train_detector(
    ds: &Dataset,
    vocab: &Vocab,
    model: &TransformerConfig,
    fit: &FitConfig,
    curriculum: Option<&CurriculumStages>,
) -> Result<(ScorerModel, FitReport)> {
    let enc = EncodedSplit::new(vocab, ds);
    let mut m = ScorerModel::new(model, vocab.len(), fit.seed)?;
    maybe_pretrain(&mut m, ds, &enc, vocab, curriculum, fit.seed)?;
    let max_len = m.max_len();
    labels(ds)?;
    let report = m.train(fit, |e| decision_groups(ds, &enc, max_len, fit.seed, e).map_err(into_scorer))?;
    Ok((m, report))
}

/// Binary classifier over the context alone.
pub fn train_context_detector(
    ds: &Dataset,
    vocab: &Vocab,
    model: &TransformerConfig,
    fit: &FitConfig,
) -> Result<(ScorerModel, FitReport)> {
    let enc = EncodedSplit::new(vocab, ds);
    let mut m = ScorerModel::new(model, vocab.len(), fit.seed)?;
    let pairs = context_pairs(ds, &enc, m.max_len())?;
    let report = m.train_pairs(fit, |_| Ok(pairs.clone()))?;
    Ok((m, report))
}

/// Selector trained on gold snippets against `strategy` negatives,
/// resampled every epoch.
pub fn train_selector(
    ds: &Dataset,
    vocab: &Vocab,
    model: &TransformerConfig,
    fit: &FitConfig,
    strategy: NegativeStrategy,
    curriculum: Option<&CurriculumStages>,
) -> Result<(ScorerModel, FitReport)> {
    let enc = EncodedSplit::new(vocab, ds);
    let mut m = ScorerModel::new(model, vocab.len(), fit.seed)?;
    maybe_pretrain(&mut m, ds, &enc, vocab, curriculum, fit.seed)?;
    let max_len = m.max_len();
    labels(ds)?;
    let report = m.train(fit, |e| selection_groups(ds, &enc, max_len, strategy, fit.seed, e).map_err(into_scorer))?;
    Ok((m, report))
}

/// Group builders run inside the training loop, whose callback speaks
/// [`ScorerError`].
fn into_scorer(e: PipelineError) -> ScorerError {
    match e {
        PipelineError::Scorer(e) => e,
        PipelineError::Sampler(e) => ScorerError::Sampler(e),
        other => ScorerError::Neural(NeuralError::InvalidConfig(other.to_string())),
    }
}

pub fn train_generator(
    ds: &Dataset,
    vocab: &Vocab,
    model: &TransformerConfig,
    fit: &FitConfig,
) -> Result<(GeneratorModel, FitReport)> {
    let mut m = GeneratorModel::new(model, vocab.len(), fit.seed)?;
    let inputs = generator_inputs(ds, vocab, m.max_len())?;
    let report = m.train_nll(fit, |_| Ok(inputs.clone()))?;
    Ok((m, report))
}

/// Fails with [`PipelineError::MissingFile`] when a split file is absent.
pub fn check_split(d: &DataPaths) -> Result<()> {
    let files = [Some(&d.logs), Some(&d.knowledge), Some(&d.schema), d.labels.as_ref(), d.api_positives.as_ref()];
    for p in files.into_iter().flatten() {
        if !p.exists() {
            return Err(PipelineError::MissingFile(p.clone()));
        }
    }
    Ok(())
}

pub fn load_split(d: &DataPaths) -> Result<Dataset> {
    check_split(d)?;
    Ok(Dataset::load(d)?)
}

/// Tokenizer training text: every utterance and response of `ds` plus the
/// knowledge and schema texts of every split in `catalogs`.
pub fn vocab_texts(ds: &Dataset, catalogs: &[&Dataset]) -> Vec<String> {
    let mut texts: Vec<String> = ds
        .contexts
        .iter()
        .flat_map(|c| c.utterances().iter().map(|u| u.text().to_string()))
        .collect();
    if let Some(labels) = &ds.labels {
        texts.extend(labels.iter().filter_map(|l| l.response.clone()));
    }
    for cat in std::iter::once(&ds).chain(catalogs) {
        texts.extend(cat.knowledge.snippets().iter().map(snippet_text));
        texts.extend(cat.schema.descriptions().iter().map(|d| d.text()));
    }
    texts
}

/// Trains the subword vocabulary on the training split (plus the evaluation
/// knowledge and schema) and writes it to the configured path.
pub fn train_vocab(config: &RunConfig) -> Result<Vocab> {
    let train = load_split(&config.train)?;
    let eval = load_split(&config.eval)?;
    let vocab = train_bpe(&vocab_texts(&train, &[&eval]), config.vocab.size)?;
    vocab.save(&config.vocab.path)?;
    Ok(vocab)
}

/// Loads the vocabulary, training it first when allowed.
pub fn obtain_vocab(config: &RunConfig) -> Result<Vocab> {
    if config.vocab.path.exists() {
        Ok(Vocab::load(&config.vocab.path)?)
    } else if config.train_if_missing {
        train_vocab(config)
    } else {
        Err(PipelineError::MissingFile(config.vocab.path.clone()))
    }
}

/// Model families trained by `train --task`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Detector,
    Selector,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerRole {
    Detector,
    ContextDetector,
    DetectorMember(usize),
    Selector,
    SelectorMember(usize),
}

/// Every model an entry may use; roles the entry does not need stay empty.
#[derive(Debug, Default)]
pub struct Models {
    pub detector: Option<ScorerModel>,
    pub context_detector: Option<ScorerModel>,
    pub detector_members: Vec<ScorerModel>,
    pub selector: Option<ScorerModel>,
    pub selector_members: Vec<ScorerModel>,
    pub generator: Option<GeneratorModel>,
}

fn not_loaded(role: &str) -> PipelineError {
    PipelineError::Config {
        path: PathBuf::new(),
        message: format!("{role} model not loaded"),
    }
}

fn required<'a, T>(m: &'a Option<T>, role: &str) -> Result<&'a T> {
    m.as_ref().ok_or_else(|| not_loaded(role))
}

/// Loads checkpoints, training and saving them first when they are missing
/// and training is enabled. Freshly trained models are reloaded from disk so
/// a run behaves the same whether or not it trained.
pub struct ModelStore<'a> {
    config: &'a RunConfig,
    vocab: &'a Vocab,
    train: Option<Dataset>,
    /// Training reports of the models trained by this store.
    pub reports: Vec<(PathBuf, FitReport)>,
}

impl<'a> ModelStore<'a> {
    pub fn new(config: &'a RunConfig, vocab: &'a Vocab) -> Self {
        Self {
            config,
            vocab,
            train: None,
            reports: Vec::new(),
        }
    }

    fn train_split(&mut self) -> Result<&Dataset> {
        if self.train.is_none() {
            self.train = Some(load_split(&self.config.train)?);
        }
        Ok(self.train.as_ref().expect("loaded above"))
    }

    fn member(&self, i: usize) -> Result<(TransformerConfig, TransformerConfig, u64)> {
        let spec = self.config.ensemble.members.get(i).ok_or_else(|| PipelineError::Config {
            path: PathBuf::new(),
            message: format!("no ensemble member {i}"),
        })?;
        let with_depth = |base: &TransformerConfig| TransformerConfig {
            layers: spec.layers.unwrap_or(base.layers),
            ..base.clone()
        };
        Ok((
            with_depth(&self.config.models.detector),
            with_depth(&self.config.models.selector),
            self.config.seed.wrapping_add(spec.seed_offset),
        ))
    }

    pub fn scorer_path(&self, role: ScorerRole) -> PathBuf {
        let p = self.config.paths();
        match role {
            ScorerRole::Detector => p.detector(),
            ScorerRole::ContextDetector => p.context_detector(),
            ScorerRole::DetectorMember(i) => p.detector_member(i),
            ScorerRole::Selector => p.selector(),
            ScorerRole::SelectorMember(i) => p.selector_member(i),
        }
    }

    fn check_vocab(&self, path: &Path, found: usize) -> Result<()> {
        if found != self.vocab.len() {
            return Err(PipelineError::Config {
                path: path.to_path_buf(),
                message: format!("checkpoint vocabulary size {found} differs from {}", self.vocab.len()),
            });
        }
        Ok(())
    }

    fn should_train(&self, path: &Path, force: bool) -> Result<bool> {
        if force || (!path.exists() && self.config.train_if_missing) {
            Ok(true)
        } else if path.exists() {
            Ok(false)
        } else {
            Err(PipelineError::MissingCheckpoint(path.to_path_buf()))
        }
    }

    pub fn scorer(&mut self, role: ScorerRole, force: bool) -> Result<ScorerModel> {
        let path = self.scorer_path(role);
        if self.should_train(&path, force)? {
            let c = self.config;
            let t = &c.training;
            let curriculum = t.curriculum.as_ref();
            let vocab = self.vocab;
            let (model, report) = match role {
                ScorerRole::Detector => {
                    train_detector(self.train_split()?, vocab, &c.models.detector, &t.detector.fit(c.seed), curriculum)?
                }
                ScorerRole::ContextDetector => {
                    train_context_detector(self.train_split()?, vocab, &c.models.detector, &t.detector.fit(c.seed))?
                }
                ScorerRole::DetectorMember(i) => {
                    let (cfg, _, seed) = self.member(i)?;
                    train_detector(self.train_split()?, vocab, &cfg, &t.detector.fit(seed), curriculum)?
                }
                ScorerRole::Selector => train_selector(
                    self.train_split()?,
                    vocab,
                    &c.models.selector,
                    &t.selector.fit(c.seed),
                    t.negatives,
                    curriculum,
                )?,
                ScorerRole::SelectorMember(i) => {
                    let (_, cfg, seed) = self.member(i)?;
                    train_selector(self.train_split()?, vocab, &cfg, &t.selector.fit(seed), t.negatives, curriculum)?
                }
            };
            model.save(&path)?;
            self.reports.push((path.clone(), report));
        }
        let m = ScorerModel::load(&path)?;
        self.check_vocab(&path, m.vocab_size())?;
        Ok(m)
    }

    pub fn generator(&mut self, force: bool) -> Result<GeneratorModel> {
        let path = self.config.paths().generator();
        if self.should_train(&path, force)? {
            let c = self.config;
            let vocab = self.vocab;
            let (model, report) =
                train_generator(self.train_split()?, vocab, &c.models.generator, &c.training.generator.fit(c.seed))?;
            model.save(&path)?;
            self.reports.push((path.clone(), report));
        }
        let m = GeneratorModel::load(&path)?;
        self.check_vocab(&path, m.vocab_size())?;
        Ok(m)
    }

    /// Models needed by `preset`. With `force`, that family is retrained even
    /// when its checkpoints exist.
    pub fn models_for(&mut self, preset: &EntryPreset, force: Option<TrainTask>) -> Result<Models> {
        let mut models = Models::default();
        let members = self.config.ensemble.members.len();
        let fd = force == Some(TrainTask::Detector);
        let fs = force == Some(TrainTask::Selector);
        let fg = force == Some(TrainTask::Generator);
        if force.is_none() || fd {
            match preset.detection {
                DetectionMode::ContextOnly => models.context_detector = Some(self.scorer(ScorerRole::ContextDetector, fd)?),
                DetectionMode::SchemaGuided => models.detector = Some(self.scorer(ScorerRole::Detector, fd)?),
                DetectionMode::EnsembleVote => {
                    for i in 0..members {
                        models.detector_members.push(self.scorer(ScorerRole::DetectorMember(i), fd)?);
                    }
                }
            }
        }
        if force.is_none() || fs {
            match preset.selection {
                SelectionMode::Single => models.selector = Some(self.scorer(ScorerRole::Selector, fs)?),
                SelectionMode::EnsembleAverage => {
                    for i in 0..members {
                        models.selector_members.push(self.scorer(ScorerRole::SelectorMember(i), fs)?);
                    }
                }
            }
        }
        if (force.is_none() || fg) && matches!(preset.response, ResponseMode::Beam(_)) {
            models.generator = Some(self.generator(fg)?);
        }
        Ok(models)
    }
}

/// System output for one detection instance, as snippet indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub target: bool,
    /// Up to [`TOP_K`] snippets, best first.
    pub knowledge: Vec<usize>,
    pub response: Option<String>,
}

impl Prediction {
    pub fn to_label(&self, ds: &Dataset) -> TurnLabel {
        TurnLabel {
            target: self.target,
            knowledge: self.knowledge.iter().map(|&k| ds.knowledge.get(k).key()).collect(),
            response: self.response.clone(),
            api_positives: None,
        }
    }
}

/// Response for `snippet` under `mode`; the only stage-3 entry point.
pub fn respond(
    generator: Option<&GeneratorModel>,
    vocab: &Vocab,
    ctx: &crate::corpus::DialogueContext,
    snippet: &crate::corpus::KnowledgeSnippet,
    mode: ResponseMode,
) -> Result<String> {
    match mode {
        ResponseMode::Extractive => Ok(generate_extractive(snippet)?),
        ResponseMode::Beam(beam) => {
            let g = generator.ok_or_else(|| not_loaded("generator"))?;
            let prefix = build_input(vocab, snippet, ctx, None, g.max_len())?;
            Ok(g.generate(vocab, &prefix, beam)?)
        }
    }
}

/// Task-1 decision for turn `i`.
pub fn detect_turn(
    models: &Models,
    enc: &EncodedSplit,
    i: usize,
    mode: DetectionMode,
    snippets: &[usize],
) -> Result<bool> {
    let ctx = &enc.contexts[i];
    Ok(match mode {
        DetectionMode::ContextOnly => detect_context_only(required(&models.context_detector, "context detector")?, ctx)?.0,
        DetectionMode::SchemaGuided => {
            detect_schema_guided(required(&models.detector, "detector")?, ctx, &enc.pool, snippets)?.knowledge_seeking
        }
        DetectionMode::EnsembleVote => {
            let votes = models
                .detector_members
                .iter()
                .map(|m| Ok(detect_schema_guided(m, ctx, &enc.pool, snippets)?.knowledge_seeking))
                .collect::<Result<Vec<bool>>>()?;
            ensemble_vote(&votes)?
        }
    })
}

/// Task-2 ranking of `snippets` for turn `i`.
pub fn rank_turn(
    models: &Models,
    enc: &EncodedSplit,
    i: usize,
    mode: SelectionMode,
    snippets: &[usize],
) -> Result<Ranking> {
    let ctx = &enc.contexts[i];
    Ok(match mode {
        SelectionMode::Single => rank_snippets(required(&models.selector, "selector")?, ctx, &enc.pool, snippets)?,
        SelectionMode::EnsembleAverage => {
            let maps = models
                .selector_members
                .iter()
                .map(|m| Ok(rank_snippets(m, ctx, &enc.pool, snippets)?.score_map()))
                .collect::<Result<Vec<BTreeMap<usize, f64>>>>()?;
            ensemble_average(&maps)?
        }
    })
}

/// Detection, then (if knowledge seeking) ranking and a response from the
/// top-1 snippet.
pub fn predict_turn(
    models: &Models,
    vocab: &Vocab,
    ds: &Dataset,
    enc: &EncodedSplit,
    i: usize,
    preset: &EntryPreset,
    prefilter: bool,
) -> Result<Prediction> {
    let snippets: Vec<usize> = if prefilter {
        prefilter_snippets(&ds.contexts[i], &ds.knowledge)
    } else {
        (0..ds.knowledge.len()).collect()
    };
    if !detect_turn(models, enc, i, preset.detection, &snippets)? {
        return Ok(Prediction {
            target: false,
            knowledge: Vec::new(),
            response: None,
        });
    }
    let ranking = rank_turn(models, enc, i, preset.selection, &snippets)?.truncated(TOP_K);
    let top = ranking.top().ok_or(InferenceError::EmptyCatalog)?;
    let response = respond(models.generator.as_ref(), vocab, &ds.contexts[i], ds.knowledge.get(top), preset.response)?;
    Ok(Prediction {
        target: true,
        knowledge: ranking.ids(),
        response: Some(response),
    })
}

/// Predictions for every instance, in order.
pub fn predict_split(
    models: &Models,
    vocab: &Vocab,
    ds: &Dataset,
    preset: &EntryPreset,
    prefilter: bool,
) -> Result<Vec<Prediction>> {
    let enc = EncodedSplit::new(vocab, ds);
    (0..ds.len())
        .map(|i| predict_turn(models, vocab, ds, &enc, i, preset, prefilter).map_err(PipelineError::at(i)))
        .collect()
}

pub fn predictions_json(ds: &Dataset, preds: &[Prediction]) -> Value {
    Value::Array(preds.iter().map(|p| p.to_label(ds).to_json()).collect())
}

/// Task-1 report over all instances; Task-2 and Task-3 reports over gold
/// knowledge-seeking instances, where a missed detection scores 0.
pub fn score_predictions(ds: &Dataset, preds: &[TurnLabel]) -> Result<[EvalReport; 3]> {
    let gold = labels(ds)?;
    if gold.len() != preds.len() {
        return Err(CorpusError::LengthMismatch {
            what: "predictions",
            expected: gold.len(),
            found: preds.len(),
        }
        .into());
    }
    let p: Vec<bool> = preds.iter().map(|l| l.target).collect();
    let g: Vec<bool> = gold.iter().map(|l| l.target).collect();
    let task1 = EvalReport::detection(&p, &g)?;
    let (mut rankings, mut golds, mut hyps, mut refs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (pred, gl)) in preds.iter().zip(gold).enumerate() {
        if !gl.target {
            continue;
        }
        let Some(&gold_snippet) = ds.gold_snippets(i).first() else { continue };
        golds.push(gold_snippet);
        refs.push(gl.response.clone().unwrap_or_default());
        if pred.target {
            rankings.push(pred.knowledge.iter().filter_map(|k| ds.knowledge.resolve(k)).collect());
            hyps.push(pred.response.clone());
        } else {
            rankings.push(Vec::new());
            hyps.push(None);
        }
    }
    let task2 = EvalReport::selection(&rankings, &golds)?;
    let task3 = EvalReport::generation(&hyps, &refs)?;
    Ok([task1, task2, task3])
}

/// Reads a predictions file in the labels format.
pub fn load_predictions(path: &Path, ds: &Dataset) -> Result<Vec<TurnLabel>> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(parse_labels(&v, &ds.knowledge)?)
}

/// Files written by [`run_entry`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub predictions: PathBuf,
    /// Present when the evaluation split carries labels.
    pub reports: Option<[EvalReport; 3]>,
}

pub fn entry_dir(config: &RunConfig) -> PathBuf {
    config.output_dir.join(format!("entry{}", config.entry))
}

/// Runs the configured entry on the evaluation split and writes
/// `predictions.json` (plus `report.json` when gold labels exist).
pub fn run_entry(config: &RunConfig) -> Result<RunOutput> {
    let preset = config.preset()?;
    check_split(&config.eval)?;
    let vocab = obtain_vocab(config)?;
    let models = ModelStore::new(config, &vocab).models_for(&preset, None)?;
    let ds = load_split(&config.eval)?;
    let preds = predict_split(&models, &vocab, &ds, &preset, config.prefilter)?;
    let dir = entry_dir(config);
    let predictions = dir.join("predictions.json");
    write_json(&predictions, &predictions_json(&ds, &preds))?;
    let reports = match ds.labels {
        Some(_) => {
            let labels: Vec<TurnLabel> = preds.iter().map(|p| p.to_label(&ds)).collect();
            let r = score_predictions(&ds, &labels)?;
            write_json(&dir.join("report.json"), &serde_json::to_value(&r).expect("reports serialize"))?;
            Some(r)
        }
        None => None,
    };
    Ok(RunOutput {
        dir,
        predictions,
        reports,
    })
}

/// Summary printed by `ingest --validate`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitSummary {
    pub dialogues: usize,
    pub knowledge_turns: Option<usize>,
    pub snippets: usize,
    pub schema_descriptions: usize,
}

pub fn summarize(ds: &Dataset) -> SplitSummary {
    SplitSummary {
        dialogues: ds.len(),
        knowledge_turns: ds.labels.as_ref().map(|l| l.iter().filter(|t| t.target).count()),
        snippets: ds.knowledge.len(),
        schema_descriptions: ds.schema.len(),
    }
}
