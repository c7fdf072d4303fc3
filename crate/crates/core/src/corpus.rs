//! Dialogue logs, turn labels, the external knowledge base and schema
//! descriptions: data model, JSON ingestion and validation.
//!
//! File formats:
//!
//! * logs: `[[{"speaker": "U"|"S", "text": ...}, ...], ...]`, one context per
//!   detection instance, each ending with a user turn.
//! * labels: `[{"target": bool, "knowledge": [{"domain", "entity_id",
//!   "doc_id"}], "response": ...}, ...]`, aligned 1:1 with the logs;
//!   `knowledge` and `response` appear iff `target`.
//! * knowledge: `{domain: {entity_id: {"name", "docs": {doc_id: {"title",
//!   "body"}}}}}`; entity id `"*"` marks domain-level documents.
//! * schema: `[{"service", "slots": [{"name", "description"}], "intents":
//!   [...]}]`.
//! * api positives (optional): array aligned with the logs, each entry `null`
//!   or `[{"service", "kind": "slot"|"intent", "name"}]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("dialogue {dialogue}{}: {message}", turn.map(|t| format!(" turn {t}")).unwrap_or_default())]
    Schema {
        dialogue: usize,
        turn: Option<usize>,
        message: String,
    },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("schema catalog is empty")]
    EmptyCatalog,
    #[error("knowledge base is empty")]
    EmptyKnowledge,
    #[error("instance {instance}: knowledge reference {key} not found")]
    UnresolvedSnippet { instance: usize, key: SnippetKey },
    #[error("instance {instance}: schema reference {reference} not found")]
    UnresolvedSchema { instance: usize, reference: String },
    #[error("{what}: {found} entries, logs have {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid {0}")]
    Invalid(String),
}

fn read_json(path: &Path) -> Result<Value, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn squash_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "U",
            Speaker::System => "S",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "U" => Some(Speaker::User),
            "S" => Some(Speaker::System),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    speaker: Speaker,
    text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CorpusError::Invalid("utterance text is empty".into()));
        }
        Ok(Self { speaker, text })
    }

    pub fn user(text: impl Into<String>) -> Result<Self, CorpusError> {
        Self::new(Speaker::User, text)
    }

    pub fn system(text: impl Into<String>) -> Result<Self, CorpusError> {
        Self::new(Speaker::System, text)
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Utterances `u_1 .. u_t` up to and including the user turn under decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueContext {
    utterances: Vec<Utterance>,
}

impl DialogueContext {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        match utterances.last() {
            None => Err(CorpusError::Invalid("dialogue context is empty".into())),
            Some(u) if u.speaker() != Speaker::User => Err(CorpusError::Invalid(
                "dialogue context must end with a user utterance".into(),
            )),
            Some(_) => Ok(Self { utterances }),
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    /// `t`, the number of utterances.
    pub fn turn_index(&self) -> usize {
        self.utterances.len()
    }

    pub fn last_user(&self) -> &Utterance {
        self.utterances.last().expect("context is never empty")
    }

    /// All utterance texts joined by single spaces.
    pub fn joined_text(&self) -> String {
        self.utterances
            .iter()
            .map(Utterance::text)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.utterances
                .iter()
                .map(|u| json!({"speaker": u.speaker().tag(), "text": u.text()}))
                .collect(),
        )
    }
}

/// `(domain, entity_id, doc_id)`; `entity_id` is `None` for domain-level
/// documents (`"*"` on disk).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnippetKey {
    pub domain: String,
    pub entity_id: Option<String>,
    pub doc_id: String,
}

impl fmt::Display for SnippetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.domain,
            self.entity_id.as_deref().unwrap_or("*"),
            self.doc_id
        )
    }
}

fn id_from_value(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

impl Serialize for SnippetKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        json!({
            "domain": self.domain,
            "entity_id": self.entity_id.as_deref().unwrap_or("*"),
            "doc_id": self.doc_id,
        })
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SnippetKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = Value::deserialize(d)?;
        let domain = v
            .get("domain")
            .and_then(Value::as_str)
            .ok_or_else(|| D::Error::custom("knowledge reference missing domain"))?;
        let entity = v
            .get("entity_id")
            .and_then(id_from_value)
            .ok_or_else(|| D::Error::custom("knowledge reference missing entity_id"))?;
        let doc = v
            .get("doc_id")
            .and_then(id_from_value)
            .ok_or_else(|| D::Error::custom("knowledge reference missing doc_id"))?;
        Ok(SnippetKey {
            domain: domain.to_string(),
            entity_id: (entity != "*").then_some(entity),
            doc_id: doc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeSnippet {
    pub domain: String,
    pub entity_id: Option<String>,
    pub entity_name: Option<String>,
    pub doc_id: String,
    /// The FAQ question.
    pub title: String,
    /// The FAQ answer.
    pub body: String,
}

impl KnowledgeSnippet {
    pub fn key(&self) -> SnippetKey {
        SnippetKey {
            domain: self.domain.clone(),
            entity_id: self.entity_id.clone(),
            doc_id: self.doc_id.clone(),
        }
    }
}

/// `"{entity_name or domain}: {title} {body}"` with single spaces.
pub fn snippet_text(k: &KnowledgeSnippet) -> String {
    let head = k.entity_name.as_deref().unwrap_or(&k.domain);
    squash_whitespace(&format!("{head}: {} {}", k.title, k.body))
}

/// The external knowledge base `K` with domain and entity indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    snippets: Vec<KnowledgeSnippet>,
    domain_index: BTreeMap<String, Vec<usize>>,
    entity_index: BTreeMap<(String, Option<String>), Vec<usize>>,
    key_index: HashMap<SnippetKey, usize>,
}

impl KnowledgeBase {
    pub fn new(snippets: Vec<KnowledgeSnippet>) -> Result<Self, CorpusError> {
        if snippets.is_empty() {
            return Err(CorpusError::EmptyKnowledge);
        }
        let mut domain_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut entity_index: BTreeMap<(String, Option<String>), Vec<usize>> = BTreeMap::new();
        let mut key_index = HashMap::new();
        for (i, s) in snippets.iter().enumerate() {
            if s.body.trim().is_empty() {
                return Err(CorpusError::Invalid(format!(
                    "snippet {} has an empty body",
                    s.key()
                )));
            }
            if key_index.insert(s.key(), i).is_some() {
                return Err(CorpusError::DuplicateKey(s.key().to_string()));
            }
            domain_index.entry(s.domain.clone()).or_default().push(i);
            entity_index
                .entry((s.domain.clone(), s.entity_id.clone()))
                .or_default()
                .push(i);
        }
        Ok(Self {
            snippets,
            domain_index,
            entity_index,
            key_index,
        })
    }

    pub fn snippets(&self) -> &[KnowledgeSnippet] {
        &self.snippets
    }

    pub fn get(&self, i: usize) -> &KnowledgeSnippet {
        &self.snippets[i]
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn domain_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.domain_index
    }

    pub fn entity_index(&self) -> &BTreeMap<(String, Option<String>), Vec<usize>> {
        &self.entity_index
    }

    pub fn in_domain(&self, domain: &str) -> &[usize] {
        self.domain_index.get(domain).map_or(&[], Vec::as_slice)
    }

    pub fn in_entity(&self, domain: &str, entity_id: Option<&str>) -> &[usize] {
        self.entity_index
            .get(&(domain.to_string(), entity_id.map(str::to_string)))
            .map_or(&[], Vec::as_slice)
    }

    pub fn resolve(&self, key: &SnippetKey) -> Option<usize> {
        self.key_index.get(key).copied()
    }

    /// Distinct named entities as `(domain, entity_id, entity_name)`, in
    /// knowledge-base order.
    pub fn entities(&self) -> Vec<(String, String, String)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.snippets {
            if let (Some(id), Some(name)) = (&s.entity_id, &s.entity_name) {
                if seen.insert((s.domain.clone(), id.clone())) {
                    out.push((s.domain.clone(), id.clone(), name.clone()));
                }
            }
        }
        out
    }

    pub fn from_json(v: &Value) -> Result<Self, CorpusError> {
        let bad = |m: String| CorpusError::Invalid(format!("knowledge file: {m}"));
        let domains = v.as_object().ok_or_else(|| bad("top level must be an object".into()))?;
        let mut snippets = Vec::new();
        for (domain, entities) in domains {
            let entities = entities
                .as_object()
                .ok_or_else(|| bad(format!("domain {domain} must map entity ids")))?;
            for (entity_id, entity) in entities {
                let name = match entity.get("name") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => return Err(bad(format!("{domain}/{entity_id}: name must be a string"))),
                };
                let docs = entity
                    .get("docs")
                    .and_then(Value::as_object)
                    .ok_or_else(|| bad(format!("{domain}/{entity_id}: missing docs")))?;
                let star = entity_id == "*";
                for (doc_id, doc) in docs {
                    let field = |f: &str| {
                        doc.get(f)
                            .and_then(Value::as_str)
                            .map(str::to_string)
                            .ok_or_else(|| bad(format!("{domain}/{entity_id}/{doc_id}: missing {f}")))
                    };
                    snippets.push(KnowledgeSnippet {
                        domain: domain.clone(),
                        entity_id: (!star).then(|| entity_id.clone()),
                        entity_name: if star { None } else { name.clone() },
                        doc_id: doc_id.clone(),
                        title: field("title")?,
                        body: field("body")?,
                    });
                }
            }
        }
        Self::new(snippets)
    }

    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for s in &self.snippets {
            let domain = root
                .entry(s.domain.clone())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("domain object");
            let eid = s.entity_id.clone().unwrap_or_else(|| "*".into());
            let entity = domain
                .entry(eid)
                .or_insert_with(|| json!({"name": s.entity_name, "docs": {}}));
            entity["docs"]
                .as_object_mut()
                .expect("docs object")
                .insert(s.doc_id.clone(), json!({"title": s.title, "body": s.body}));
        }
        Value::Object(root)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    Slot,
    Intent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDescription {
    pub service: String,
    pub kind: SchemaKind,
    pub name: String,
    pub description: String,
}

impl SchemaDescription {
    pub fn reference(&self) -> SchemaRef {
        SchemaRef {
            service: self.service.clone(),
            kind: self.kind,
            name: self.name.clone(),
        }
    }

    /// Name with `_`/`-` turned into spaces, lowercased.
    pub fn name_words(&self) -> String {
        self.name.replace(['_', '-'], " ").to_lowercase()
    }

    /// Candidate text fed to the scorer: `"{service} {name words}:
    /// {description}"`.
    pub fn text(&self) -> String {
        squash_whitespace(&format!(
            "{} {}: {}",
            self.service,
            self.name_words(),
            self.description
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemaRef {
    pub service: String,
    pub kind: SchemaKind,
    pub name: String,
}

impl fmt::Display for SchemaRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{:?}/{}", self.service, self.kind, self.name)
    }
}

/// The schema descriptions `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaCatalog {
    descriptions: Vec<SchemaDescription>,
    index: HashMap<SchemaRef, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaEntryFile {
    name: String,
    description: String,
}

#[derive(Serialize, Deserialize)]
struct ServiceFile {
    service: String,
    #[serde(default)]
    slots: Vec<SchemaEntryFile>,
    #[serde(default)]
    intents: Vec<SchemaEntryFile>,
}

impl SchemaCatalog {
    pub fn new(descriptions: Vec<SchemaDescription>) -> Result<Self, CorpusError> {
        if descriptions.is_empty() {
            return Err(CorpusError::EmptyCatalog);
        }
        let mut index = HashMap::new();
        for (i, d) in descriptions.iter().enumerate() {
            if d.description.trim().is_empty() {
                return Err(CorpusError::Invalid(format!(
                    "schema {} has an empty description",
                    d.reference()
                )));
            }
            if index.insert(d.reference(), i).is_some() {
                return Err(CorpusError::DuplicateKey(d.reference().to_string()));
            }
        }
        Ok(Self {
            descriptions,
            index,
        })
    }

    pub fn descriptions(&self) -> &[SchemaDescription] {
        &self.descriptions
    }

    pub fn get(&self, i: usize) -> &SchemaDescription {
        &self.descriptions[i]
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn resolve(&self, r: &SchemaRef) -> Option<usize> {
        self.index.get(r).copied()
    }

    pub fn from_json(v: &Value) -> Result<Self, CorpusError> {
        let services: Vec<ServiceFile> = serde_json::from_value(v.clone())
            .map_err(|e| CorpusError::Invalid(format!("schema file: {e}")))?;
        let mut out = Vec::new();
        for s in services {
            for (kind, entries) in [(SchemaKind::Slot, s.slots), (SchemaKind::Intent, s.intents)] {
                for e in entries {
                    out.push(SchemaDescription {
                        service: s.service.clone(),
                        kind,
                        name: e.name,
                        description: e.description,
                    });
                }
            }
        }
        Self::new(out)
    }

    pub fn to_json(&self) -> Value {
        let mut services: Vec<ServiceFile> = Vec::new();
        for d in &self.descriptions {
            if services.last().map(|s| &s.service) != Some(&d.service) {
                services.push(ServiceFile {
                    service: d.service.clone(),
                    slots: Vec::new(),
                    intents: Vec::new(),
                });
            }
            let entry = SchemaEntryFile {
                name: d.name.clone(),
                description: d.description.clone(),
            };
            let s = services.last_mut().expect("pushed above");
            match d.kind {
                SchemaKind::Slot => s.slots.push(entry),
                SchemaKind::Intent => s.intents.push(entry),
            }
        }
        serde_json::to_value(services).expect("schema serializes")
    }

    /// Descriptions whose name words occur in `text` (case-insensitive, on
    /// word boundaries). Fallback alignment for API turns without an explicit
    /// side file.
    pub fn keyword_matches(&self, text: &str) -> Vec<usize> {
        let hay = format!(" {} ", word_normalize(text));
        self.descriptions
            .iter()
            .enumerate()
            .filter(|(_, d)| {
                let needle = word_normalize(&d.name_words());
                !needle.is_empty() && hay.contains(&format!(" {needle} "))
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// A scorer candidate `x`: a knowledge snippet or a schema description, by
/// index into its collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Candidate {
    Snippet(usize),
    Schema(usize),
}

impl Candidate {
    pub fn text(self, kb: &KnowledgeBase, schema: &SchemaCatalog) -> String {
        match self {
            Candidate::Snippet(i) => snippet_text(kb.get(i)),
            Candidate::Schema(i) => schema.get(i).text(),
        }
    }
}

/// Lowercases, maps non-alphanumerics to spaces and squashes whitespace.
pub fn word_normalize(text: &str) -> String {
    let mapped: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    squash_whitespace(&mapped)
}

/// Gold annotation for one detection instance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TurnLabel {
    pub target: bool,
    pub knowledge: Vec<SnippetKey>,
    pub response: Option<String>,
    /// Explicit schema alignment for API turns, if supplied.
    pub api_positives: Option<Vec<SchemaRef>>,
}

impl TurnLabel {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("target".into(), Value::Bool(self.target));
        if self.target {
            m.insert(
                "knowledge".into(),
                serde_json::to_value(&self.knowledge).expect("keys serialize"),
            );
            m.insert(
                "response".into(),
                Value::String(self.response.clone().unwrap_or_default()),
            );
        }
        Value::Object(m)
    }
}

/// Reads a logs file. Errors name the offending dialogue and turn.
pub fn load_logs(path: &Path) -> Result<Vec<Vec<Utterance>>, CorpusError> {
    parse_logs(&read_json(path)?)
}

pub fn parse_logs(v: &Value) -> Result<Vec<Vec<Utterance>>, CorpusError> {
    let schema = |dialogue, turn, message: &str| CorpusError::Schema {
        dialogue,
        turn,
        message: message.to_string(),
    };
    let dialogues = v.as_array().ok_or_else(|| schema(0, None, "logs must be an array"))?;
    let mut out = Vec::with_capacity(dialogues.len());
    for (d, dialogue) in dialogues.iter().enumerate() {
        let turns = dialogue
            .as_array()
            .ok_or_else(|| schema(d, None, "dialogue must be an array"))?;
        let mut utts = Vec::with_capacity(turns.len());
        for (t, turn) in turns.iter().enumerate() {
            let tag = turn
                .get("speaker")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(d, Some(t), "missing speaker"))?;
            let speaker = Speaker::from_tag(tag)
                .ok_or_else(|| schema(d, Some(t), &format!("unknown speaker tag {tag:?}")))?;
            let text = turn
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(d, Some(t), "missing text"))?;
            let u = Utterance::new(speaker, text).map_err(|_| schema(d, Some(t), "empty text"))?;
            utts.push(u);
        }
        out.push(utts);
    }
    Ok(out)
}

pub fn load_knowledge(path: &Path) -> Result<KnowledgeBase, CorpusError> {
    KnowledgeBase::from_json(&read_json(path)?)
}

pub fn load_schema(path: &Path) -> Result<SchemaCatalog, CorpusError> {
    SchemaCatalog::from_json(&read_json(path)?)
}

/// Reads a labels file and checks every gold reference against `kb`.
pub fn load_labels(path: &Path, kb: &KnowledgeBase) -> Result<Vec<TurnLabel>, CorpusError> {
    parse_labels(&read_json(path)?, kb)
}

pub fn parse_labels(v: &Value, kb: &KnowledgeBase) -> Result<Vec<TurnLabel>, CorpusError> {
    let schema = |i, message: String| CorpusError::Schema {
        dialogue: i,
        turn: None,
        message,
    };
    let items = v
        .as_array()
        .ok_or_else(|| schema(0, "labels must be an array".into()))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let target = item
            .get("target")
            .and_then(Value::as_bool)
            .ok_or_else(|| schema(i, "missing boolean target".into()))?;
        let knowledge: Vec<SnippetKey> = match item.get("knowledge") {
            None | Some(Value::Null) => Vec::new(),
            Some(k) => serde_json::from_value(k.clone()).map_err(|e| schema(i, e.to_string()))?,
        };
        let response = match item.get("response") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(schema(i, "response must be a string".into())),
        };
        if target && (knowledge.is_empty() || response.is_none()) {
            return Err(schema(
                i,
                "knowledge-seeking label needs knowledge and response".into(),
            ));
        }
        if !target && (!knowledge.is_empty() || response.is_some()) {
            return Err(schema(
                i,
                "non-target label must not carry knowledge or response".into(),
            ));
        }
        for key in &knowledge {
            if kb.resolve(key).is_none() {
                return Err(CorpusError::UnresolvedSnippet {
                    instance: i,
                    key: key.clone(),
                });
            }
        }
        out.push(TurnLabel {
            target,
            knowledge,
            response,
            api_positives: None,
        });
    }
    Ok(out)
}

pub fn load_api_positives(
    path: &Path,
    catalog: &SchemaCatalog,
) -> Result<Vec<Option<Vec<SchemaRef>>>, CorpusError> {
    let v = read_json(path)?;
    let items: Vec<Option<Vec<SchemaRef>>> =
        serde_json::from_value(v).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    for (i, refs) in items.iter().enumerate() {
        for r in refs.iter().flatten() {
            if catalog.resolve(r).is_none() {
                return Err(CorpusError::UnresolvedSchema {
                    instance: i,
                    reference: r.to_string(),
                });
            }
        }
    }
    Ok(items)
}

/// Paths of one dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub logs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub knowledge: PathBuf,
    pub schema: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_positives: Option<PathBuf>,
}

impl DataPaths {
    /// Standard file names inside a split directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            logs: dir.join("logs.json"),
            labels: Some(dir.join("labels.json")),
            knowledge: dir.join("knowledge.json"),
            schema: dir.join("schema.json"),
            api_positives: Some(dir.join("api_positives.json")),
        }
    }
}

/// A loaded split: contexts, optional labels, knowledge base and schema.
/// Immutable after loading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub contexts: Vec<DialogueContext>,
    pub labels: Option<Vec<TurnLabel>>,
    pub knowledge: KnowledgeBase,
    pub schema: SchemaCatalog,
}

impl Dataset {
    pub fn load(paths: &DataPaths) -> Result<Self, CorpusError> {
        let logs = load_logs(&paths.logs)?;
        let contexts = logs
            .into_iter()
            .enumerate()
            .map(|(d, utts)| {
                DialogueContext::new(utts).map_err(|e| CorpusError::Schema {
                    dialogue: d,
                    turn: None,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let knowledge = load_knowledge(&paths.knowledge)?;
        let schema = load_schema(&paths.schema)?;
        let labels = match &paths.labels {
            Some(p) => {
                let mut labels = load_labels(p, &knowledge)?;
                if labels.len() != contexts.len() {
                    return Err(CorpusError::LengthMismatch {
                        what: "labels",
                        expected: contexts.len(),
                        found: labels.len(),
                    });
                }
                if let Some(ap) = &paths.api_positives {
                    let side = load_api_positives(ap, &schema)?;
                    if side.len() != contexts.len() {
                        return Err(CorpusError::LengthMismatch {
                            what: "api positives",
                            expected: contexts.len(),
                            found: side.len(),
                        });
                    }
                    for (l, s) in labels.iter_mut().zip(side) {
                        l.api_positives = s;
                    }
                }
                Some(labels)
            }
            None => None,
        };
        Ok(Self {
            contexts,
            labels,
            knowledge,
            schema,
        })
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Gold snippet indices of instance `i` (empty for API turns or when
    /// unlabeled).
    pub fn gold_snippets(&self, i: usize) -> Vec<usize> {
        self.labels
            .as_ref()
            .map(|ls| {
                ls[i]
                    .knowledge
                    .iter()
                    .filter_map(|k| self.knowledge.resolve(k))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Schema positives for API instance `i`: the explicit alignment when
    /// present, else keyword matches against the last user utterance.
    pub fn api_positives(&self, i: usize) -> Vec<usize> {
        let explicit = self
            .labels
            .as_ref()
            .and_then(|ls| ls[i].api_positives.as_ref());
        match explicit {
            Some(refs) => refs.iter().filter_map(|r| self.schema.resolve(r)).collect(),
            None => self
                .schema
                .keyword_matches(self.contexts[i].last_user().text()),
        }
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, v: Value) -> PathBuf {
        let p = dir.join(name);
        write_json(&p, &v).unwrap();
        p
    }

    #[test]
    fn minimal_logs_map_speakers() {
        let logs = parse_logs(&json!([[{"speaker": "U", "text": "hi"}]])).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].len(), 1);
        assert_eq!(logs[0][0].speaker(), Speaker::User);
    }

    #[test]
    fn unknown_speaker_reports_position() {
        let err = parse_logs(&json!([[{"speaker": "X", "text": "hi"}]])).unwrap_err();
        match err {
            CorpusError::Schema { dialogue, turn, .. } => {
                assert_eq!((dialogue, turn), (0, Some(0)));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_logs(&json!([[{"speaker": "U", "text": "a"}], [{"speaker": "S"}]]))
            .unwrap_err();
        assert!(matches!(err, CorpusError::Schema { dialogue: 1, turn: Some(0), .. }));
    }

    #[test]
    fn dialogue_lengths_preserved() {
        let turn = |s: &str| json!({"speaker": s, "text": "x"});
        let v = json!([
            [turn("U"), turn("S"), turn("U")],
            [turn("U"), turn("S"), turn("U"), turn("S"), turn("U")]
        ]);
        let lens: Vec<usize> = parse_logs(&v).unwrap().iter().map(Vec::len).collect();
        assert_eq!(lens, vec![3, 5]);
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs.json");
        fs::write(&p, "[[{").unwrap();
        assert!(matches!(load_logs(&p), Err(CorpusError::Parse { .. })));
    }

    #[test]
    fn minimal_knowledge_and_star_entity() {
        let kb = KnowledgeBase::from_json(&json!({
            "hotel": {"1": {"name": "A", "docs": {"0": {"title": "q", "body": "a"}}}},
            "train": {"*": {"name": null, "docs": {"3": {"title": "q2", "body": "b"}}}}
        }))
        .unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.get(0).domain, "hotel");
        assert_eq!(kb.get(0).entity_name.as_deref(), Some("A"));
        assert_eq!(kb.get(1).entity_id, None);
        assert_eq!(kb.get(1).entity_name, None);
        assert_eq!(snippet_text(kb.get(1)), "train: q2 b");
    }

    fn grid_kb() -> KnowledgeBase {
        let mut root = Map::new();
        for d in ["hotel", "restaurant"] {
            let mut ents = Map::new();
            for e in 0..2 {
                let docs: Map<String, Value> = (0..3)
                    .map(|k| (k.to_string(), json!({"title": format!("t{k}"), "body": "b"})))
                    .collect();
                ents.insert(e.to_string(), json!({"name": format!("{d} {e}"), "docs": docs}));
            }
            root.insert(d.to_string(), Value::Object(ents));
        }
        KnowledgeBase::from_json(&Value::Object(root)).unwrap()
    }

    #[test]
    fn grid_counts_and_index_partition() {
        let kb = grid_kb();
        assert_eq!(kb.len(), 12);
        let sizes: Vec<usize> = kb.domain_index().values().map(Vec::len).collect();
        assert_eq!(sizes, vec![6, 6]);
        let mut all: Vec<usize> = kb.domain_index().values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        for ((domain, _), ids) in kb.entity_index() {
            assert!(ids.iter().all(|i| kb.in_domain(domain).contains(i)));
        }
    }

    #[test]
    fn knowledge_roundtrip() {
        let kb = grid_kb();
        let back = KnowledgeBase::from_json(&kb.to_json()).unwrap();
        assert_eq!(kb.snippets(), back.snippets());
    }

    #[test]
    fn duplicate_snippet_rejected() {
        let s = KnowledgeSnippet {
            domain: "hotel".into(),
            entity_id: Some("1".into()),
            entity_name: Some("A".into()),
            doc_id: "0".into(),
            title: "q".into(),
            body: "a".into(),
        };
        let err = KnowledgeBase::new(vec![s.clone(), s]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateKey(_)));
    }

    #[test]
    fn snippet_text_format() {
        let s = KnowledgeSnippet {
            domain: "hotel".into(),
            entity_id: Some("1".into()),
            entity_name: Some("A".into()),
            doc_id: "0".into(),
            title: "Fee?".into(),
            body: " Yes.".into(),
        };
        assert_eq!(snippet_text(&s), "A: Fee? Yes.");
        assert_eq!(snippet_text(&s), snippet_text(&s));
        let mut t = s.clone();
        t.entity_name = None;
        t.domain = "train".into();
        assert!(snippet_text(&t).starts_with("train: "));
    }

    #[test]
    fn schema_counts_and_errors() {
        let cat = SchemaCatalog::from_json(&json!([{
            "service": "hotel",
            "slots": [{"name": "area", "description": "area of the hotel"},
                      {"name": "price_range", "description": "price budget"}],
            "intents": [{"name": "book_hotel", "description": "book a room"}]
        }]))
        .unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.get(1).text(), "hotel price range: price budget");
        assert!(matches!(
            SchemaCatalog::from_json(&json!([])),
            Err(CorpusError::EmptyCatalog)
        ));
        let dup = json!([{"service": "hotel",
            "slots": [{"name": "area", "description": "x"}, {"name": "area", "description": "y"}]}]);
        assert!(matches!(
            SchemaCatalog::from_json(&dup),
            Err(CorpusError::DuplicateKey(_))
        ));
        let back = SchemaCatalog::from_json(&cat.to_json()).unwrap();
        assert_eq!(back, cat);
    }

    #[test]
    fn keyword_fallback_matches_slot_names() {
        let cat = SchemaCatalog::from_json(&json!([{
            "service": "hotel",
            "slots": [{"name": "area", "description": "a"}, {"name": "price_range", "description": "p"}],
            "intents": [{"name": "book_hotel", "description": "b"}]
        }]))
        .unwrap();
        assert_eq!(cat.keyword_matches("Which AREA is it in? And the price range?"), vec![0, 1]);
        assert!(cat.keyword_matches("areas nearby").is_empty());
    }

    #[test]
    fn dataset_validates_labels_against_knowledge() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let kb = grid_kb();
        write(d, "knowledge.json", kb.to_json());
        write(d, "schema.json", json!([{"service": "hotel", "slots": [{"name": "area", "description": "area"}]}]));
        write(d, "logs.json", json!([[{"speaker": "U", "text": "parking?"}], [{"speaker": "U", "text": "the area please"}]]));
        write(d, "labels.json", json!([
            {"target": true, "knowledge": [{"domain": "hotel", "entity_id": 1, "doc_id": 2}], "response": "yes"},
            {"target": false}
        ]));
        let mut paths = DataPaths::in_dir(d);
        paths.api_positives = None;
        let ds = Dataset::load(&paths).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.gold_snippets(0), vec![kb.resolve(&SnippetKey {
            domain: "hotel".into(), entity_id: Some("1".into()), doc_id: "2".into()
        }).unwrap()]);
        assert_eq!(ds.api_positives(1), vec![0]);

        write(d, "labels.json", json!([
            {"target": true, "knowledge": [{"domain": "hotel", "entity_id": 9, "doc_id": 2}], "response": "yes"},
            {"target": false}
        ]));
        assert!(matches!(
            Dataset::load(&paths),
            Err(CorpusError::UnresolvedSnippet { instance: 0, .. })
        ));
    }

    #[test]
    fn context_must_end_with_user() {
        let u = Utterance::user("hi").unwrap();
        let s = Utterance::system("hello").unwrap();
        assert!(DialogueContext::new(vec![u.clone(), s.clone()]).is_err());
        let ctx = DialogueContext::new(vec![u.clone(), s, u]).unwrap();
        assert_eq!(ctx.turn_index(), 3);
        assert!(Utterance::user("   ").is_err());
    }
}
