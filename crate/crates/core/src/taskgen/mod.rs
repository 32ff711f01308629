//! Question templates, reasoning-path sampling and dataset construction.
//!
//! A simple template asks for one relation of one slot entity. A complex
//! template chains two or three such steps across at least two graphs and
//! reads as one nested question whose decomposition is the chain itself.

mod dataset;
mod sample;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::kgsynth::{EntityId, EntityKind, KgSuite, KnowledgeGraph, Relation};

pub use dataset::{
    build_dataset, load_examples, read_examples, render_catalog, render_examples, save_examples, DatasetConfig,
    DatasetSplits,
};
pub use sample::{realize, sample_reasoning_path, PathHop, ReasoningPath, Walker};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("sampling failed after {attempts} attempts: {reason}")]
    Sampling { attempts: usize, reason: String },
    #[error("no complex template realizes the chain {0}")]
    NoTemplate(String),
    #[error("cannot build dataset: {0}")]
    Infeasible(String),
    #[error("cannot route `{question}`: {reason}")]
    Routing { question: String, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Kg(#[from] crate::kgsynth::KgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One traversal step: a relation read forwards, or an inverse-functional
/// relation read backwards (tail to head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Step {
    pub relation: Relation,
    pub inverse: bool,
}

impl Step {
    pub fn forward(relation: Relation) -> Self {
        Self { relation, inverse: false }
    }

    pub fn backward(relation: Relation) -> Self {
        Self { relation, inverse: true }
    }

    /// Every step a template may ask about: all relations plus the inverse
    /// readings that are single-valued.
    pub fn all() -> Vec<Step> {
        let mut out: Vec<Step> = Relation::ALL.into_iter().map(Step::forward).collect();
        out.extend(Relation::ALL.into_iter().filter(|r| r.is_inverse_functional()).map(Step::backward));
        out
    }

    pub fn name(self) -> String {
        if self.inverse {
            format!("{}_of", self.relation)
        } else {
            self.relation.to_string()
        }
    }

    pub fn parse(name: &str) -> Option<Step> {
        Step::all().into_iter().find(|s| s.name() == name)
    }

    pub fn from_kind(self) -> EntityKind {
        if self.inverse {
            self.relation.tail_kind()
        } else {
            self.relation.head_kind()
        }
    }

    pub fn to_kind(self) -> EntityKind {
        if self.inverse {
            self.relation.head_kind()
        } else {
            self.relation.tail_kind()
        }
    }

    /// The graph that stores the underlying triple.
    pub fn shard(self) -> usize {
        self.relation.shard()
    }

    /// Targets reached from `entity` in `kg`.
    pub fn targets(self, kg: &KnowledgeGraph, entity: EntityId) -> Vec<EntityId> {
        if self.inverse {
            kg.triples().iter().filter(|t| t.relation == self.relation && t.tail == entity).map(|t| t.head).collect()
        } else {
            kg.tails(entity, self.relation).collect()
        }
    }

    fn question(self) -> &'static str {
        use Relation::*;
        match (self.relation, self.inverse) {
            (Height, _) => "How tall is [PersonName] ?",
            (Weight, _) => "How much does [PersonName] weigh ?",
            (Birthday, _) => "When was [PersonName] born ?",
            (Gender, _) => "What is the gender of [PersonName] ?",
            (Birthplace, _) => "Which city was [PersonName] born in ?",
            (LiveIn, _) => "Which city does [PersonName] live in ?",
            (WorkIn, _) => "Which company does [PersonName] work in ?",
            (AnnualIncome, _) => "What is the annual income of [PersonName] ?",
            (EstablishDate, _) => "When was [CompanyName] established ?",
            (NumberOfEmployees, _) => "How many employees does [CompanyName] have ?",
            (Ceo, _) => "Who is the CEO of [CompanyName] ?",
            (Founder, _) => "Who founded [CompanyName] ?",
            (MainBusiness, _) => "What is the main business of [CompanyName] ?",
            (LocateIn, _) => "Which city is [CompanyName] located in ?",
            (HasServiceIn, _) => "Which city does [CompanyName] have service in ?",
            (Chairman, _) => "Who is the chairman of [CompanyName] ?",
            (MarketValue, _) => "What is the market value of [CompanyName] ?",
            (Area, _) => "What is the area of [CityName] ?",
            (Population, _) => "What is the population of [CityName] ?",
            (Mayor, false) => "Who is the mayor of [CityName] ?",
            (Mayor, true) => "Which city is [PersonName] the mayor of ?",
            (LargestCompany, false) => "What is the largest company in [CityName] ?",
            (LargestCompany, true) => "Which city is [CompanyName] the largest company in ?",
            (ContainedBy, _) => "Which state is [CityName] in ?",
        }
    }

    /// Noun phrase naming this step's target, with `{}` for the source.
    /// Only steps that lead to a named entity with further relations have one.
    fn noun_phrase(self) -> Option<&'static str> {
        use Relation::*;
        Some(match (self.relation, self.inverse) {
            (Birthplace, _) => "the city where {} was born",
            (LiveIn, _) => "the city where {} lives",
            (WorkIn, _) => "the company where {} works",
            (Ceo, _) => "the CEO of {}",
            (Founder, _) => "the founder of {}",
            (Chairman, _) => "the chairman of {}",
            (LocateIn, _) => "the city where {} is located",
            (HasServiceIn, _) => "the city where {} has service",
            (Mayor, false) => "the mayor of {}",
            (Mayor, true) => "the city whose mayor is {}",
            (LargestCompany, false) => "the largest company in {}",
            (LargestCompany, true) => "the city whose largest company is {}",
            _ => return None,
        })
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn placeholder(kind: EntityKind) -> String {
    format!("[{kind}]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimpleTemplate {
    pub id: String,
    pub step: Step,
    pub text: String,
}

impl SimpleTemplate {
    fn new(step: Step) -> Self {
        Self { id: format!("s_{}", step.name()), step, text: step.question().to_string() }
    }

    pub fn step(&self) -> Step {
        self.step
    }

    /// Replaces the slot placeholder with `slot`.
    pub fn fill(&self, slot: &str) -> String {
        self.text.replace(&placeholder(self.step().from_kind()), slot)
    }

    /// Inverse of [`fill`](Self::fill): the slot if `text` was produced by this template.
    pub fn match_slot<'a>(&self, text: &'a str) -> Option<&'a str> {
        let ph = placeholder(self.step().from_kind());
        let (prefix, suffix) = self.text.split_once(&ph)?;
        let slot = text.strip_prefix(prefix)?.strip_suffix(suffix)?;
        (!slot.is_empty() && !slot.contains(char::is_whitespace)).then_some(slot)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexTemplate {
    pub id: String,
    pub chain: Vec<Step>,
    pub text: String,
}

impl ComplexTemplate {
    fn new(chain: Vec<Step>) -> Option<Self> {
        let mut phrase = placeholder(chain[0].from_kind());
        for step in &chain[..chain.len() - 1] {
            phrase = step.noun_phrase()?.replace("{}", &phrase);
        }
        let last = chain[chain.len() - 1];
        let text = last.question().replace(&placeholder(last.from_kind()), &phrase).replace(" ?", "?");
        let id = format!("c_{}", chain.iter().map(|s| s.name()).collect::<Vec<_>>().join("__"));
        Some(Self { id, chain, text })
    }

    pub fn hops(&self) -> usize {
        self.chain.len()
    }

    pub fn fill(&self, anchor: &str) -> String {
        self.text.replace(&placeholder(self.chain[0].from_kind()), anchor)
    }
}

/// All simple templates (the moderator's action list, in order) and all
/// complex templates, both derived from the relation schemas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    pub simple: Vec<SimpleTemplate>,
    pub complex: Vec<ComplexTemplate>,
}

fn chain_ok(chain: &[Step]) -> bool {
    let connected = chain.windows(2).all(|w| w[0].to_kind() == w[1].from_kind());
    let no_backtrack = chain.windows(2).all(|w| !(w[0].relation == w[1].relation && w[0].inverse != w[1].inverse));
    let shards: BTreeSet<usize> = chain.iter().map(|s| s.shard()).collect();
    connected && no_backtrack && shards.len() >= 2
}

/// Builds the catalog for the given graph schemas (indices 1..=3).
///
/// Complex chains have 2 or 3 steps, only traverse single-valued steps,
/// never undo the previous step, and touch at least two graphs.
pub fn build_catalog(schemas: &[usize]) -> Catalog {
    let steps: Vec<Step> = Step::all().into_iter().filter(|s| schemas.contains(&s.shard())).collect();
    let simple = steps.iter().copied().map(SimpleTemplate::new).collect();
    let mut complex = Vec::new();
    let mut chains: Vec<Vec<Step>> = steps.iter().map(|s| vec![*s]).collect();
    for _ in 1..3 {
        let mut next = Vec::new();
        for c in &chains {
            for s in &steps {
                let mut longer = c.clone();
                longer.push(*s);
                if longer.windows(2).all(|w| w[0].to_kind() == w[1].from_kind()) {
                    if chain_ok(&longer) {
                        if let Some(t) = ComplexTemplate::new(longer.clone()) {
                            complex.push(t);
                        }
                    }
                    next.push(longer);
                }
            }
        }
        chains = next;
    }
    complex.sort_by(|a: &ComplexTemplate, b| (a.hops(), &a.id).cmp(&(b.hops(), &b.id)));
    Catalog { simple, complex }
}

impl Catalog {
    pub fn simple_by_id(&self, id: &str) -> Option<&SimpleTemplate> {
        self.simple.iter().find(|t| t.id == id)
    }

    pub fn simple_index(&self, step: Step) -> Option<usize> {
        self.simple.iter().position(|t| t.step() == step)
    }

    pub fn complex_by_id(&self, id: &str) -> Option<&ComplexTemplate> {
        self.complex.iter().find(|t| t.id == id)
    }

    pub fn complex_for(&self, chain: &[Step]) -> Option<&ComplexTemplate> {
        self.complex.iter().find(|t| t.chain == chain)
    }

    /// Recovers (template index, slot) from a filled simple question.
    pub fn parse_simple<'a>(&self, text: &'a str) -> Option<(usize, &'a str)> {
        self.simple.iter().enumerate().find_map(|(i, t)| t.match_slot(text).map(|s| (i, s)))
    }

    /// Every word that appears in any template, placeholders excluded.
    pub fn words(&self) -> BTreeSet<String> {
        let texts = self.simple.iter().map(|t| &t.text).chain(self.complex.iter().map(|t| &t.text));
        texts.flat_map(|t| tokenize(t)).filter(|w| !(w.starts_with('[') && w.ends_with(']'))).collect()
    }
}

/// Whitespace tokenization with a trailing `?` split into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        match w.strip_suffix('?') {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push("?".to_string());
            }
            _ => out.push(w.to_string()),
        }
    }
    out
}

/// The shard whose graph can answer a filled simple question.
pub fn route(question: &str, catalog: &Catalog, suite: &KgSuite) -> Result<usize, TaskError> {
    let fail = |reason: String| TaskError::Routing { question: question.to_string(), reason };
    let (ti, slot) = catalog.parse_simple(question).ok_or_else(|| fail("matches no template".into()))?;
    let step = catalog.simple[ti].step();
    let candidates: Vec<usize> = suite
        .shards
        .iter()
        .filter(|kg| kg.owner() == step.shard())
        .filter(|kg| kg.find(slot).is_some_and(|e| !step.targets(kg, e.id).is_empty()))
        .map(KnowledgeGraph::owner)
        .collect();
    match candidates.as_slice() {
        [one] => Ok(*one),
        [] => Err(fail("no graph holds the fact".into())),
        many => Err(fail(format!("graphs {many:?} all hold it"))),
    }
}

/// Token ids shared by every agent. Reserved tokens come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Reserved tokens: the "I don't know" answer and the dialog separators.
pub const UNK: &str = "UNK";
pub const RESERVED: [&str; 6] = [UNK, "<q>", "<ask>", "<p1>", "<p2>", "<p3>"];

impl Vocabulary {
    pub fn build(catalog: &Catalog, kg: &KnowledgeGraph) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(catalog.words().into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let mut entities: Vec<&str> = kg.entities().map(|e| e.surface.as_str()).collect();
        entities.sort_unstable();
        tokens.extend(entities.into_iter().map(str::to_string));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index = BTreeMap::new();
        let mut kept = Vec::new();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), kept.len());
                kept.push(t);
            }
        }
        Self { tokens: kept, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps each token, failing on the first unknown one.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, String> {
        tokens.iter().map(|t| self.id(t.as_ref()).ok_or_else(|| t.as_ref().to_string())).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// One sub-question of a decomposition: a simple template and its slot.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SubQuestion {
    pub template_id: String,
    pub slot: String,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QAExample {
    pub id: String,
    pub template: String,
    pub question: String,
    pub anchor: String,
    pub answer: String,
    pub hops: usize,
    /// `[head, step, tail]` surfaces, in reading order.
    pub path: Vec<[String; 3]>,
    pub decomposition: Vec<SubQuestion>,
}
