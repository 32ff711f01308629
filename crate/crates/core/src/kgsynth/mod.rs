//! Synthetic person/company/city knowledge graphs, one per panelist.
//!
//! Entity ids are global: a city referenced by a person's `birthplace` in
//! shard 1 has the same id as the city heading `mayor` triples in shard 3.
//! Each shard keeps only the entities its triples touch.

mod generate;
mod io;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

pub use generate::{generate_kg_suite, KgConfig, ValueRanges};
pub use io::{load_kg, parse_kg, render_kg, save_kg};
pub use validate::{validate_constraints, Violation};

pub type EntityId = u32;

/// Surface of the work-place sentinel used by jobless persons.
pub const NO_COMPANY: &str = "NoCompany";
/// Surface of the income value carried by jobless persons.
pub const ZERO_INCOME: &str = "$0";

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("entity id {id} is `{first}` in one graph and `{second}` in another")]
    IdCollision { id: EntityId, first: String, second: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    PersonName,
    CompanyName,
    CityName,
    StateName,
    BusinessName,
    Gender,
    Height,
    Weight,
    Date,
    AnnualIncome,
    Number,
    Area,
    Market,
}

impl EntityKind {
    pub const ALL: [EntityKind; 13] = [
        EntityKind::PersonName,
        EntityKind::CompanyName,
        EntityKind::CityName,
        EntityKind::StateName,
        EntityKind::BusinessName,
        EntityKind::Gender,
        EntityKind::Height,
        EntityKind::Weight,
        EntityKind::Date,
        EntityKind::AnnualIncome,
        EntityKind::Number,
        EntityKind::Area,
        EntityKind::Market,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::PersonName => "PersonName",
            EntityKind::CompanyName => "CompanyName",
            EntityKind::CityName => "CityName",
            EntityKind::StateName => "StateName",
            EntityKind::BusinessName => "BusinessName",
            EntityKind::Gender => "gender_value",
            EntityKind::Height => "height_value",
            EntityKind::Weight => "weight_value",
            EntityKind::Date => "date_value",
            EntityKind::AnnualIncome => "annual_income_value",
            EntityKind::Number => "number_value",
            EntityKind::Area => "area_value",
            EntityKind::Market => "market_value",
        }
    }

    /// Named entities can head relations; value kinds are always leaves.
    pub fn is_named(self) -> bool {
        matches!(
            self,
            EntityKind::PersonName
                | EntityKind::CompanyName
                | EntityKind::CityName
                | EntityKind::StateName
                | EntityKind::BusinessName
        )
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| KgError::Invalid(format!("unknown entity kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    Height,
    Weight,
    Birthday,
    Gender,
    Birthplace,
    LiveIn,
    WorkIn,
    AnnualIncome,
    EstablishDate,
    NumberOfEmployees,
    Ceo,
    Founder,
    MainBusiness,
    LocateIn,
    HasServiceIn,
    Chairman,
    MarketValue,
    Area,
    Population,
    Mayor,
    LargestCompany,
    ContainedBy,
}

impl Relation {
    pub const ALL: [Relation; 22] = [
        Relation::Height,
        Relation::Weight,
        Relation::Birthday,
        Relation::Gender,
        Relation::Birthplace,
        Relation::LiveIn,
        Relation::WorkIn,
        Relation::AnnualIncome,
        Relation::EstablishDate,
        Relation::NumberOfEmployees,
        Relation::Ceo,
        Relation::Founder,
        Relation::MainBusiness,
        Relation::LocateIn,
        Relation::HasServiceIn,
        Relation::Chairman,
        Relation::MarketValue,
        Relation::Area,
        Relation::Population,
        Relation::Mayor,
        Relation::LargestCompany,
        Relation::ContainedBy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Height => "height",
            Relation::Weight => "weight",
            Relation::Birthday => "birthday",
            Relation::Gender => "gender",
            Relation::Birthplace => "birthplace",
            Relation::LiveIn => "live_in",
            Relation::WorkIn => "work_in",
            Relation::AnnualIncome => "annual_income",
            Relation::EstablishDate => "establish_date",
            Relation::NumberOfEmployees => "number_of_employees",
            Relation::Ceo => "ceo",
            Relation::Founder => "founder",
            Relation::MainBusiness => "main_business",
            Relation::LocateIn => "locate_in",
            Relation::HasServiceIn => "has_service_in",
            Relation::Chairman => "chairman",
            Relation::MarketValue => "market_value",
            Relation::Area => "area",
            Relation::Population => "population",
            Relation::Mayor => "mayor",
            Relation::LargestCompany => "largest_company",
            Relation::ContainedBy => "contained_by",
        }
    }

    /// Index (1, 2 or 3) of the graph whose schema holds this relation.
    pub fn shard(self) -> usize {
        use Relation::*;
        match self {
            Height | Weight | Birthday | Gender | Birthplace | LiveIn | WorkIn | AnnualIncome => 1,
            EstablishDate | NumberOfEmployees | Ceo | Founder | MainBusiness | LocateIn | HasServiceIn | Chairman
            | MarketValue => 2,
            Area | Population | Mayor | LargestCompany | ContainedBy => 3,
        }
    }

    pub fn head_kind(self) -> EntityKind {
        match self.shard() {
            1 => EntityKind::PersonName,
            2 => EntityKind::CompanyName,
            _ => EntityKind::CityName,
        }
    }

    pub fn tail_kind(self) -> EntityKind {
        use Relation::*;
        match self {
            Height => EntityKind::Height,
            Weight => EntityKind::Weight,
            Birthday | EstablishDate => EntityKind::Date,
            Gender => EntityKind::Gender,
            Birthplace | LiveIn | LocateIn | HasServiceIn => EntityKind::CityName,
            WorkIn | LargestCompany => EntityKind::CompanyName,
            AnnualIncome => EntityKind::AnnualIncome,
            NumberOfEmployees | Population => EntityKind::Number,
            Ceo | Founder | Chairman | Mayor => EntityKind::PersonName,
            MainBusiness => EntityKind::BusinessName,
            MarketValue => EntityKind::Market,
            Area => EntityKind::Area,
            ContainedBy => EntityKind::StateName,
        }
    }

    /// Relations whose tail is unique per head as well as per tail, so the
    /// reversed reading ("which city is X the mayor of") is single-valued too.
    pub fn is_inverse_functional(self) -> bool {
        matches!(self, Relation::Mayor | Relation::LargestCompany)
    }

    pub fn schema(shard: usize) -> Vec<Relation> {
        Relation::ALL.into_iter().filter(|r| r.shard() == shard).collect()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| KgError::Invalid(format!("unknown relation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entity {
    pub id: EntityId,
    pub kind: EntityKind,
    pub surface: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: Relation,
    pub tail: EntityId,
}

/// One panelist's graph (`owner` 1..=3), or the union of all three (`owner` 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    owner: usize,
    entities: BTreeMap<EntityId, Entity>,
    triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Checks that every triple references known entities, that relations
    /// belong to the owner's schema and that head/tail kinds match it.
    /// Triples are stored sorted by (head, relation, tail).
    pub fn new(owner: usize, entities: Vec<Entity>, mut triples: Vec<Triple>) -> Result<Self, KgError> {
        if owner > 3 {
            return Err(KgError::Invalid(format!("owner must be 0..=3, got {owner}")));
        }
        let mut map = BTreeMap::new();
        let mut surfaces = BTreeSet::new();
        for e in entities {
            if e.surface.is_empty() || e.surface.contains(char::is_whitespace) {
                return Err(KgError::Invalid(format!("entity {} has an unusable surface {:?}", e.id, e.surface)));
            }
            if e.surface == "UNK" {
                return Err(KgError::Invalid("`UNK` is reserved".into()));
            }
            if !surfaces.insert(e.surface.clone()) {
                return Err(KgError::Invalid(format!("surface `{}` appears twice", e.surface)));
            }
            let id = e.id;
            if map.insert(id, e).is_some() {
                return Err(KgError::Invalid(format!("entity id {id} appears twice")));
            }
        }
        for t in &triples {
            if owner != 0 && t.relation.shard() != owner {
                return Err(KgError::Invalid(format!(
                    "relation `{}` is not in the schema of graph {owner}",
                    t.relation
                )));
            }
            for (id, want) in [(t.head, t.relation.head_kind()), (t.tail, t.relation.tail_kind())] {
                let e =
                    map.get(&id).ok_or_else(|| KgError::Invalid(format!("triple references unknown entity {id}")))?;
                if e.kind != want {
                    return Err(KgError::Invalid(format!(
                        "`{}` has kind {} but `{}` expects {}",
                        e.surface, e.kind, t.relation, want
                    )));
                }
            }
        }
        triples.sort();
        triples.dedup();
        Ok(Self { owner, entities: map, triples })
    }

    pub fn empty(owner: usize) -> Self {
        Self { owner, entities: BTreeMap::new(), triples: Vec::new() }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(&id)
    }

    pub fn find(&self, surface: &str) -> Option<&Entity> {
        self.entities.values().find(|e| e.surface == surface)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn surface(&self, id: EntityId) -> &str {
        self.entities.get(&id).map_or("?", |e| e.surface.as_str())
    }

    /// Tails of `relation` starting at `head`.
    pub fn tails(&self, head: EntityId, relation: Relation) -> impl Iterator<Item = EntityId> + '_ {
        let start = self.triples.partition_point(|t| (t.head, t.relation) < (head, relation));
        self.triples[start..].iter().take_while(move |t| t.head == head && t.relation == relation).map(|t| t.tail)
    }

    pub fn relation_count(&self, relation: Relation) -> usize {
        self.triples.iter().filter(|t| t.relation == relation).count()
    }
}

/// The three graphs produced by one generation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgSuite {
    pub shards: [KnowledgeGraph; 3],
}

impl KgSuite {
    pub fn shard(&self, index: usize) -> &KnowledgeGraph {
        &self.shards[index - 1]
    }
}

/// Merges the shards into one graph; fails if an id means different
/// entities in different shards.
pub fn union(suite: &KgSuite) -> Result<KnowledgeGraph, KgError> {
    let mut entities: BTreeMap<EntityId, Entity> = BTreeMap::new();
    let mut triples = Vec::new();
    for kg in &suite.shards {
        for e in kg.entities() {
            match entities.get(&e.id) {
                Some(prev) if prev != e => {
                    return Err(KgError::IdCollision {
                        id: e.id,
                        first: format!("{} {}", prev.kind, prev.surface),
                        second: format!("{} {}", e.kind, e.surface),
                    })
                }
                Some(_) => {}
                None => {
                    entities.insert(e.id, e.clone());
                }
            }
        }
        triples.extend_from_slice(kg.triples());
    }
    let expected = triples.len();
    let merged = KnowledgeGraph::new(0, entities.into_values().collect(), triples)?;
    if merged.triples.len() != expected {
        return Err(KgError::Invalid("a triple is owned by more than one graph".into()));
    }
    Ok(merged)
}
