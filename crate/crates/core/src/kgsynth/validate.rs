use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDate};

use super::{union, EntityId, KgSuite, KnowledgeGraph, Relation, ValueRanges, NO_COMPANY, ZERO_INCOME};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingRelation { head: String, relation: Relation },
    NotFunctional { head: String, relation: Relation, count: usize },
    NotInverseFunctional { tail: String, relation: Relation, count: usize },
    IncomeWithoutJob { person: String },
    JobWithoutIncome { person: String },
    MayorEmployed { person: String, via: String },
    LargestCompanyElsewhere { city: String, company: String },
    OutOfRange { head: String, relation: Relation, value: String },
    Dangling { relation: Relation, surface: String },
    Inconsistent(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingRelation { head, relation } => {
                write!(f, "{head} has no `{relation}`")
            }
            Violation::NotFunctional { head, relation, count } => {
                write!(f, "{head} has {count} `{relation}` tails")
            }
            Violation::NotInverseFunctional { tail, relation, count } => {
                write!(f, "{tail} is the `{relation}` of {count} heads")
            }
            Violation::IncomeWithoutJob { person } => {
                write!(f, "{person} is jobless but has income")
            }
            Violation::JobWithoutIncome { person } => {
                write!(f, "{person} is employed with zero income")
            }
            Violation::MayorEmployed { person, via } => {
                write!(f, "mayor {person} is employed ({via})")
            }
            Violation::LargestCompanyElsewhere { city, company } => {
                write!(f, "largest company {company} of {city} is not located there")
            }
            Violation::OutOfRange { head, relation, value } => {
                write!(f, "{head} `{relation}` value {value} is out of range")
            }
            Violation::Dangling { relation, surface } => {
                write!(f, "`{relation}` points to {surface}, which no graph describes")
            }
            Violation::Inconsistent(msg) => f.write_str(msg),
        }
    }
}

fn stepped_ok(v: u32, (lo, hi, step): (u32, u32, u32)) -> bool {
    (lo..=hi).contains(&v) && (v - lo) % step == 0
}

fn number(s: &str, prefix: &str, suffix: &str) -> Option<u32> {
    s.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
}

fn year_ok(s: &str, (lo, hi): (i32, i32)) -> bool {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok_and(|d| (lo..=hi).contains(&d.year()))
}

fn in_range(relation: Relation, value: &str, r: &ValueRanges) -> bool {
    let between = |v: Option<u32>, (lo, hi): (u32, u32)| v.is_some_and(|v| (lo..=hi).contains(&v));
    match relation {
        Relation::Height => number(value, "", "cm").is_some_and(|v| stepped_ok(v, r.height_cm)),
        Relation::Weight => between(number(value, "", "kg"), r.weight_kg),
        Relation::Birthday => year_ok(value, r.birth_years),
        Relation::EstablishDate => year_ok(value, r.establish_years),
        Relation::Gender => value == "male" || value == "female",
        Relation::AnnualIncome => {
            value == ZERO_INCOME || number(value, "$", "").is_some_and(|v| stepped_ok(v, r.income))
        }
        Relation::NumberOfEmployees => between(value.parse().ok(), r.employees),
        Relation::Population => value.parse().is_ok_and(|v| stepped_ok(v, r.population)),
        Relation::MarketValue => number(value, "$", "M").is_some_and(|v| stepped_ok(v, r.market_millions)),
        Relation::Area => between(number(value, "", "km2"), r.area_km2),
        _ => true,
    }
}

fn index(kg: &KnowledgeGraph) -> BTreeMap<(EntityId, Relation), Vec<EntityId>> {
    let mut m: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for t in kg.triples() {
        m.entry((t.head, t.relation)).or_default().push(t.tail);
    }
    m
}

/// Exhaustively checks the structural and realism constraints of a suite.
/// An empty result means every check passed.
pub fn validate_constraints(suite: &KgSuite, ranges: &ValueRanges) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = union(suite) {
        out.push(Violation::Inconsistent(e.to_string()));
    }

    let mut heads: [BTreeSet<EntityId>; 4] = Default::default();
    for kg in &suite.shards {
        let owner = kg.owner();
        if owner == 0 {
            out.push(Violation::Inconsistent("a merged graph is not a shard".into()));
            continue;
        }
        let idx = index(kg);
        let kind = Relation::schema(owner)[0].head_kind();
        for e in kg.entities().filter(|e| e.kind == kind && e.surface != NO_COMPANY) {
            heads[owner].insert(e.id);
            for relation in Relation::schema(owner) {
                match idx.get(&(e.id, relation)).map_or(0, Vec::len) {
                    0 => out.push(Violation::MissingRelation { head: e.surface.clone(), relation }),
                    1 => {}
                    count => out.push(Violation::NotFunctional { head: e.surface.clone(), relation, count }),
                }
            }
        }
        let mut inverse: BTreeMap<(EntityId, Relation), usize> = BTreeMap::new();
        for t in kg.triples() {
            if t.relation.is_inverse_functional() {
                *inverse.entry((t.tail, t.relation)).or_default() += 1;
            }
            let tail = kg.entity(t.tail).expect("graph invariant");
            if !tail.kind.is_named() && !in_range(t.relation, &tail.surface, ranges) {
                out.push(Violation::OutOfRange {
                    head: kg.surface(t.head).to_string(),
                    relation: t.relation,
                    value: tail.surface.clone(),
                });
            }
        }
        for ((tail, relation), count) in inverse {
            if count > 1 {
                out.push(Violation::NotInverseFunctional { tail: kg.surface(tail).to_string(), relation, count });
            }
        }
    }

    let [g1, g2, g3] = &suite.shards;
    for t in g1.triples().iter().chain(g2.triples()).chain(g3.triples()) {
        let tail_kind = t.relation.tail_kind();
        let owner = match Relation::ALL.iter().find(|r| r.head_kind() == tail_kind) {
            Some(r) => r.shard(),
            None => continue,
        };
        let surface = suite.shard(t.relation.shard()).surface(t.tail);
        if surface != NO_COMPANY && !heads[owner].contains(&t.tail) {
            out.push(Violation::Dangling { relation: t.relation, surface: surface.to_string() });
        }
    }

    for t in g1.triples().iter().filter(|t| t.relation == Relation::WorkIn) {
        let jobless = g1.surface(t.tail) == NO_COMPANY;
        let person = g1.surface(t.head).to_string();
        for income in g1.tails(t.head, Relation::AnnualIncome) {
            let zero = g1.surface(income) == ZERO_INCOME;
            if jobless && !zero {
                out.push(Violation::IncomeWithoutJob { person: person.clone() });
            } else if !jobless && zero {
                out.push(Violation::JobWithoutIncome { person: person.clone() });
            }
        }
    }

    let mayors: BTreeSet<EntityId> =
        g3.triples().iter().filter(|t| t.relation == Relation::Mayor).map(|t| t.tail).collect();
    for &m in &mayors {
        let person = g3.surface(m).to_string();
        for c in g1.tails(m, Relation::WorkIn) {
            if g1.surface(c) != NO_COMPANY {
                out.push(Violation::MayorEmployed {
                    person: person.clone(),
                    via: format!("work_in {}", g1.surface(c)),
                });
            }
        }
    }
    for t in g2.triples() {
        if matches!(t.relation, Relation::Ceo | Relation::Chairman) && mayors.contains(&t.tail) {
            out.push(Violation::MayorEmployed {
                person: g2.surface(t.tail).to_string(),
                via: format!("{} of {}", t.relation, g2.surface(t.head)),
            });
        }
    }

    for t in g3.triples().iter().filter(|t| t.relation == Relation::LargestCompany) {
        if !g2.tails(t.tail, Relation::LocateIn).any(|c| c == t.head) {
            out.push(Violation::LargestCompanyElsewhere {
                city: g3.surface(t.head).to_string(),
                company: g3.surface(t.tail).to_string(),
            });
        }
    }
    out
}
