use std::collections::HashMap;

use super::Panelist;
use crate::kgsynth::KnowledgeGraph;
use crate::taskgen::{Catalog, UNK};

/// Exact-lookup panelist: parses the sub-question back into (template, slot)
/// and reads the answer off its own graph.
#[derive(Clone, Debug)]
pub struct OraclePanelist {
    shard: usize,
    catalog: Catalog,
    facts: HashMap<(usize, String), String>,
}

impl OraclePanelist {
    pub fn new(kg: &KnowledgeGraph, catalog: &Catalog) -> Self {
        let mut found: HashMap<(usize, String), Vec<String>> = HashMap::new();
        for (ti, t) in catalog.simple.iter().enumerate() {
            let step = t.step();
            if step.shard() != kg.owner() {
                continue;
            }
            for tr in kg.triples().iter().filter(|tr| tr.relation == step.relation) {
                let (from, to) = if step.inverse { (tr.tail, tr.head) } else { (tr.head, tr.tail) };
                found.entry((ti, kg.surface(from).to_string())).or_default().push(kg.surface(to).to_string());
            }
        }
        // A lookup with several answers is not a fact the panelist can state.
        let facts = found
            .into_iter()
            .filter(|(_, v)| v.len() == 1)
            .map(|(k, mut v)| (k, v.pop().expect("one answer")))
            .collect();
        Self { shard: kg.owner(), catalog: catalog.clone(), facts }
    }

    /// Number of (template, slot) pairs with a known answer.
    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    /// Lookup by template index and slot surface.
    pub fn lookup(&self, template: usize, slot: &str) -> Option<&str> {
        self.facts.get(&(template, slot.to_string())).map(String::as_str)
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

impl Panelist for OraclePanelist {
    fn shard(&self) -> usize {
        self.shard
    }

    fn answer(&self, question: &str) -> String {
        self.catalog.parse_simple(question).and_then(|(ti, slot)| self.lookup(ti, slot)).unwrap_or(UNK).to_string()
    }
}
