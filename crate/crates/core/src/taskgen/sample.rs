use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Catalog, QAExample, Step, SubQuestion, TaskError};
use crate::kgsynth::{EntityId, EntityKind, KnowledgeGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathHop {
    pub head: EntityId,
    pub step: Step,
    pub tail: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReasoningPath {
    pub hops: Vec<PathHop>,
}

impl ReasoningPath {
    pub fn anchor(&self) -> EntityId {
        self.hops[0].head
    }

    pub fn answer(&self) -> EntityId {
        self.hops[self.hops.len() - 1].tail
    }

    pub fn chain(&self) -> Vec<Step> {
        self.hops.iter().map(|h| h.step).collect()
    }

    pub fn shards(&self) -> BTreeSet<usize> {
        self.hops.iter().map(|h| h.step.shard()).collect()
    }
}

/// Traversal index over a merged graph, restricted to the catalog's steps.
pub struct Walker<'a> {
    kg: &'a KnowledgeGraph,
    out: HashMap<EntityId, Vec<(Step, EntityId)>>,
    anchors: Vec<EntityId>,
    chains: HashSet<Vec<Step>>,
    prefixes: HashSet<Vec<Step>>,
}

impl<'a> Walker<'a> {
    pub fn new(kg: &'a KnowledgeGraph, catalog: &Catalog) -> Self {
        let steps: HashSet<Step> = catalog.simple.iter().map(|t| t.step()).collect();
        let mut out: HashMap<EntityId, Vec<(Step, EntityId)>> = HashMap::new();
        for t in kg.triples() {
            let fwd = Step::forward(t.relation);
            if steps.contains(&fwd) {
                out.entry(t.head).or_default().push((fwd, t.tail));
            }
            let inv = Step::backward(t.relation);
            if steps.contains(&inv) {
                out.entry(t.tail).or_default().push((inv, t.head));
            }
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        let anchors = kg
            .entities()
            .filter(|e| {
                matches!(e.kind, EntityKind::PersonName | EntityKind::CompanyName | EntityKind::CityName)
                    && out.contains_key(&e.id)
            })
            .map(|e| e.id)
            .collect();
        let chains: HashSet<Vec<Step>> = catalog.complex.iter().map(|t| t.chain.clone()).collect();
        let prefixes = chains.iter().flat_map(|c| (1..=c.len()).map(move |k| c[..k].to_vec())).collect();
        Self { kg, out, anchors, chains, prefixes }
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.kg
    }

    pub fn anchors(&self) -> &[EntityId] {
        &self.anchors
    }

    fn dfs<R: Rng>(&self, hops: &mut Vec<PathHop>, seen: &mut Vec<EntityId>, n: usize, rng: &mut R) -> bool {
        if hops.len() == n {
            return self.chains.contains(&hops.iter().map(|h| h.step).collect::<Vec<_>>());
        }
        let here = *seen.last().expect("anchor is seeded");
        let mut next = self.out.get(&here).cloned().unwrap_or_default();
        next.shuffle(rng);
        for (step, target) in next {
            if seen.contains(&target) {
                continue;
            }
            let mut prefix: Vec<Step> = hops.iter().map(|h| h.step).collect();
            prefix.push(step);
            if !self.prefixes.contains(&prefix) {
                continue;
            }
            hops.push(PathHop { head: here, step, tail: target });
            seen.push(target);
            if self.dfs(hops, seen, n, rng) {
                return true;
            }
            hops.pop();
            seen.pop();
        }
        false
    }

    /// Depth-first search from `anchor` with randomized branch order.
    pub fn search_from<R: Rng>(&self, anchor: EntityId, n_hops: usize, rng: &mut R) -> Option<ReasoningPath> {
        let mut hops = Vec::with_capacity(n_hops);
        let mut seen = vec![anchor];
        self.dfs(&mut hops, &mut seen, n_hops, rng).then(|| ReasoningPath { hops })
    }

    /// Every valid path with `n_hops` steps, in a fixed order.
    pub fn enumerate(&self, n_hops: usize) -> Vec<ReasoningPath> {
        let mut out = Vec::new();
        for &a in &self.anchors {
            let mut hops = Vec::new();
            self.collect(&mut hops, &mut vec![a], n_hops, &mut out);
        }
        out
    }

    fn collect(&self, hops: &mut Vec<PathHop>, seen: &mut Vec<EntityId>, n: usize, out: &mut Vec<ReasoningPath>) {
        let chain: Vec<Step> = hops.iter().map(|h| h.step).collect();
        if hops.len() == n {
            if self.chains.contains(&chain) {
                out.push(ReasoningPath { hops: hops.clone() });
            }
            return;
        }
        let here = *seen.last().expect("anchor is seeded");
        for &(step, target) in self.out.get(&here).map_or(&[][..], Vec::as_slice) {
            let mut prefix = chain.clone();
            prefix.push(step);
            if seen.contains(&target) || !self.prefixes.contains(&prefix) {
                continue;
            }
            hops.push(PathHop { head: here, step, tail: target });
            seen.push(target);
            self.collect(hops, seen, n, out);
            hops.pop();
            seen.pop();
        }
    }
}

pub const MAX_ATTEMPTS: usize = 1000;

/// Picks an anchor uniformly among entities with outgoing steps and
/// searches for an `n_hops` chain; retries with fresh anchors on failure.
pub fn sample_reasoning_path<R: Rng>(walker: &Walker, n_hops: usize, rng: &mut R) -> Result<ReasoningPath, TaskError> {
    if !(2..=3).contains(&n_hops) {
        return Err(TaskError::Sampling { attempts: 0, reason: format!("{n_hops}-hop paths are not generated") });
    }
    if walker.anchors.is_empty() {
        return Err(TaskError::Sampling { attempts: 0, reason: "graph has no anchor entities".into() });
    }
    for _ in 0..MAX_ATTEMPTS {
        let anchor = walker.anchors[rng.gen_range(0..walker.anchors.len())];
        if let Some(p) = walker.search_from(anchor, n_hops, rng) {
            return Ok(p);
        }
    }
    Err(TaskError::Sampling { attempts: MAX_ATTEMPTS, reason: format!("no valid {n_hops}-hop chain found") })
}

/// Turns a path into a question, its gold decomposition and its answer.
/// One-hop paths produce the bare simple question.
pub fn realize(path: &ReasoningPath, catalog: &Catalog, kg: &KnowledgeGraph) -> Result<QAExample, TaskError> {
    let chain = path.chain();
    let names = || chain.iter().map(|s| s.name()).collect::<Vec<_>>().join(" -> ");
    let anchor = kg.surface(path.anchor()).to_string();
    let (template, question) = if chain.len() == 1 {
        let t =
            catalog.simple_index(chain[0]).map(|i| &catalog.simple[i]).ok_or_else(|| TaskError::NoTemplate(names()))?;
        (t.id.clone(), t.fill(&anchor))
    } else {
        let t = catalog.complex_for(&chain).ok_or_else(|| TaskError::NoTemplate(names()))?;
        (t.id.clone(), t.fill(&anchor))
    };
    let mut decomposition = Vec::with_capacity(chain.len());
    for h in &path.hops {
        let i = catalog.simple_index(h.step).ok_or_else(|| TaskError::NoTemplate(names()))?;
        decomposition
            .push(SubQuestion { template_id: catalog.simple[i].id.clone(), slot: kg.surface(h.head).to_string() });
    }
    Ok(QAExample {
        id: String::new(),
        template,
        question,
        anchor,
        answer: kg.surface(path.answer()).to_string(),
        hops: chain.len(),
        path: path
            .hops
            .iter()
            .map(|h| [kg.surface(h.head).to_string(), h.step.name(), kg.surface(h.tail).to_string()])
            .collect(),
        decomposition,
    })
}
