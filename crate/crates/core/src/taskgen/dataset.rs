use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{realize, sample_reasoning_path, Catalog, QAExample, TaskError, Walker};
use crate::kgsynth::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Share of three-hop questions; the rest are two-hop.
    pub three_hop_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train: 8000, dev: 1000, test: 1000, three_hop_fraction: 0.5, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn paper_scale() -> Self {
        Self { train: 66_800, dev: 8350, test: 8350, ..Self::default() }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<QAExample>,
    pub dev: Vec<QAExample>,
    pub test: Vec<QAExample>,
}

impl DatasetSplits {
    pub fn all(&self) -> impl Iterator<Item = &QAExample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Samples distinct (complex template, anchor) questions and splits them.
///
/// No (template, anchor) pair occurs twice, so the three splits never share
/// one. Fails when the graph does not offer enough distinct pairs.
pub fn build_dataset(cfg: &DatasetConfig, kg: &KnowledgeGraph, catalog: &Catalog) -> Result<DatasetSplits, TaskError> {
    if !(0.0..=1.0).contains(&cfg.three_hop_fraction) {
        return Err(TaskError::Infeasible(format!("three_hop_fraction {} outside [0, 1]", cfg.three_hop_fraction)));
    }
    let walker = Walker::new(kg, catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n3 = (cfg.total() as f64 * cfg.three_hop_fraction).round() as usize;
    let mut examples = Vec::with_capacity(cfg.total());
    for (hops, wanted) in [(2, cfg.total() - n3), (3, n3)] {
        let mut seen = HashSet::new();
        let budget = 50 * wanted + 1000;
        let mut attempts = 0;
        while seen.len() < wanted {
            if attempts == budget {
                let available: HashSet<_> =
                    walker.enumerate(hops).into_iter().map(|p| (p.chain(), p.anchor())).collect();
                return Err(TaskError::Infeasible(format!(
                    "{wanted} distinct {hops}-hop questions requested; the graph offers {} (template, anchor) pairs \
                     and sampling found {} of them",
                    available.len(),
                    seen.len()
                )));
            }
            attempts += 1;
            let path = sample_reasoning_path(&walker, hops, &mut rng)?;
            if seen.insert((path.chain(), path.anchor())) {
                examples.push(realize(&path, catalog, kg)?);
            }
        }
    }
    examples.shuffle(&mut rng);
    let dev_start = cfg.train;
    let test_start = cfg.train + cfg.dev;
    let label = |split: &str, mut xs: Vec<QAExample>| {
        for (i, x) in xs.iter_mut().enumerate() {
            x.id = format!("{split}-{i:06}");
        }
        xs
    };
    let test = label("test", examples.split_off(test_start));
    let dev = label("dev", examples.split_off(dev_start));
    let train = label("train", examples);
    Ok(DatasetSplits { train, dev, test })
}

/// One JSON object per line.
pub fn render_examples(examples: &[QAExample]) -> String {
    let mut out = String::new();
    for x in examples {
        out.push_str(&serde_json::to_string(x).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn read_examples(text: &str) -> Result<Vec<QAExample>, TaskError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TaskError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn save_examples(examples: &[QAExample], path: &Path) -> Result<(), TaskError> {
    fs::write(path, render_examples(examples))?;
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<QAExample>, TaskError> {
    read_examples(&fs::read_to_string(path)?)
}

/// Catalog export: one JSON object per template.
pub fn render_catalog(catalog: &Catalog) -> String {
    let mut out = String::new();
    for t in &catalog.simple {
        let rec = serde_json::json!({"id": t.id, "kind": "simple", "chain": [t.step().name()], "text": t.text});
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    for t in &catalog.complex {
        let chain: Vec<String> = t.chain.iter().map(|s| s.name()).collect();
        let rec = serde_json::json!({"id": t.id, "kind": "complex", "chain": chain, "text": t.text});
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}
