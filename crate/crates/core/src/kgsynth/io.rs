//! Plain-text graph files.
//!
//! ```text
//! #owner	1
//! #entities
//! 0	PersonName	Person#1
//! 412	CityName	City#4
//! #triples
//! 0	birthplace	412
//! ```
//!
//! Entities are listed by id and triples by (head, relation, tail), so
//! equal graphs always serialize to identical bytes.

use std::fs;
use std::path::Path;

use super::{Entity, KgError, KnowledgeGraph, Triple};

pub fn render_kg(kg: &KnowledgeGraph) -> String {
    let mut out = format!("#owner\t{}\n#entities\n", kg.owner());
    for e in kg.entities() {
        out.push_str(&format!("{}\t{}\t{}\n", e.id, e.kind, e.surface));
    }
    out.push_str("#triples\n");
    for t in kg.triples() {
        out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
    }
    out
}

#[derive(PartialEq)]
enum Section {
    Preamble,
    Entities,
    Triples,
}

pub fn parse_kg(text: &str) -> Result<KnowledgeGraph, KgError> {
    let err = |line: usize, message: String| KgError::Parse { line, message };
    let mut owner = None;
    let mut section = Section::Preamble;
    let mut entities = Vec::new();
    let mut triples = Vec::new();
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last = line;
        if raw.is_empty() {
            continue;
        }
        if let Some(rest) = raw.strip_prefix("#owner\t") {
            owner = Some(rest.parse::<usize>().map_err(|_| err(line, format!("bad owner `{rest}`")))?);
            continue;
        }
        match raw {
            "#entities" => {
                section = Section::Entities;
                continue;
            }
            "#triples" => {
                section = Section::Triples;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let id = |s: &str| s.parse::<u32>().map_err(|_| err(line, format!("bad entity id `{s}`")));
        match section {
            Section::Preamble => return Err(err(line, "record before `#entities`".into())),
            Section::Entities => entities.push(Entity {
                id: id(fields[0])?,
                kind: fields[1].parse().map_err(|e: KgError| err(line, e.to_string()))?,
                surface: fields[2].to_string(),
            }),
            Section::Triples => triples.push(Triple {
                head: id(fields[0])?,
                relation: fields[1].parse().map_err(|e: KgError| err(line, e.to_string()))?,
                tail: id(fields[2])?,
            }),
        }
    }
    if section != Section::Triples {
        return Err(err(last + 1, "missing `#triples` section".into()));
    }
    let owner = owner.ok_or_else(|| err(1, "missing `#owner` line".into()))?;
    KnowledgeGraph::new(owner, entities, triples).map_err(|e| err(last, e.to_string()))
}

pub fn save_kg(kg: &KnowledgeGraph, path: &Path) -> Result<(), KgError> {
    fs::write(path, render_kg(kg))?;
    Ok(())
}

pub fn load_kg(path: &Path) -> Result<KnowledgeGraph, KgError> {
    parse_kg(&fs::read_to_string(path)?)
}
