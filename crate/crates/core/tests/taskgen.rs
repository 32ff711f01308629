use std::collections::{BTreeSet, HashSet};

use collabqa::kgsynth::{
    generate_kg_suite, union, Entity, EntityId, EntityKind, KgConfig, KgSuite, KnowledgeGraph, Relation, Triple,
};
use collabqa::taskgen::{
    build_catalog, build_dataset, read_examples, realize, render_examples, route, sample_reasoning_path, tokenize,
    DatasetConfig, PathHop, ReasoningPath, Step, TaskError, Walker,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ent(id: EntityId, kind: EntityKind, s: &str) -> Entity {
    Entity { id, kind, surface: s.to_string() }
}

fn tr(head: EntityId, relation: Relation, tail: EntityId) -> Triple {
    Triple { head, relation, tail }
}

/// Person#1 was born in City#4, whose largest company is Company#4.
fn worked_example() -> KgSuite {
    let p1 = ent(1, EntityKind::PersonName, "Person#1");
    let c4 = ent(4, EntityKind::CityName, "City#4");
    let k4 = ent(8, EntityKind::CompanyName, "Company#4");
    let g1 = KnowledgeGraph::new(1, vec![p1, c4.clone()], vec![tr(1, Relation::Birthplace, 4)]).unwrap();
    let g3 = KnowledgeGraph::new(3, vec![c4, k4], vec![tr(4, Relation::LargestCompany, 8)]).unwrap();
    KgSuite { shards: [g1, KnowledgeGraph::empty(2), g3] }
}

#[test]
fn catalog_contains_the_worked_sub_questions() {
    let cat = build_catalog(&[1, 3]);
    let birth = cat.simple_by_id("s_birthplace").unwrap();
    assert_eq!(birth.text, "Which city was [PersonName] born in ?");
    let largest = cat.simple_by_id("s_largest_company").unwrap();
    assert_eq!(largest.text, "What is the largest company in [CityName] ?");
    assert!(cat.simple_by_id("s_ceo").is_none());
    assert!(cat.complex.iter().all(|t| t.chain.iter().all(|s| s.shard() != 2)));
}

#[test]
fn empty_schema_gives_empty_catalog() {
    let cat = build_catalog(&[]);
    assert!(cat.simple.is_empty() && cat.complex.is_empty());
}

#[test]
fn full_catalog_shape() {
    let cat = build_catalog(&[1, 2, 3]);
    assert_eq!(cat.simple.len(), 24);
    let ids: HashSet<&str> =
        cat.simple.iter().map(|t| t.id.as_str()).chain(cat.complex.iter().map(|t| t.id.as_str())).collect();
    assert_eq!(ids.len(), cat.simple.len() + cat.complex.len());
    for t in &cat.complex {
        assert!((2..=3).contains(&t.hops()));
        let shards: BTreeSet<usize> = t.chain.iter().map(|s| s.shard()).collect();
        assert!(shards.len() >= 2, "{}", t.id);
        assert!(t.text.ends_with('?') && !t.text.ends_with(" ?"));
        assert_eq!(t.text.matches('[').count(), 1, "{}", t.text);
    }
    assert_eq!(cat, build_catalog(&[1, 2, 3]));
}

#[test]
fn complex_chains_are_functional_on_generated_graphs() {
    let suite = generate_kg_suite(&KgConfig::default()).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let steps: BTreeSet<Step> = cat.complex.iter().flat_map(|t| t.chain.iter().copied()).collect();
    for step in steps {
        let mut targets: std::collections::HashMap<EntityId, usize> = Default::default();
        for t in u.triples().iter().filter(|t| t.relation == step.relation) {
            let from = if step.inverse { t.tail } else { t.head };
            *targets.entry(from).or_default() += 1;
        }
        assert!(targets.values().all(|&n| n == 1), "{step} is not single-valued");
    }
}

#[test]
fn worked_example_path_and_question() {
    let suite = worked_example();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let walker = Walker::new(&u, &cat);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let path = sample_reasoning_path(&walker, 2, &mut rng).unwrap();
        assert_eq!(
            path.hops,
            vec![
                PathHop { head: 1, step: Step::forward(Relation::Birthplace), tail: 4 },
                PathHop { head: 4, step: Step::forward(Relation::LargestCompany), tail: 8 },
            ]
        );
    }
    let path = sample_reasoning_path(&walker, 2, &mut rng).unwrap();
    let x = realize(&path, &cat, &u).unwrap();
    assert_eq!(x.question, "What is the largest company in the city where Person#1 was born?");
    assert_eq!(x.answer, "Company#4");
    let subs: Vec<String> =
        x.decomposition.iter().map(|d| cat.simple_by_id(&d.template_id).unwrap().fill(&d.slot)).collect();
    assert_eq!(subs, ["Which city was Person#1 born in ?", "What is the largest company in City#4 ?"]);
    assert_eq!(route(&subs[0], &cat, &suite).unwrap(), 1);
    assert_eq!(route(&subs[1], &cat, &suite).unwrap(), 3);
    assert!(matches!(route("Which city was Person#9 born in ?", &cat, &suite), Err(TaskError::Routing { .. })));
    assert!(matches!(route("Where is the beef ?", &cat, &suite), Err(TaskError::Routing { .. })));
    assert!(matches!(sample_reasoning_path(&walker, 3, &mut rng), Err(TaskError::Sampling { .. })));
}

#[test]
fn single_graph_has_no_cross_graph_chain() {
    let g1 = KnowledgeGraph::new(
        1,
        vec![ent(1, EntityKind::PersonName, "Person#1"), ent(2, EntityKind::CityName, "City#1")],
        vec![tr(1, Relation::Birthplace, 2), tr(1, Relation::LiveIn, 2)],
    )
    .unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let walker = Walker::new(&g1, &cat);
    let err = sample_reasoning_path(&walker, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
    assert!(matches!(err, TaskError::Sampling { attempts: 1000, .. }), "{err}");
}

#[test]
fn one_hop_realizes_to_the_sub_question() {
    let suite = worked_example();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let path = ReasoningPath { hops: vec![PathHop { head: 1, step: Step::forward(Relation::Birthplace), tail: 4 }] };
    let x = realize(&path, &cat, &u).unwrap();
    assert_eq!(x.question, "Which city was Person#1 born in ?");
    let bare = build_catalog(&[1]);
    let two = ReasoningPath {
        hops: vec![path.hops[0], PathHop { head: 4, step: Step::forward(Relation::LargestCompany), tail: 8 }],
    };
    let err = realize(&two, &bare, &u).unwrap_err();
    assert!(err.to_string().contains("birthplace -> largest_company"), "{err}");
}

/// A ten-entity union with several overlapping chains.
fn toy_union() -> KgSuite {
    use EntityKind::*;
    use Relation::*;
    let e = [
        ent(0, PersonName, "Person#1"),
        ent(1, PersonName, "Person#2"),
        ent(2, CityName, "City#1"),
        ent(3, CityName, "City#2"),
        ent(4, CompanyName, "Company#1"),
        ent(5, CompanyName, "Company#2"),
        ent(6, StateName, "State#1"),
        ent(7, EntityKind::Height, "170cm"),
        ent(8, EntityKind::Area, "300km2"),
        ent(9, BusinessName, "Business#1"),
    ];
    let pick = |ids: &[usize]| ids.iter().map(|&i| e[i].clone()).collect::<Vec<_>>();
    let g1 = KnowledgeGraph::new(
        1,
        pick(&[0, 1, 2, 3, 4, 7]),
        vec![
            tr(0, Birthplace, 2),
            tr(0, LiveIn, 3),
            tr(0, WorkIn, 4),
            tr(0, Relation::Height, 7),
            tr(1, Birthplace, 3),
            tr(1, LiveIn, 3),
        ],
    )
    .unwrap();
    let g2 = KnowledgeGraph::new(
        2,
        pick(&[0, 1, 2, 4, 5, 9]),
        vec![tr(4, Ceo, 0), tr(4, LocateIn, 2), tr(4, MainBusiness, 9), tr(5, Founder, 1), tr(5, LocateIn, 2)],
    )
    .unwrap();
    let g3 = KnowledgeGraph::new(
        3,
        pick(&[1, 2, 3, 4, 6, 8]),
        vec![tr(2, LargestCompany, 4), tr(2, ContainedBy, 6), tr(3, Mayor, 1), tr(3, Relation::Area, 8)],
    )
    .unwrap();
    KgSuite { shards: [g1, g2, g3] }
}

/// Brute force over ordered triple pairs, checking the chain rules directly.
fn all_two_hop(kg: &KnowledgeGraph, cat: &collabqa::taskgen::Catalog) -> BTreeSet<Vec<PathHop>> {
    let mut readings = Vec::new();
    for t in kg.triples() {
        readings.push(PathHop { head: t.head, step: Step::forward(t.relation), tail: t.tail });
        if matches!(t.relation, Relation::Mayor | Relation::LargestCompany) {
            readings.push(PathHop { head: t.tail, step: Step::backward(t.relation), tail: t.head });
        }
    }
    let mut out = BTreeSet::new();
    for a in &readings {
        for b in &readings {
            let distinct = a.head != a.tail && a.head != b.tail && a.tail != b.tail;
            let linked = a.tail == b.head;
            let undo = a.step.relation == b.step.relation && a.step.inverse != b.step.inverse;
            let crosses = a.step.relation.shard() != b.step.relation.shard();
            let phrased = cat.complex_for(&[a.step, b.step]).is_some();
            if distinct && linked && !undo && crosses && phrased {
                out.insert(vec![*a, *b]);
            }
        }
    }
    out
}

#[test]
fn sampled_paths_belong_to_brute_force_enumeration() {
    let suite = toy_union();
    let u = union(&suite).unwrap();
    assert_eq!(u.entity_count(), 10);
    let cat = build_catalog(&[1, 2, 3]);
    let oracle = all_two_hop(&u, &cat);
    assert!(oracle.len() > 5, "{}", oracle.len());
    let walker = Walker::new(&u, &cat);
    let enumerated: BTreeSet<Vec<PathHop>> = walker.enumerate(2).into_iter().map(|p| p.hops).collect();
    assert_eq!(enumerated, oracle);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hit = BTreeSet::new();
    for _ in 0..500 {
        let p = sample_reasoning_path(&walker, 2, &mut rng).unwrap();
        assert!(oracle.contains(&p.hops), "{:?}", p.hops);
        hit.insert(p.hops);
    }
    assert!(hit.len() > 1);
}

fn lookup(kg: &KnowledgeGraph, slot: &str, step: Step) -> Vec<String> {
    let id = kg.find(slot).map(|e| e.id);
    kg.triples()
        .iter()
        .filter(|t| t.relation == step.relation)
        .filter_map(|t| {
            let (from, to) = if step.inverse { (t.tail, t.head) } else { (t.head, t.tail) };
            (Some(from) == id).then(|| kg.surface(to).to_string())
        })
        .collect()
}

#[test]
fn desk_dataset_properties() {
    let suite = generate_kg_suite(&KgConfig::default()).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let ds = build_dataset(&DatasetConfig::default(), &u, &cat).unwrap();
    assert_eq!((ds.train.len(), ds.dev.len(), ds.test.len()), (8000, 1000, 1000));

    let key = |x: &collabqa::taskgen::QAExample| (x.template.clone(), x.anchor.clone());
    let tr: HashSet<_> = ds.train.iter().map(key).collect();
    let dv: HashSet<_> = ds.dev.iter().map(key).collect();
    let te: HashSet<_> = ds.test.iter().map(key).collect();
    assert_eq!(tr.len() + dv.len() + te.len(), 10_000);
    assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));

    let three = ds.all().filter(|x| x.hops == 3).count();
    assert_eq!(three, 5000);
    for x in ds.all() {
        assert_eq!(x.decomposition.len(), x.hops);
        assert_eq!(x.path.len(), x.hops);
        let mut register = x.anchor.clone();
        let mut shards = BTreeSet::new();
        for (d, hop) in x.decomposition.iter().zip(&x.path) {
            assert_eq!(d.slot, register);
            let t = cat.simple_by_id(&d.template_id).unwrap();
            let answers = lookup(&u, &register, t.step());
            assert_eq!(answers.len(), 1, "{} at {register}", t.id);
            assert_eq!(hop, &[register.clone(), t.step().name(), answers[0].clone()]);
            let q = t.fill(&register);
            let shard = route(&q, &cat, &suite).unwrap();
            assert_eq!(shard, t.step().shard());
            shards.insert(shard);
            register = answers[0].clone();
        }
        assert_eq!(register, x.answer);
        assert!(shards.len() >= 2);
    }

    let again = build_dataset(&DatasetConfig::default(), &u, &cat).unwrap();
    assert_eq!(render_examples(&ds.train), render_examples(&again.train));
    assert_eq!(read_examples(&render_examples(&ds.test)).unwrap(), ds.test);
}

#[test]
fn paper_scale_sizes() {
    let suite = generate_kg_suite(&KgConfig::paper_scale()).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let ds = build_dataset(&DatasetConfig::paper_scale(), &u, &cat).unwrap();
    assert_eq!((ds.train.len(), ds.dev.len(), ds.test.len()), (66_800, 8350, 8350));
}

#[test]
fn infeasible_sizes_report_available_pairs() {
    let suite = generate_kg_suite(&KgConfig { persons: 30, companies: 20, cities: 5, ..KgConfig::default() }).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let err = build_dataset(&DatasetConfig { train: 100_000, ..DatasetConfig::default() }, &u, &cat).unwrap_err();
    assert!(matches!(err, TaskError::Infeasible(_)));
    assert!(err.to_string().contains("(template, anchor) pairs"), "{err}");
}

#[test]
fn tokenizer_detaches_question_marks() {
    assert_eq!(tokenize("Which city was Person#1 born?"), ["Which", "city", "was", "Person#1", "born", "?"]);
    assert_eq!(tokenize("Who founded Company#2 ?"), ["Who", "founded", "Company#2", "?"]);
}

#[test]
fn malformed_dataset_line_is_reported() {
    let err = read_examples("\n{\"id\": 3}\n").unwrap_err();
    assert!(matches!(err, TaskError::Parse { line: 2, .. }), "{err}");
}
