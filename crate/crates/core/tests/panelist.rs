use collabqa::kgsynth::{
    generate_kg_suite, union, Entity, EntityId, EntityKind, KgConfig, KgSuite, KnowledgeGraph, Relation, Triple,
};
use collabqa::numerics::{grad_check, GradCheckConfig, Tensor};
use collabqa::panelist::{
    build_corpus, evaluate_accuracy, pretrain, select_node, subquestions, CorpusConfig, LabeledQuestion,
    OraclePanelist, Panelist, PanelistError, PanelistModel, PretrainConfig, TrainedPanelist,
};
use collabqa::taskgen::{build_catalog, build_dataset, tokenize, Catalog, DatasetConfig, Vocabulary, UNK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ent(id: EntityId, kind: EntityKind, s: &str) -> Entity {
    Entity { id, kind, surface: s.to_string() }
}

fn tr(head: EntityId, relation: Relation, tail: EntityId) -> Triple {
    Triple { head, relation, tail }
}

fn worked_example() -> KgSuite {
    let p1 = ent(1, EntityKind::PersonName, "Person#1");
    let c4 = ent(4, EntityKind::CityName, "City#4");
    let k4 = ent(8, EntityKind::CompanyName, "Company#4");
    let g1 = KnowledgeGraph::new(1, vec![p1, c4.clone()], vec![tr(1, Relation::Birthplace, 4)]).unwrap();
    let g3 = KnowledgeGraph::new(3, vec![c4, k4], vec![tr(4, Relation::LargestCompany, 8)]).unwrap();
    KgSuite { shards: [g1, KnowledgeGraph::empty(2), g3] }
}

/// Ten nodes: three persons, two cities, two heights, two genders, one company.
fn ten_node_shard() -> KnowledgeGraph {
    use EntityKind::{CityName, CompanyName, PersonName};
    use Relation::{Birthplace, LiveIn, WorkIn};
    let entities = vec![
        ent(1, PersonName, "Person#1"),
        ent(2, PersonName, "Person#2"),
        ent(3, PersonName, "Person#3"),
        ent(4, CityName, "City#1"),
        ent(5, CityName, "City#2"),
        ent(6, EntityKind::Height, "172cm"),
        ent(7, EntityKind::Height, "180cm"),
        ent(8, EntityKind::Gender, "male"),
        ent(9, EntityKind::Gender, "female"),
        ent(10, CompanyName, "Company#1"),
    ];
    let triples = vec![
        tr(1, Birthplace, 4),
        tr(1, LiveIn, 4),
        tr(1, Relation::Height, 6),
        tr(1, Relation::Gender, 8),
        tr(1, WorkIn, 10),
        tr(2, Birthplace, 5),
        tr(2, Relation::Height, 7),
        tr(2, Relation::Gender, 9),
        tr(3, LiveIn, 5),
        tr(3, Relation::Gender, 8),
        tr(3, Relation::Height, 6),
    ];
    KnowledgeGraph::new(1, entities, triples).unwrap()
}

fn vocab_for(kg: &KnowledgeGraph, cat: &Catalog) -> Vocabulary {
    Vocabulary::build(cat, kg)
}

/// Every own-template question over every entity of the right kind.
fn own_questions(kg: &KnowledgeGraph, cat: &Catalog) -> Vec<LabeledQuestion> {
    let oracle = OraclePanelist::new(kg, cat);
    let mut out = Vec::new();
    for t in cat.simple.iter().filter(|t| t.step().shard() == kg.owner()) {
        for e in kg.entities().filter(|e| e.kind == t.step().from_kind()) {
            let text = t.fill(&e.surface);
            out.push(LabeledQuestion { answer: oracle.answer(&text), text });
        }
    }
    out
}

#[test]
fn oracle_answers_the_worked_example() {
    let suite = worked_example();
    let cat = build_catalog(&[1, 2, 3]);
    let p1 = OraclePanelist::new(suite.shard(1), &cat);
    let p3 = OraclePanelist::new(suite.shard(3), &cat);
    assert_eq!(p1.answer("Which city was Person#1 born in ?"), "City#4");
    assert_eq!(p1.answer("What is the largest company in City#4 ?"), UNK);
    assert_eq!(p3.answer("What is the largest company in City#4 ?"), "Company#4");
    assert_eq!(p3.answer("Which city is Company#4 the largest company in ?"), "City#4");
    assert_eq!(p3.answer("Which city was Person#1 born in ?"), UNK);
    assert_eq!(p1.answer("Which city was Person#2 born in ?"), UNK);
    assert_eq!(p1.answer("complete nonsense"), UNK);
}

#[test]
fn oracle_consistency_over_the_desk_dataset() {
    let suite = generate_kg_suite(&KgConfig::default()).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let ds =
        build_dataset(&DatasetConfig { train: 1500, dev: 250, test: 250, ..Default::default() }, &u, &cat).unwrap();
    let oracles: Vec<OraclePanelist> = suite.shards.iter().map(|kg| OraclePanelist::new(kg, &cat)).collect();
    for x in ds.all() {
        for (d, hop) in x.decomposition.iter().zip(&x.path) {
            let t = cat.simple_by_id(&d.template_id).unwrap();
            let q = t.fill(&d.slot);
            for o in &oracles {
                let want = if o.shard() == t.step().shard() { hop[2].as_str() } else { UNK };
                assert_eq!(o.answer(&q), want, "{q} asked to shard {}", o.shard());
            }
        }
    }
}

#[test]
fn isolated_node_with_zero_transform_encodes_to_zero() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let mut m = PanelistModel::new(&kg, &vocab_for(&kg, &cat), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.store.set("gnn.w", Tensor::zeros(&[120, 80])).unwrap();
    m.store.set("gnn.b", Tensor::vector(vec![0.0; 80])).unwrap();
    let enc = m.encode_graph().unwrap();
    assert_eq!(enc.h.shape(), &[11, 80]);
    assert_eq!(enc.nodes.last().unwrap(), UNK);
    assert!(enc.h.row_slice(m.unk_node()).iter().all(|&v| v == 0.0));
}

fn dot_col(x: &[f64], w: &Tensor, row0: usize, col: usize) -> f64 {
    x.iter().enumerate().map(|(i, v)| v * w.get(row0 + i, col)).sum()
}

#[test]
fn two_node_graph_matches_scalar_unroll() {
    let suite = worked_example();
    let kg = suite.shard(1);
    let cat = build_catalog(&[1, 2, 3]);
    let m = PanelistModel::new(kg, &vocab_for(kg, &cat), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(m.nodes(), ["Person#1", "City#4", UNK]);
    let emb = m.store.get("node.emb").unwrap();
    let rel = m.store.get("rel.emb").unwrap();
    let w = m.store.get("gnn.w").unwrap();
    let b = m.store.get("gnn.b").unwrap();
    let rt = |name: &str| m.relation_types().iter().position(|r| r == name).unwrap();
    let message = |v: usize, r: usize, u: usize| -> Vec<f64> {
        (0..80)
            .map(|j| {
                let s = dot_col(emb.row_slice(v), w, 0, j)
                    + dot_col(rel.row_slice(r), w, 40, j)
                    + dot_col(emb.row_slice(u), w, 80, j)
                    + b.data()[j];
                s.max(0.0)
            })
            .collect()
    };
    let mean_relu = |ms: Vec<Vec<f64>>| -> Vec<f64> {
        (0..80).map(|j| (ms.iter().map(|m| m[j]).sum::<f64>() / ms.len() as f64).max(0.0)).collect()
    };
    let (p, c, unk) = (0, 1, 2);
    let expected = [
        mean_relu(vec![message(p, rt("birthplace^-1"), c), message(p, rt("self"), p)]),
        mean_relu(vec![message(c, rt("birthplace"), p), message(c, rt("self"), c)]),
        mean_relu(vec![message(unk, rt("self"), unk)]),
    ];
    let enc = m.encode_graph().unwrap();
    for (row, want) in expected.iter().enumerate() {
        for (a, b) in enc.h.row_slice(row).iter().zip(want) {
            assert!((a - b).abs() <= 1e-12, "row {row}: {a} vs {b}");
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM over embedding rows, gate order input, forget, candidate, output.
fn scalar_lstm(xs: &[Vec<f64>], wi: &Tensor, wh: &Tensor, b: &Tensor) -> Vec<f64> {
    let hdim = wh.rows();
    let (mut h, mut c) = (vec![0.0; hdim], vec![0.0; hdim]);
    for x in xs {
        let gate = |g: usize, j: usize| {
            let col = g * hdim + j;
            b.data()[col] + dot_col(x, wi, 0, col) + dot_col(&h, wh, 0, col)
        };
        let mut nh = vec![0.0; hdim];
        let mut nc = vec![0.0; hdim];
        for j in 0..hdim {
            let (i, f, g, o) = (sigmoid(gate(0, j)), sigmoid(gate(1, j)), gate(2, j).tanh(), sigmoid(gate(3, j)));
            nc[j] = f * c[j] + i * g;
            nh[j] = o * nc[j].tanh();
        }
        h = nh;
        c = nc;
    }
    h
}

fn table_rows(m: &PanelistModel, rows: &[usize]) -> Vec<Vec<f64>> {
    let nodes = m.store.get("node.emb").unwrap();
    let words = m.store.get("word.emb").unwrap();
    rows.iter()
        .map(
            |&r| {
                if r < nodes.rows() {
                    nodes.row_slice(r).to_vec()
                } else {
                    words.row_slice(r - nodes.rows()).to_vec()
                }
            },
        )
        .collect()
}

#[test]
fn question_encoding_matches_scalar_composition() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let m = PanelistModel::new(&kg, &vocab_for(&kg, &cat), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let tokens = tokenize("Which city was Person#2 born in ?");
    let q = m.encode_question(&tokens).unwrap();
    let xs = table_rows(&m, &m.token_rows(&tokens).unwrap());
    let get = |n: &str| m.store.get(n).unwrap();
    let fwd = scalar_lstm(&xs, get("question.fwd.w_input"), get("question.fwd.w_hidden"), get("question.fwd.bias"));
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let bwd = scalar_lstm(&rev, get("question.bwd.w_input"), get("question.bwd.w_hidden"), get("question.bwd.bias"));
    let want: Vec<f64> = fwd.into_iter().chain(bwd).collect();
    assert_eq!(q.len(), 80);
    for (a, b) in q.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn question_encoding_trivial_cases() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let mut m = PanelistModel::new(&kg, &vocab_for(&kg, &cat), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

    // Tied directions: the encoding of the reversal swaps halves.
    for part in ["w_input", "w_hidden", "bias"] {
        let fwd = m.store.get(&format!("question.fwd.{part}")).unwrap().clone();
        m.store.set(&format!("question.bwd.{part}"), fwd).unwrap();
    }
    let seq = tokenize("How tall is Person#3 ?");
    let rev: Vec<String> = seq.iter().rev().cloned().collect();
    let (a, b) = (m.encode_question(&seq).unwrap(), m.encode_question(&rev).unwrap());
    for i in 0..40 {
        assert!((a[i] - b[40 + i]).abs() <= 1e-12);
        assert!((a[40 + i] - b[i]).abs() <= 1e-12);
    }

    let names: Vec<String> = m.store.names().filter(|n| n.starts_with("question.")).cloned().collect();
    for n in names {
        let shape = m.store.get(&n).unwrap().shape().to_vec();
        m.store.set(&n, Tensor::zeros(&shape)).unwrap();
    }
    assert!(m.encode_question(&["<q>"]).unwrap().iter().all(|&v| v == 0.0));

    match m.encode_question(&["Which", "Zork#1"]) {
        Err(PanelistError::OutOfVocabulary(t)) => assert_eq!(t, "Zork#1"),
        other => panic!("expected an out-of-vocabulary error, got {other:?}"),
    }
    assert_eq!(m.answer("Which city was Zork#1 born in ?"), UNK);
}

#[test]
fn node_selection() {
    let eye = |n: usize| {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    };
    let h = eye(4);
    for k in 0..4 {
        let (scores, best) = select_node(&h, &eye(4), h.row_slice(k)).unwrap();
        assert_eq!(best, k);
        assert_eq!(scores[k], 1.0);
    }
    let (scores, best) = select_node(&h, &eye(4), &[0.0; 4]).unwrap();
    assert!(scores.iter().all(|&s| s == 0.0));
    assert_eq!(best, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let rand_t = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (h, w) = (rand_t(9, 5, &mut rng), rand_t(5, 3, &mut rng));
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (scores, best) = select_node(&h, &w, &q).unwrap();
        let brute: Vec<f64> = (0..9)
            .map(|v| (0..5).map(|i| h.get(v, i) * (0..3).map(|j| w.get(i, j) * q[j]).sum::<f64>()).sum())
            .collect();
        for (a, b) in scores.iter().zip(&brute) {
            assert!((a - b).abs() <= 1e-12);
        }
        let top = (0..9).fold(0, |b, v| if brute[v] > brute[b] { v } else { b });
        assert_eq!(best, top);
    }
    assert!(select_node(&eye(3), &eye(4), &[0.0; 4]).is_err());
}

#[test]
fn full_loss_passes_finite_differences() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let vocab = vocab_for(&kg, &cat);
    let questions = own_questions(&kg, &cat);
    for seed in 0..5 {
        let m = PanelistModel::new(&kg, &vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let batch: Vec<&LabeledQuestion> = (0..6).map(|_| &questions[rng.gen_range(0..questions.len())]).collect();
        let rows: Vec<Vec<usize>> = batch.iter().map(|x| m.token_rows(&tokenize(&x.text)).unwrap()).collect();
        let targets: Vec<usize> = batch.iter().map(|x| m.node_of(&x.answer).unwrap()).collect();
        let report = grad_check(
            |store| m.loss_on_tape(store, &rows, &targets).map(|(t, l, _)| (t, l)),
            &m.store,
            &GradCheckConfig { seed, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: worst {:e} {:?}", report.worst(), report.max_relative_error);
    }
}

#[test]
fn overfitted_small_shard_agrees_with_oracle() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let vocab = vocab_for(&kg, &cat);
    let questions = own_questions(&kg, &cat);
    assert!(questions.iter().any(|q| q.answer == UNK) && questions.iter().any(|q| q.answer != UNK));
    let mut m = PanelistModel::new(&kg, &vocab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = PretrainConfig { epochs: 400, batch_size: 16, patience: None, ..Default::default() };
    let report = pretrain(&mut m, &questions, &questions, &cfg).unwrap();
    assert!(report.epochs_run < 400, "did not fit: {:?}", report.history.last());
    let oracle = OraclePanelist::new(&kg, &cat);
    let frozen = TrainedPanelist::freeze(m).unwrap();
    for q in &questions {
        assert_eq!(frozen.answer(&q.text), oracle.answer(&q.text), "{}", q.text);
    }
}

#[test]
fn untrained_panelist_is_near_chance_and_corpus_is_labeled_by_the_oracle() {
    let suite = generate_kg_suite(&KgConfig::default()).unwrap();
    let u = union(&suite).unwrap();
    let cat = build_catalog(&[1, 2, 3]);
    let vocab = Vocabulary::build(&cat, &u);
    let ds = build_dataset(&DatasetConfig { train: 800, dev: 100, test: 100, ..Default::default() }, &u, &cat).unwrap();
    let kg = suite.shard(1);
    let oracle = OraclePanelist::new(kg, &cat);

    let corpus = build_corpus(&oracle, &ds.train, &u, &CorpusConfig::default()).unwrap();
    let again = build_corpus(&oracle, &ds.train, &u, &CorpusConfig::default()).unwrap();
    assert_eq!(corpus, again);
    let own = subquestions(&oracle, &ds.train, true);
    let all = subquestions(&oracle, &ds.train, false);
    assert!(own.iter().all(|q| q.answer != UNK));
    assert!(all.len() > own.len());
    assert!(corpus.len() > all.len());
    for q in &corpus {
        assert_eq!(q.answer, oracle.answer(&q.text));
    }

    let m = PanelistModel::new(kg, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let acc = evaluate_accuracy(&m, &own).unwrap();
    assert!(acc < 0.05, "untrained accuracy {acc}");
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let vocab = vocab_for(&kg, &cat);
    let m = PanelistModel::new(&kg, &vocab, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("p1");
    m.save(&prefix).unwrap();
    let back = PanelistModel::load(&prefix, &kg, &vocab).unwrap();
    assert_eq!(back.store, m.store);
    let q = "Which city does Person#3 live in ?";
    assert_eq!(back.answer(q), m.answer(q));

    let other = worked_example();
    let wrong_graph = PanelistModel::load(&prefix, other.shard(1), &vocab_for(other.shard(1), &cat));
    assert!(matches!(wrong_graph, Err(PanelistError::Mismatch(_))));
    let bigger = Vocabulary::from_tokens(vocab.tokens().iter().cloned().chain(["extra".to_string()]).collect());
    assert!(matches!(PanelistModel::load(&prefix, &kg, &bigger), Err(PanelistError::Mismatch(_))));
}

#[test]
fn frozen_answers_are_memoized_and_stable() {
    let kg = ten_node_shard();
    let cat = build_catalog(&[1, 2, 3]);
    let m = PanelistModel::new(&kg, &vocab_for(&kg, &cat), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let frozen = TrainedPanelist::freeze(m.clone()).unwrap();
    let qs = ["How tall is Person#1 ?", "What is the gender of Person#2 ?", "How tall is Person#1 ?"];
    let batch = frozen.answer_batch(&qs);
    assert_eq!(batch[0], batch[2]);
    for (q, a) in qs.iter().zip(&batch) {
        assert_eq!(&frozen.answer(q), a);
        assert_eq!(&m.answer(q), a);
        assert!(a == UNK || kg.find(a).is_some());
    }
}
