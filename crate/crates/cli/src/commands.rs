use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collabqa::arena::{
    self, cross_pair_csv, curves_csv, evaluate, freeze_panel, metrics_csv, overlap_sweep, parse_curves_csv,
    parse_sweep_csv, pretrain_panel, sweep_csv, trace_jsonl, train_and_test, train_moderator, CurveSeries, Panel,
    PolicyController, World, CURVES_HEADER, SWEEP_HEADER,
};
use collabqa::kgsynth::{generate_kg_suite, load_kg, save_kg, union, validate_constraints, KgSuite};
use collabqa::moderator::ModeratorModel;
use collabqa::numerics::manifest_path;
use collabqa::panelist::PanelistModel;
use collabqa::taskgen::{
    build_catalog, build_dataset, load_examples, render_catalog, save_examples, DatasetSplits, Vocabulary,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::plot;

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn kg_path(out: &Path, shard: usize) -> PathBuf {
    out.join(format!("kg{shard}.txt"))
}

fn split_path(out: &Path, split: &str) -> PathBuf {
    out.join(format!("{split}.jsonl"))
}

fn panelist_prefix(out: &Path, shard: usize) -> PathBuf {
    out.join(format!("panelist{shard}"))
}

fn moderator_prefix(out: &Path) -> PathBuf {
    out.join("moderator")
}

fn kg_files(out: &Path) -> Vec<PathBuf> {
    (1..=3).map(|i| kg_path(out, i)).collect()
}

fn data_files(out: &Path) -> Vec<PathBuf> {
    SPLITS.iter().map(|s| split_path(out, s)).collect()
}

fn panelist_files(out: &Path) -> Vec<PathBuf> {
    (1..=3).map(|i| manifest_path(&panelist_prefix(out, i))).collect()
}

/// Checks that every input exists, then writes the manifest.
fn begin(command: &str, cfg: &RunConfig, inputs: &[(PathBuf, &str)]) -> Result<PathBuf> {
    for (p, producer) in inputs {
        if !p.exists() {
            bail!("missing artifact {}: run `collabqa {producer}` with this --out first", p.display());
        }
    }
    let paths: Vec<PathBuf> = inputs.iter().map(|(p, _)| p.clone()).collect();
    RunManifest::new(command, cfg, &paths)?.write(&cfg.out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_suite(out: &Path) -> Result<KgSuite> {
    let [a, b, c] = [1, 2, 3].map(|i| load_kg(&kg_path(out, i)));
    Ok(KgSuite { shards: [a?, b?, c?] })
}

fn load_world(out: &Path) -> Result<World> {
    let suite = load_suite(out)?;
    let union = union(&suite)?;
    let catalog = build_catalog(&[1, 2, 3]);
    let vocab = Vocabulary::build(&catalog, &union);
    let [train, dev, test] = SPLITS.map(|s| load_examples(&split_path(out, s)));
    let data = DatasetSplits { train: train?, dev: dev?, test: test? };
    Ok(World { suite, union, catalog, vocab, data })
}

fn load_panel(world: &World, out: &Path) -> Result<Panel> {
    let models = world
        .suite
        .shards
        .iter()
        .map(|kg| PanelistModel::load(&panelist_prefix(out, kg.owner()), kg, &world.vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(freeze_panel(models)?)
}

pub fn gen_kg(cfg: &RunConfig) -> Result<()> {
    let m = begin("gen-kg", cfg, &[])?;
    let kg = cfg.kg();
    let suite = generate_kg_suite(&kg)?;
    let violations = validate_constraints(&suite, &kg.ranges);
    if let Some(v) = violations.first() {
        bail!("generated graphs violate {} constraints, first: {v:?}", violations.len());
    }
    for g in &suite.shards {
        save_kg(g, &kg_path(&cfg.out, g.owner()))?;
        println!("kg{}: {} entities, {} triples", g.owner(), g.entity_count(), g.triples().len());
    }
    RunManifest::finish(&m)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let inputs: Vec<_> = kg_files(&cfg.out).into_iter().map(|p| (p, "gen-kg")).collect();
    let m = begin("gen-data", cfg, &inputs)?;
    let suite = load_suite(&cfg.out)?;
    let catalog = build_catalog(&[1, 2, 3]);
    let data = build_dataset(&cfg.data(), &union(&suite)?, &catalog)?;
    write(&cfg.out.join("catalog.json"), &render_catalog(&catalog))?;
    for (split, xs) in SPLITS.iter().zip([&data.train, &data.dev, &data.test]) {
        save_examples(xs, &split_path(&cfg.out, split))?;
        println!("{split}: {} questions", xs.len());
    }
    RunManifest::finish(&m)
}

fn world_inputs(out: &Path) -> Vec<(PathBuf, &'static str)> {
    let mut v: Vec<_> = kg_files(out).into_iter().map(|p| (p, "gen-kg")).collect();
    v.extend(data_files(out).into_iter().map(|p| (p, "gen-data")));
    v
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let m = begin("pretrain", cfg, &world_inputs(&cfg.out))?;
    let world = load_world(&cfg.out)?;
    let (models, runs) = pretrain_panel(&world, &cfg.corpus(), &cfg.pretrain())?;
    let mut csv =
        String::from("shard,corpus_size,epochs_run,best_epoch,dev_accuracy,held_out_accuracy,held_out_count\n");
    for (model, r) in models.iter().zip(&runs) {
        model.save(&panelist_prefix(&cfg.out, r.shard))?;
        writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{}",
            r.shard,
            r.corpus_size,
            r.report.epochs_run,
            r.report.best_epoch,
            r.report.dev_accuracy,
            r.held_out_accuracy,
            r.held_out_count
        )?;
        println!(
            "panelist {}: held-out accuracy {:.2}% over {}",
            r.shard,
            100.0 * r.held_out_accuracy,
            r.held_out_count
        );
    }
    write(&cfg.out.join("pretrain.csv"), &csv)?;
    RunManifest::finish(&m)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let mut inputs = world_inputs(&cfg.out);
    inputs.extend(panelist_files(&cfg.out).into_iter().map(|p| (p, "pretrain")));
    let m = begin("train", cfg, &inputs)?;
    let world = load_world(&cfg.out)?;
    let panel = load_panel(&world, &cfg.out)?;
    let tc = cfg.train();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = ModeratorModel::new(&world.catalog, &world.vocab, tc.reward.mode, &mut rng)?;
    let curve = train_moderator(&mut model, &world.data.train, &world.data.dev, &panel, &world.catalog, &tc)?;
    model.save(&moderator_prefix(&cfg.out))?;
    write(&cfg.out.join("curves.csv"), &curves_csv(&[CurveSeries { seed: cfg.seed, points: curve.clone() }]))?;
    if let Some(last) = curve.last() {
        println!("epoch {}: dev EMA {:.2}% EMP {:.2}%", last.epoch, 100.0 * last.ema, 100.0 * last.emp);
    }
    RunManifest::finish(&m)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let mut inputs = world_inputs(&cfg.out);
    inputs.extend(panelist_files(&cfg.out).into_iter().map(|p| (p, "pretrain")));
    inputs.push((manifest_path(&moderator_prefix(&cfg.out)), "train"));
    let m = begin("eval", cfg, &inputs)?;
    let world = load_world(&cfg.out)?;
    let panel = load_panel(&world, &cfg.out)?;
    let model = ModeratorModel::load(&moderator_prefix(&cfg.out), &world.catalog, &world.vocab)?;
    let mut reward = cfg.reward();
    reward.mode = model.mode();
    let greedy = PolicyController { model: &model, greedy: true };
    let e = evaluate(&greedy, &panel, &world.catalog, &world.data.test, &reward, cfg.seed, cfg.jobs)?;
    write(&cfg.out.join("metrics.csv"), &metrics_csv(&e.report))?;
    write(&cfg.out.join("traces.jsonl"), &trace_jsonl(&e.traces, &e.scores))?;
    println!(
        "test EMA {:.2}% EMP {:.2}% over {}",
        100.0 * e.report.ema(),
        100.0 * e.report.emp(),
        e.report.overall.count
    );
    RunManifest::finish(&m)
}

pub fn sweep_overlap(cfg: &RunConfig) -> Result<()> {
    let m = begin("sweep-overlap", cfg, &[])?;
    let points = overlap_sweep(&cfg.sweep_ratios, &cfg.experiment(), &cfg.seeds, |p| {
        println!("ratio {} seed {}: EMA {:.2}% EMP {:.2}%", p.ratio, p.seed, 100.0 * p.ema, 100.0 * p.emp);
    })?;
    write(&cfg.out.join("sweep.csv"), &sweep_csv(&points))?;
    RunManifest::finish(&m)
}

pub fn cross_pair(cfg: &RunConfig) -> Result<()> {
    let m = begin("cross-pair", cfg, &[])?;
    let exp = cfg.experiment();
    let world = arena::build_world(&exp.kg, &exp.data)?;
    let mut panels = Vec::new();
    let mut moderators = Vec::new();
    for &seed in &cfg.seeds {
        let c = exp.with_agent_seed(seed);
        let (models, _) = pretrain_panel(&world, &c.corpus, &c.pretrain)?;
        let panel = freeze_panel(models)?;
        let (moderator, _, test) = train_and_test(&world, &panel, &c.train)?;
        println!("group {seed}: native test EMA {:.2}%", 100.0 * test.ema());
        panels.push(panel);
        moderators.push(moderator);
    }
    let refs: Vec<&ModeratorModel> = moderators.iter().collect();
    let cp = arena::cross_pair(&panels, &refs, &world.catalog, &world.data.test, &exp.train.reward, cfg.jobs)?;
    write(&cfg.out.join("cross_pair.csv"), &cross_pair_csv(&cp))?;
    write(&cfg.out.join("cross_pair.json"), &serde_json::to_string_pretty(&cp)?)?;
    print!("{}", cross_pair_csv(&cp));
    RunManifest::finish(&m)
}

/// Curve files are merged by seed; a sweep file is plotted on its own.
pub fn export_plot(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut texts = Vec::new();
    for p in inputs {
        texts.push(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let header = |t: &str| t.lines().next().unwrap_or("").trim().to_string();
    let chart = if texts.iter().all(|t| header(t) == CURVES_HEADER) {
        let mut series: Vec<CurveSeries> = Vec::new();
        for (t, p) in texts.iter().zip(inputs) {
            for s in parse_curves_csv(t).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))? {
                if series.iter().any(|o| o.seed == s.seed) {
                    bail!("{}: seed {} appears in more than one input", p.display(), s.seed);
                }
                series.push(s);
            }
        }
        plot::curves_chart(&series)?
    } else if texts.len() == 1 && header(&texts[0]) == SWEEP_HEADER {
        plot::sweep_chart(&parse_sweep_csv(&texts[0]).map_err(|e| anyhow::anyhow!("{}: {e}", inputs[0].display()))?)?
    } else {
        bail!("line 1: expected `{CURVES_HEADER}` in every input or a single file with `{SWEEP_HEADER}`");
    };
    let svg = chart.to_svg();
    let inputs: Vec<(PathBuf, &str)> = inputs.iter().map(|p| (p.clone(), "train")).collect();
    let m = begin("export-plot", cfg, &inputs)?;
    let stem = inputs[0].0.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let path = cfg.out.join(format!("{stem}.svg"));
    write(&path, &svg)?;
    println!("wrote {}", path.display());
    RunManifest::finish(&m)
}
