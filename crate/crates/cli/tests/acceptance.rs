//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use treebeam::corpus::{generate_synthetic, BehaviorSequence, Dataset, DatasetConfig, Event, SyntheticConfig};
use treebeam::eval::{evaluate_dataset, metrics, test_features};
use treebeam::features::UserFeatures;
use treebeam::flops::{count, format_table};
use treebeam::graph::{brute_force_cooccurrence, build_graph, count_cooccurrence, GraphParams, HierGraph, WeightMap};
use treebeam::multipath::{build_multipath, MultipathTree};
use treebeam::nn::{grad_check, GradCheckConfig, Model, ModelConfig, ParamGroup, Scorer};
use treebeam::retrieval::{
    beam_search, beam_search_multipath, beam_search_multipath_traced, beam_search_traced, exhaustive_retrieval,
    BeamConfig,
};
use treebeam::sampler::{expand, make_batch, training_pairs, RatioTable};
use treebeam::trainer::{train, TrainConfig, TrainReport};
use treebeam::tree::{build_random_tree, build_tree, max_level_for, Tree, TreeKind};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_treebeam")
}

fn treebeam(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .arg("--work-dir")
        .arg(dir)
        .current_dir(dir.parent().unwrap_or(dir))
        .env("TREEBEAM_LOG", "warn")
        .output()
        .map_err(|e| format!("cannot run treebeam: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "treebeam {} failed: {}{}",
            args.join(" "),
            stdout,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

/// The 1,024-item, 32-cluster corpus with a random tree, its graph and a
/// model with graph convolution and parent fusion trained for five epochs.
struct World {
    dataset: Dataset,
    tree: Tree,
    graph: HierGraph,
    model: Model,
    report: TrainReport,
    build_time: Duration,
}

fn desk_ratios() -> RatioTable {
    RatioTable::new(vec![0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4], 7).unwrap()
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let start = Instant::now();
        let records = generate_synthetic(&SyntheticConfig {
            num_items: 1024,
            num_clusters: 32,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let dataset = Dataset::build(
            &records,
            &DatasetConfig {
                num_test_users: 50,
                seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        let tree = build_tree(TreeKind::Random, &dataset, 7).unwrap();
        let graph = build_graph(&tree, &dataset.train_users, GraphParams::default()).unwrap();
        let mut model = Model::new(ModelConfig::default(), tree.num_node_ids(), 7).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            epochs: 5,
            base_lr: 3e-3,
            seed: 7,
            ratios: desk_ratios(),
            max_targets_per_user: Some(2),
            ..Default::default()
        };
        let report = train(&mut model, &tree, &graph, &dataset, &cfg).unwrap();
        World {
            dataset,
            tree,
            graph,
            model,
            report,
            build_time: start.elapsed(),
        }
    })
}

fn flop_table() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = treebeam(tmp.path(), &["flops", "--avg-k", "5"])?;
    let c = count(&ModelConfig::default(), 11, 5.0);
    ensure(c.gc == (144 * 72 + 72 * 24) * 11, "graph-convolution count")?;
    ensure(c.layers == [264 * 128, 128 * 64, 64 * 24], "backbone counts")?;
    ensure(c.head == 24 * 2, "head count")?;
    ensure(c.baseline() == 176_624 && c.with_pf() == 178_352, "baseline and parent-fusion totals")?;
    ensure(c.with_multipath() == 190_688.0, "multipath total")?;
    ensure(out == format_table(&c), "printed table differs from the cost model")?;
    let lines: Vec<&str> = out.lines().collect();
    let total = lines.iter().find(|l| l.starts_with("Total")).ok_or("no Total row")?;
    let inc = lines.iter().find(|l| l.starts_with("Increase")).ok_or("no Increase row")?;
    ensure(
        total.split_whitespace().collect::<Vec<_>>() == ["Total", "176624", "178352", "190688", "(avg_k=5)"],
        format!("total row {total:?}"),
    )?;
    ensure(
        inc.split_whitespace().collect::<Vec<_>>() == ["Increase", "+0%", "+1.0%", "+8.0%"],
        format!("increase row {inc:?}"),
    )?;
    Ok("176624 / 178352 / 190688, +1.0% / +8.0%".into())
}

fn instrumented_cost() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = treebeam(tmp.path(), &["flops", "--verify"])?;
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("instrumented")).collect();
    ensure(rows.len() == 24, format!("{} comparisons instead of 24", rows.len()))?;
    ensure(rows.iter().all(|l| l.ends_with(" ok")), "mismatching rows")?;
    Ok("24 flag/k combinations agree".into())
}

fn beam_vs_exhaustive() -> Check {
    let w = world();
    let scorer = Scorer::new(&w.model, &w.graph);
    let users = test_features(&w.dataset, &w.tree).map_err(|e| e.to_string())?;
    let width = (w.tree.max_level() - 1..=w.tree.max_level()).map(|l| w.tree.level_width(l)).max().unwrap();
    let cfg = BeamConfig {
        start_level: 9,
        beam_width: width,
        multipath_quota: width,
        final_k: 200,
    };
    for (i, u) in users.iter().take(10).enumerate() {
        let beam = beam_search(&scorer, &w.tree, u, &cfg).map_err(|e| e.to_string())?;
        let ex = exhaustive_retrieval(&scorer, &w.tree, u, 200).map_err(|e| e.to_string())?;
        ensure(beam.items.len() == 200, "short result")?;
        ensure(beam.item_ids() == ex.item_ids(), format!("user {i}: order differs"))?;
        let bits = |r: &treebeam::retrieval::RetrievalResult| r.items.iter().map(|x| x.1.to_bits()).collect::<Vec<_>>();
        ensure(bits(&beam) == bits(&ex), format!("user {i}: scores differ"))?;
    }
    Ok(format!("10 users, beam width {width}, training {:.0}s", w.build_time.as_secs_f64()))
}

/// Independent pair counter: every ordered position pair i < j.
fn oracle_weights(tree: &Tree, seqs: &[BehaviorSequence], t_minutes: u64, level: usize) -> WeightMap {
    let mut w = WeightMap::new();
    for s in seqs {
        let nodes: Vec<_> = s.events.iter().map(|e| (tree.item_ancestor(e.item_id, level).unwrap(), e.timestamp)).collect();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let ((u, tu), (v, tv)) = (nodes[i], nodes[j]);
                if u != v && tu.abs_diff(tv) <= t_minutes * 60 {
                    *w.entry((u.min(v), u.max(v))).or_default() += 1;
                }
            }
        }
    }
    w
}

fn graph_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    let tree = build_random_tree(&(0..300).collect::<Vec<_>>(), 4).map_err(|e| e.to_string())?;
    let seqs: Vec<BehaviorSequence> = (0..200u64)
        .map(|u| {
            let n = rng.random_range(2..25);
            let mut t = 0u64;
            let events = (0..n)
                .map(|_| {
                    t += rng.random_range(0..1200);
                    Event {
                        item_id: rng.random_range(0..300),
                        timestamp: t,
                    }
                })
                .collect();
            BehaviorSequence { user_id: u, events }
        })
        .collect();
    let params = GraphParams {
        t_minutes: 30,
        k_max: 5,
        start_level: 6,
    };
    let g = build_graph(&tree, &seqs, params).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for level in [6, 7, tree.max_level()] {
        let fast = count_cooccurrence(&tree, &seqs, 30, level).map_err(|e| e.to_string())?;
        let brute = brute_force_cooccurrence(&tree, &seqs, 30, level).map_err(|e| e.to_string())?;
        let oracle = oracle_weights(&tree, &seqs, 30, level);
        ensure(fast == oracle && brute == oracle, format!("level {level}: weights differ"))?;
        let mut full: BTreeMap<_, Vec<(u64, _)>> = BTreeMap::new();
        for (&(u, v), &wt) in &oracle {
            full.entry(u).or_default().push((wt, v));
            full.entry(v).or_default().push((wt, u));
        }
        for n in tree.level_nodes(level) {
            let mut all = full.remove(&n).unwrap_or_default();
            all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let got: Vec<_> = g.neighbors(n).iter().map(|x| (x.weight, x.node)).collect();
            ensure(got.len() == all.len().min(5), format!("{n}: {} neighbors of {}", got.len(), all.len()))?;
            ensure(got[..] == all[..got.len()], format!("{n}: pruned list order"))?;
            checked += 1;
        }
    }
    Ok(format!("200 sequences, 3 levels, {checked} neighbor lists"))
}

fn gradient_check() -> Check {
    let w = world();
    let pairs: Vec<_> = training_pairs(&w.dataset, Some(1)).into_iter().take(2).collect();
    let batch = make_batch(&w.dataset, &pairs, &w.tree, &desk_ratios(), |p| StdRng::seed_from_u64(p.user as u64))
        .map_err(|e| e.to_string())?;
    let batch: Vec<_> = batch
        .into_iter()
        .flat_map(|p| {
            let f = p.features;
            p.samples.into_iter().map(move |s| (f.clone(), s))
        })
        .collect();
    let cfg = GradCheckConfig {
        per_group: 100,
        tolerance: 1e-5,
        seed: 3,
        ..Default::default()
    };
    let mut summary = Vec::new();
    for (label, mpf) in [("standard", false), ("multipath", true)] {
        let mut model = Model::new(ModelConfig::default(), w.tree.num_node_ids(), 11).unwrap();
        model.set_flags(true, true, mpf);
        let r = grad_check(&model, &w.graph, &batch, &cfg).map_err(|e| e.to_string())?;
        ensure(r.passed(), format!("{label}: max relative error {:.3e}", r.max_rel_error()))?;
        let mut sizes: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        for (g, range) in model.group_ranges() {
            *sizes.entry(g).or_default() += range.len();
        }
        for g in ParamGroup::ALL {
            let want = sizes.get(&g).copied().unwrap_or(0).min(100);
            ensure(want > 0 && r.count(g) >= want, format!("{label}: {} parameters of {g:?}", r.count(g)))?;
        }
        summary.push(format!("{label} {} params max {:.1e}", r.entries.len(), r.max_rel_error()));
    }
    Ok(summary.join(", "))
}

fn training_sanity() -> Check {
    let w = world();
    let losses = &w.report.epoch_losses;
    ensure(losses.len() == 5, "five epochs")?;
    ensure(losses.windows(2).all(|p| p[1] < p[0]), format!("losses not decreasing: {losses:?}"))?;
    let scorer = Scorer::new(&w.model, &w.graph);
    let users = test_features(&w.dataset, &w.tree).map_err(|e| e.to_string())?;
    let cfg = BeamConfig {
        final_k: 20,
        ..Default::default()
    };
    let preds: Vec<Vec<u64>> = users
        .iter()
        .map(|u| beam_search(&scorer, &w.tree, u, &cfg).map(|r| r.item_ids()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let r = evaluate_dataset(&preds, &w.dataset).map_err(|e| e.to_string())?;
    let random = 20.0 / 1024.0;
    ensure(r.recall >= 5.0 * random, format!("recall@20 {:.4} below 5x random", r.recall))?;
    Ok(format!("recall@20 {:.2}% ({:.1}x random), losses {:?}", 100.0 * r.recall, r.recall / random, losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>()))
}

fn multipath_structure() -> Check {
    let w = world();
    let m = build_multipath(&w.tree, &w.graph, 3).map_err(|e| e.to_string())?;
    ensure(!m.is_binary(), "graph produced no extra parents")?;
    for &item in w.tree.leaf_items() {
        ensure(m.is_valid_path(&m.binary_path(item).unwrap()), format!("binary path of {item} invalid"))?;
    }
    let mut seen = HashSet::new();
    let mut frontier = vec![treebeam::tree::NodeId::ROOT];
    while let Some(n) = frontier.pop() {
        if seen.insert(n) {
            frontier.extend(m.all_children(n));
        }
    }
    let reachable = w.tree.leaf_items().iter().filter(|&&i| seen.contains(&w.tree.leaf_of(i).unwrap())).count();
    ensure(reachable == w.tree.num_items(), "unreachable items")?;

    let empty = HierGraph::empty(GraphParams::default());
    let degenerate = build_multipath(&w.tree, &empty, 3).map_err(|e| e.to_string())?;
    ensure(degenerate.is_binary(), "empty graph added edges")?;
    let scorer = Scorer::new(&w.model, &empty);
    let users = test_features(&w.dataset, &w.tree).map_err(|e| e.to_string())?;
    for &item in w.tree.leaf_items().iter().step_by(64) {
        let p = degenerate.best_path(&scorer, &users[0], item).map_err(|e| e.to_string())?;
        ensure(p.nodes == w.tree.binary_path(item).unwrap(), format!("best path of {item} left the chain"))?;
    }
    let scorer = Scorer::new(&w.model, &w.graph);
    let cfg = BeamConfig {
        beam_width: 50,
        multipath_quota: 50,
        final_k: 50,
        ..Default::default()
    };
    for u in users.iter().take(10) {
        let a = beam_search(&scorer, &w.tree, u, &cfg).map_err(|e| e.to_string())?;
        let b = beam_search_multipath(&scorer, &degenerate, u, &cfg).map_err(|e| e.to_string())?;
        ensure(a == b, "degenerate multipath search differs")?;
    }
    Ok(format!("{} extra edges, {} items reachable", m.num_extra_edges(), reachable))
}

fn level_arithmetic() -> Check {
    let amazon = max_level_for(1_477_922) + 1;
    let ub = max_level_for(4_162_024) + 1;
    ensure(amazon == 22, format!("{amazon} levels for 1,477,922 items"))?;
    ensure(ub == 23, format!("{ub} levels for 4,162,024 items"))?;
    Ok("22 and 23 levels".into())
}

fn sampler_tables() -> Check {
    let amazon = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 17, 19, 22, 30, 55, 100];
    let ub = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 17, 19, 22, 25, 30, 76, 200];
    ensure(RatioTable::amazon().x == amazon, "amazon table")?;
    ensure(RatioTable::userbehavior().x == ub, "userbehavior table")?;
    ensure(RatioTable::amazon().start_level == 7 && RatioTable::userbehavior().start_level == 7, "start level")?;
    for t in [RatioTable::amazon(), RatioTable::userbehavior()] {
        let want: usize = t.x[t.start_level..].iter().map(|x| 1 + x).sum();
        ensure(t.expansion() == want, "expansion formula")?;
    }
    // A tree wide enough that no level runs out of negatives.
    let tree = build_random_tree(&(0..(1 << 12)).collect::<Vec<_>>(), 2).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(1);
    for table in [RatioTable::amazon().truncated(12).unwrap(), RatioTable::userbehavior().truncated(12).unwrap()] {
        let want: usize = table.x[7..].iter().map(|x| 1 + x).sum();
        for item in [0u64, 77, 4095] {
            let n = expand(&tree, &tree.binary_path(item).unwrap(), &table, &mut rng).len();
            ensure(n == want, format!("expanded {n} samples, expected {want}"))?;
        }
    }
    Ok("both tables match; expansion = sum(1 + x[l])".into())
}

const DETERMINISM_CONFIG: &str = r#"{
  "synthetic": {"num_users": 200, "events_per_user": 16},
  "dataset": {"num_test_users": 20}
}"#;

const DETERMINISM_OVERRIDES: [&str; 4] = ["--set", "train.epochs=2", "--set", "beam.final_k=50"];

fn pipeline(dir: &Path, config: &Path) -> Result<(), String> {
    let c = config.to_str().unwrap();
    for args in [
        vec!["synth"],
        vec!["ingest"],
        vec!["build-tree", "--kind", "random"],
        vec!["build-graph"],
        vec!["build-multipath"],
        vec!["train"],
        vec!["finetune"],
        vec!["retrieve"],
        vec!["retrieve", "--multipath"],
        vec!["eval"],
    ] {
        let mut a = args.clone();
        a.extend(["--config", c, "--workers", "1", "--seed", "11"]);
        a.extend(DETERMINISM_OVERRIDES);
        treebeam(dir, &a)?;
    }
    Ok(())
}

const DETERMINISTIC_FILES: [&str; 12] = [
    "records.csv",
    "dataset.json",
    "tree.json",
    "graph.json",
    "multipath.json",
    "checkpoints/epoch-001.json",
    "checkpoints/epoch-002.json",
    "model.json",
    "finetuned.json",
    "item-paths.json",
    "out/retrieval.csv",
    "out/retrieval-multipath.csv",
];

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &config)?;
    pipeline(&b, &config)?;
    for f in DETERMINISTIC_FILES {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    ensure(a.join("out/metrics-tree.csv").exists(), "no metrics CSV")?;
    let c = config.to_str().unwrap();
    for (args, file) in [(vec!["retrieve"], "out/retrieval.csv"), (vec!["retrieve", "--multipath"], "out/retrieval-multipath.csv")] {
        let single = std::fs::read(a.join(file)).unwrap();
        let mut args = args.clone();
        args.extend(["--config", c, "--workers", "4", "--seed", "11"]);
        args.extend(DETERMINISM_OVERRIDES);
        treebeam(&a, &args)?;
        ensure(std::fs::read(a.join(file)).unwrap() == single, format!("{file} depends on workers"))?;
    }
    Ok(format!("{} artifacts identical; 4-worker retrieval matches", DETERMINISTIC_FILES.len()))
}

fn metrics_suite() -> Check {
    let set = |v: &[u64]| v.iter().copied().collect::<BTreeSet<u64>>();
    let m = metrics(&[1, 2, 3, 4], &set(&[3, 4, 5, 6, 7, 8]));
    ensure(m.precision() == 0.5 && m.recall() == 1.0 / 3.0 && m.f_measure() == 0.4, "worked example")?;
    let same = metrics(&[1, 2, 3], &set(&[1, 2, 3]));
    ensure((same.precision(), same.recall(), same.f_measure()) == (1.0, 1.0, 1.0), "identical sets")?;
    let none = metrics(&[1, 2], &set(&[3, 4]));
    ensure((none.precision(), none.recall(), none.f_measure()) == (0.0, 0.0, 0.0), "0/0 convention")?;
    let half = metrics(&[1, 2], &set(&[1]));
    ensure(half.f_measure() == 2.0 / 3.0, "2PR/(P+R) with P=1/2, R=1")?;
    Ok("P=0.5 R=1/3 F=0.4; identical; disjoint 0/0".into())
}

fn parent_cache() -> Check {
    let w = world();
    let scorer = Scorer::new(&w.model, &w.graph);
    let mut rng = StdRng::seed_from_u64(12);
    let items = w.tree.leaf_items();
    let users: Vec<UserFeatures> = (0..50)
        .map(|_| {
            let n = rng.random_range(1..30);
            let events = (0..n)
                .map(|t| Event {
                    item_id: items[rng.random_range(0..items.len())],
                    timestamp: t,
                })
                .collect();
            UserFeatures::from_sequence(&BehaviorSequence { user_id: 0, events }, 10, &w.tree).unwrap()
        })
        .collect();
    let cfg = BeamConfig {
        start_level: 5,
        beam_width: 20,
        multipath_quota: 40,
        final_k: 20,
    };
    let mut mp_model = w.model.clone();
    mp_model.set_flags(true, true, true);
    let mp_scorer = Scorer::new(&mp_model, &w.graph);
    let mtree: MultipathTree = build_multipath(&w.tree, &w.graph, 3).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for u in &users {
        let (_, trace) = beam_search_traced(&scorer, &w.tree, u, &cfg).map_err(|e| e.to_string())?;
        for c in trace.iter().flatten() {
            let cold = scorer.score_on_path(u, c.node, c.parent, c.grandparent);
            ensure(cold.to_bits() == c.score.to_bits(), format!("{}: cached score differs", c.node))?;
            compared += 1;
        }
        let (_, trace) = beam_search_multipath_traced(&mp_scorer, &mtree, u, &cfg).map_err(|e| e.to_string())?;
        for c in trace.iter().flatten() {
            let cold = mp_scorer.score_on_path(u, c.node, c.parent, c.grandparent);
            ensure(cold.to_bits() == c.score.to_bits(), format!("{}: cached multipath score differs", c.node))?;
            compared += 1;
        }
    }
    Ok(format!("50 users, {compared} scores bit-identical"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 12] = [
        ("flop table", Duration::from_secs(1), flop_table),
        ("instrumented cost", Duration::from_secs(10), instrumented_cost),
        ("beam vs exhaustive", Duration::from_secs(120), beam_vs_exhaustive),
        ("graph builder oracle", Duration::from_secs(10), graph_oracle),
        ("gradient check", Duration::from_secs(30), gradient_check),
        ("training sanity", Duration::from_secs(180), training_sanity),
        ("multipath structure", Duration::from_secs(30), multipath_structure),
        ("level arithmetic", Duration::from_secs(1), level_arithmetic),
        ("sampler tables", Duration::from_secs(1), sampler_tables),
        ("determinism", Duration::from_secs(300), determinism),
        ("metrics", Duration::from_secs(1), metrics_suite),
        ("parent cache", Duration::from_secs(30), parent_cache),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = outcome.and_then(|m| {
            if took > *budget {
                Err(format!("{m}; took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs()))
            } else {
                Ok(m)
            }
        });
        match outcome {
            Ok(m) => println!("PASS {:>2} {name}: {m} ({:.2}s)", i + 1, took.as_secs_f64()),
            Err(m) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {m} ({:.2}s)", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
