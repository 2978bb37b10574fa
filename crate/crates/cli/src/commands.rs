//! One function per subcommand.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use treebeam::artifact::{self, derive_seed};
use treebeam::corpus::{generate_synthetic, parse_behavior_log, BehaviorRecord, Dataset, ItemId};
use treebeam::eval::{
    ablation_run, evaluate_dataset, format_report, itemcf_fit, itemcf_retrieve, random_retrieve, test_features,
    AblationConfig, AblationRow, MetricsReport,
};
use treebeam::flops::{self, count, format_table, measure_avg_k};
use treebeam::graph::{build_graph, HierGraph};
use treebeam::multipath::{build_multipath, MultipathTree, PathTable};
use treebeam::nn::{grad_check, Checkpoint, GradCheckConfig, Model, ModelConfig, ParamGroup, SampleSpec, Scorer, TrainProgress};
use treebeam::retrieval::{retrieve_all, BeamConfig, RetrievalIndex, RetrievalResult};
use treebeam::sampler::{make_batch, training_pairs};
use treebeam::trainer::{finetune_multipath, run, FinetuneConfig, PathMode, TrainConfig, TrainInputs, TrainState};
use treebeam::tree::{build_random_tree, build_tree, Tree, TreeKind};
use treebeam::features::UserFeatures;

use crate::config::Stage;
use crate::failure::Failure;
use crate::store::{self, Store};

type Outcome = Result<(), Failure>;

fn lib_io(path: &Path, f: Failure) -> treebeam::Error {
    match f {
        Failure::Io { source, .. } => treebeam::Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => treebeam::Error::Inconsistent(other.to_string()),
    }
}

fn load_dataset(s: &mut Store) -> Result<Dataset, Failure> {
    let p = s.cfg.path(&s.cfg.paths.dataset);
    let bytes = s.read_stamped(&p, Stage::Data, "dataset", "ingest")?;
    Ok(artifact::from_json_bytes(&bytes)?)
}

fn load_tree(s: &mut Store) -> Result<Tree, Failure> {
    let p = s.cfg.path(&s.cfg.paths.tree);
    let bytes = s.read_stamped(&p, Stage::Tree, "tree", "build-tree")?;
    Ok(Tree::from_json_bytes(&bytes)?)
}

fn load_graph(s: &mut Store) -> Result<HierGraph, Failure> {
    let p = s.cfg.path(&s.cfg.paths.graph);
    let bytes = s.read_stamped(&p, Stage::Graph, "graph", "build-graph")?;
    Ok(artifact::from_json_bytes(&bytes)?)
}

fn load_multipath(s: &mut Store, tree: &Tree) -> Result<MultipathTree, Failure> {
    let p = s.cfg.path(&s.cfg.paths.multipath);
    let bytes = s.read_stamped(&p, Stage::Multipath, "multipath index", "build-multipath")?;
    Ok(MultipathTree::from_json_bytes(&bytes, tree)?)
}

fn load_checkpoint(s: &mut Store, path: &Path, stage: Stage, command: &'static str) -> Result<Checkpoint, Failure> {
    let bytes = s.read_stamped(path, stage, "model checkpoint", command)?;
    let c: Checkpoint = artifact::from_json_bytes(&bytes)?;
    c.model()?;
    Ok(c)
}

fn checkpoint_bytes(c: &Checkpoint) -> Result<Vec<u8>, Failure> {
    Ok(artifact::to_json_bytes(c, "checkpoint")?)
}

fn outputs(s: &Store) -> PathBuf {
    s.cfg.path(&s.cfg.paths.outputs)
}

fn clamped_beam(cfg: &BeamConfig, tree: &Tree) -> Result<BeamConfig, Failure> {
    cfg.validate()?;
    let mut b = *cfg;
    if b.start_level > tree.max_level() {
        log::info!("start level {} is below the leaves; starting at {}", b.start_level, tree.max_level());
        b.start_level = tree.max_level();
    }
    Ok(b)
}

fn train_config(s: &Store) -> TrainConfig {
    TrainConfig {
        workers: s.cfg.workers(),
        ..s.cfg.train.clone()
    }
}

pub fn synth(s: &mut Store) -> Outcome {
    let records = s.timed("generate", || generate_synthetic(&s.cfg.synthetic))?;
    let mut csv = String::from("user_id,item_id,category_id,behavior_type,timestamp\n");
    for r in &records {
        let _ = writeln!(csv, "{},{},{},{},{}", r.user_id, r.item_id, r.category_id, r.behavior_type, r.timestamp);
    }
    let p = s.cfg.path(&s.cfg.paths.records);
    s.write(&p, csv.as_bytes())?;
    println!("{} records for {} users and {} items", records.len(), s.cfg.synthetic.num_users, s.cfg.synthetic.num_items);
    Ok(())
}

pub fn ingest(s: &mut Store) -> Outcome {
    let (path, has_header, command) = match &s.cfg.log.path {
        Some(p) => (p.clone(), s.cfg.log.has_header, "ingest"),
        None => (s.cfg.path(&s.cfg.paths.records), true, "synth"),
    };
    let bytes = s.read(&path, "behavior log", command)?;
    let records: Vec<BehaviorRecord> = parse_behavior_log(&bytes[..], has_header)?;
    let ds = s.timed("build", || Dataset::build(&records, &s.cfg.dataset))?;
    let p = s.cfg.path(&s.cfg.paths.dataset);
    s.write_stamped(&p, Stage::Data, &artifact::to_json_bytes(&ds, "dataset")?)?;
    let c = ds.counts;
    println!(
        "{} users ({} train, {} test), {} items, {} categories, {} behaviors",
        c.num_users,
        ds.train_users.len(),
        ds.test_users.len(),
        c.num_items,
        c.num_categories,
        c.num_records
    );
    Ok(())
}

pub fn build_tree_cmd(s: &mut Store) -> Outcome {
    let ds = load_dataset(s)?;
    let kind = s.cfg.tree_kind;
    let seed = s.cfg.tree_seed();
    let tree = s.timed("build", || build_tree(kind, &ds, seed))?;
    let p = s.cfg.path(&s.cfg.paths.tree);
    s.write_stamped(&p, Stage::Tree, &tree.to_json_bytes()?)?;
    println!("{kind} tree over {} items with {} levels", tree.num_items(), tree.max_level() + 1);
    Ok(())
}

pub fn build_graph_cmd(s: &mut Store) -> Outcome {
    let ds = load_dataset(s)?;
    let tree = load_tree(s)?;
    let params = s.cfg.graph;
    let g = s.timed("build", || build_graph(&tree, &ds.train_users, params))?;
    let p = s.cfg.path(&s.cfg.paths.graph);
    s.write_stamped(&p, Stage::Graph, &artifact::to_json_bytes(&g, "graph")?)?;
    for level in g.levels() {
        println!("level {level}: {} edges", g.edges(level).len());
    }
    Ok(())
}

pub fn build_multipath_cmd(s: &mut Store) -> Outcome {
    let tree = load_tree(s)?;
    let g = load_graph(s)?;
    let m = build_multipath(&tree, &g, s.cfg.max_extra_parents)?;
    let p = s.cfg.path(&s.cfg.paths.multipath);
    s.write_stamped(&p, Stage::Multipath, &m.to_json_bytes()?)?;
    let k = measure_avg_k(&m);
    println!("{} extra parent edges, avg graph-children k = {:.3}", m.num_extra_edges(), k.overall);
    Ok(())
}

fn latest_epoch(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".json"))
        })
        .collect();
    found.sort();
    found.pop()
}

pub fn train(s: &mut Store, resume: bool) -> Outcome {
    let ds = load_dataset(s)?;
    let tree = load_tree(s)?;
    let g = load_graph(s)?;
    let cfg = train_config(s);
    let dir = s.cfg.path(&s.cfg.paths.checkpoints);
    let (mut model, mut state) = match latest_epoch(&dir).filter(|_| resume) {
        Some(p) => {
            let c = load_checkpoint(s, &p, Stage::Model, "train")?;
            log::info!("resuming from {}", p.display());
            (c.model()?, TrainState::from_checkpoint(&c)?)
        }
        None => {
            let mut mc = s.cfg.model.clone();
            mc.use_multipath_pf = false;
            let m = Model::new(mc, tree.num_node_ids(), s.cfg.model_seed())?;
            let st = TrainState::fresh(&m);
            (m, st)
        }
    };
    if !resume && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
    }
    let inputs = TrainInputs {
        tree: &tree,
        graph: &g,
        dataset: &ds,
        mode: PathMode::Binary,
    };
    let hash = s.cfg.stage_hash(Stage::Model);
    let mut written: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut sink = |c: &Checkpoint| -> treebeam::Result<PathBuf> {
        let p = dir.join(format!("epoch-{:03}.json", c.progress.epoch));
        let bytes = checkpoint_bytes(c)
            .and_then(|b| store::stamp(&b, &hash))
            .map_err(|f| lib_io(&p, f))?;
        store::write_atomic(&p, &bytes).map_err(|f| lib_io(&p, f))?;
        written.push((p.clone(), bytes));
        Ok(p)
    };
    let report = run(&mut model, &mut state, &inputs, &cfg, Some(&mut sink))?;
    for (p, bytes) in &written {
        s.write(p, bytes)?;
    }
    let final_ckpt = state.checkpoint(&model, &cfg);
    let mp = s.cfg.path(&s.cfg.paths.model);
    s.write_stamped(&mp, Stage::Model, &checkpoint_bytes(&final_ckpt)?)?;
    let rp = outputs(s).join("train-report.json");
    s.write(&rp, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {l:.6}", i + 1);
    }
    println!("{} iterations, {} samples, {:.1}s", report.iterations, report.samples, report.wall_time_secs);
    Ok(())
}

pub fn finetune(s: &mut Store) -> Outcome {
    let ds = load_dataset(s)?;
    let tree = load_tree(s)?;
    let g = load_graph(s)?;
    let m = load_multipath(s, &tree)?;
    let mp = s.cfg.path(&s.cfg.paths.model);
    let c = load_checkpoint(s, &mp, Stage::Model, "train")?;
    let mut model = c.model()?;
    let cfg = FinetuneConfig {
        train: TrainConfig {
            epochs: s.cfg.finetune_epochs,
            ..train_config(s)
        },
        enable_multipath_pf: true,
    };
    let out = finetune_multipath(&mut model, &m, &g, &ds, &cfg)?;
    let ckpt = Checkpoint::new(
        &model,
        None,
        TrainProgress {
            epoch: out.report.epoch_losses.len(),
            iteration: out.report.iterations,
            epoch_losses: out.report.epoch_losses.clone(),
            ..Default::default()
        },
        serde_json::to_value(&cfg.train).expect("config serializes"),
    );
    let fp = s.cfg.path(&s.cfg.paths.finetuned);
    s.write_stamped(&fp, Stage::Finetune, &checkpoint_bytes(&ckpt)?)?;
    let pp = s.cfg.path(&s.cfg.paths.item_paths);
    s.write_stamped(&pp, Stage::Finetune, &out.table.to_json_bytes()?)?;
    let moved = out
        .paths
        .iter()
        .filter(|p| tree.binary_path(p.item_id).map_or(false, |b| b != p.nodes))
        .count();
    println!("{moved} of {} training paths leave the binary chain", out.paths.len());
    for (i, l) in out.report.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {l:.6}", i + 1);
    }
    Ok(())
}

fn retrieval_csv_path(s: &Store, multipath: bool) -> PathBuf {
    outputs(s).join(if multipath { "retrieval-multipath.csv" } else { "retrieval.csv" })
}

pub fn retrieve(s: &mut Store, multipath: bool) -> Outcome {
    let ds = load_dataset(s)?;
    let tree = load_tree(s)?;
    let g = load_graph(s)?;
    let beam = clamped_beam(&s.cfg.beam, &tree)?;
    let workers = s.cfg.workers();
    let results: Vec<RetrievalResult> = if multipath {
        let m = load_multipath(s, &tree)?;
        let fp = s.cfg.path(&s.cfg.paths.finetuned);
        let model = load_checkpoint(s, &fp, Stage::Finetune, "finetune")?.model()?;
        let pp = s.cfg.path(&s.cfg.paths.item_paths);
        let bytes = s.read_stamped(&pp, Stage::Finetune, "item path table", "finetune")?;
        let table = PathTable::from_json_bytes(&bytes, &m)?;
        let users = test_features(&ds, &table)?;
        let scorer = Scorer::new(&model, &g);
        s.timed("retrieve", || retrieve_all(&scorer, &RetrievalIndex::Multipath(&m), &users, &beam, workers))?
    } else {
        let mp = s.cfg.path(&s.cfg.paths.model);
        let model = load_checkpoint(s, &mp, Stage::Model, "train")?.model()?;
        let users = test_features(&ds, &tree)?;
        let scorer = Scorer::new(&model, &g);
        s.timed("retrieve", || retrieve_all(&scorer, &RetrievalIndex::Binary(&tree), &users, &beam, workers))?
    };
    let mut csv = String::from("user_id,rank,item_id,score\n");
    for (u, r) in ds.test_users.iter().zip(&results) {
        for (rank, (item, score)) in r.items.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{}", u.features.user_id, rank + 1, item, score);
        }
    }
    let p = retrieval_csv_path(s, multipath);
    s.write(&p, csv.as_bytes())?;
    println!("retrieved {} items for each of {} users", beam.final_k, results.len());
    Ok(())
}

fn read_predictions(bytes: &[u8], path: &Path) -> Result<HashMap<u64, Vec<(usize, ItemId)>>, Failure> {
    let text = std::str::from_utf8(bytes).map_err(|_| Failure::Check(format!("{} is not UTF-8", path.display())))?;
    let mut out: HashMap<u64, Vec<(usize, ItemId)>> = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Failure::Check(format!("{}:{}: expected user_id,rank,item_id,score", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let user: u64 = f[0].parse().map_err(|_| bad())?;
        let rank: usize = f[1].parse().map_err(|_| bad())?;
        let item: ItemId = f[2].parse().map_err(|_| bad())?;
        out.entry(user).or_default().push((rank, item));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Tree,
    Multipath,
    Itemcf,
    Random,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Tree => "tree",
            Method::Multipath => "multipath",
            Method::Itemcf => "itemcf",
            Method::Random => "random",
        }
    }
}

pub fn eval(s: &mut Store, method: Method) -> Outcome {
    let ds = load_dataset(s)?;
    let m = s.cfg.beam.final_k;
    let preds: Vec<Vec<ItemId>> = match method {
        Method::Tree | Method::Multipath => {
            let p = retrieval_csv_path(s, method == Method::Multipath);
            let command = if method == Method::Tree { "retrieve" } else { "retrieve --multipath" };
            let bytes = s.read(&p, "retrieval output", command)?;
            let mut by_user = read_predictions(&bytes, &p)?;
            ds.test_users
                .iter()
                .map(|u| {
                    let mut r = by_user.remove(&u.features.user_id).unwrap_or_default();
                    r.sort_unstable();
                    r.into_iter().map(|(_, i)| i).collect()
                })
                .collect()
        }
        Method::Itemcf => {
            let model = s.timed("fit", || itemcf_fit(&ds.train_users, s.cfg.itemcf_neighbors));
            ds.test_users.iter().map(|u| itemcf_retrieve(&model, &u.features, m).item_ids()).collect()
        }
        Method::Random => {
            let items = ds.items();
            ds.test_users
                .iter()
                .enumerate()
                .map(|(i, u)| random_retrieve(&items, &u.features, m, derive_seed(&[s.cfg.seed, 6, i as u64])))
                .collect()
        }
    };
    let report = evaluate_dataset(&preds, &ds)?;
    let csv = metrics_csv(method.name(), m, &report);
    let p = outputs(s).join(format!("metrics-{}.csv", method.name()));
    s.write(&p, csv.as_bytes())?;
    println!("{}", format_report(&format!("{}@{m}", method.name()), &report));
    Ok(())
}

pub fn metrics_csv(method: &str, m: usize, r: &MetricsReport) -> String {
    format!(
        "method,metric_at,precision,recall,f_measure,users,skipped_users\n{method},{m},{:.6},{:.6},{:.6},{},{}\n",
        r.precision, r.recall, r.f_measure, r.users, r.skipped_users
    )
}

pub fn ablate(s: &mut Store) -> Outcome {
    let ds = load_dataset(s)?;
    let kind = s.cfg.tree_kind;
    let cfg = AblationConfig {
        rows: AblationRow::standard(),
        model: s.cfg.model.clone(),
        train: train_config(s),
        finetune_epochs: s.cfg.finetune_epochs,
        graph: s.cfg.graph,
        max_extra_parents: s.cfg.max_extra_parents,
        beam: s.cfg.beam,
        seed: s.cfg.seed,
        workers: s.cfg.workers(),
    };
    let table = s.timed("ablation", || ablation_run(&ds, kind, &cfg))?;
    let dir = outputs(s);
    s.write(&dir.join(format!("ablation-{kind}.csv")), table.to_csv().as_bytes())?;
    let text = table.format_text();
    s.write(&dir.join(format!("ablation-{kind}.txt")), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Instrumented counts for every flag combination and `k` in {0, 3, 5},
/// compared with the analytic model.
pub fn verify_flops(base: &ModelConfig) -> Result<Vec<(String, usize, u64, f64)>, Failure> {
    let tree = build_random_tree(&(0..64).collect::<Vec<_>>(), 1)?;
    let graph = HierGraph::empty(Default::default());
    let mut windows = vec![Vec::new(); base.num_windows];
    windows[0] = vec![1, 2];
    let user = UserFeatures::trace(&treebeam::corpus::WindowedFeatures { windows }, &tree)?;
    let node = tree.level_nodes(4)[0];
    let original = tree.children(node);
    let others: Vec<_> = tree.level_nodes(5).into_iter().filter(|c| c.parent() != Some(node)).collect();
    let mut rows = Vec::new();
    for mask in 0..8u8 {
        let mut cfg = base.clone();
        cfg.use_gc = mask & 1 != 0;
        cfg.use_pf = mask & 2 != 0;
        cfg.use_multipath_pf = mask & 4 != 0;
        let model = Model::new(cfg.clone(), tree.num_node_ids(), 1)?;
        let scorer = Scorer::new(&model, &graph);
        for k in [0usize, 3, 5] {
            let got = flops::empirical_multiply_counter(&scorer, &user, node, &original, &others[..k]);
            let want = count(&cfg, cfg.group_len, k as f64).total();
            let label = format!("gc={} pf={} mpf={}", cfg.use_gc as u8, cfg.use_pf as u8, cfg.use_multipath_pf as u8);
            rows.push((label, k, got, want));
        }
    }
    Ok(rows)
}

pub fn flops_cmd(s: &mut Store, avg_k: Option<f64>, measure: bool, verify: bool) -> Outcome {
    let k = if measure {
        let tree = load_tree(s)?;
        let m = load_multipath(s, &tree)?;
        let k = measure_avg_k(&m);
        for (level, v) in &k.per_level {
            println!("level {level}: avg k {v:.3}");
        }
        k.overall
    } else {
        avg_k.unwrap_or(5.0)
    };
    let c = count(&s.cfg.model, s.cfg.model.group_len, k);
    print!("{}", format_table(&c));
    if verify {
        let rows = verify_flops(&s.cfg.model)?;
        let mut bad = 0;
        for (label, k, got, want) in &rows {
            let ok = *got as f64 == *want;
            bad += usize::from(!ok);
            println!("{label} k={k}: instrumented {got}, analytic {want} {}", if ok { "ok" } else { "MISMATCH" });
        }
        if bad > 0 {
            return Err(Failure::Check(format!("{bad} instrumented counts differ from the analytic model")));
        }
    }
    Ok(())
}

/// A small batch of training samples for gradient checks.
pub fn gradcheck_batch(ds: &Dataset, tree: &Tree, cfg: &TrainConfig, pairs: usize) -> Result<Vec<(UserFeatures, SampleSpec)>, Failure> {
    let mut ratios = cfg.ratios.clone();
    if ratios.max_level() > tree.max_level() {
        ratios = ratios.truncated(tree.max_level())?;
    }
    let all = training_pairs(ds, Some(1));
    let chosen: Vec<_> = all.into_iter().take(pairs).collect();
    let seed = cfg.seed;
    let batch = make_batch(ds, &chosen, tree, &ratios, |p| {
        ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 9, p.user as u64, p.target as u64]))
    })?;
    Ok(batch
        .into_iter()
        .flat_map(|p| {
            let f = p.features;
            p.samples.into_iter().map(move |s| (f.clone(), s))
        })
        .collect())
}

pub fn gradcheck(s: &mut Store, checkpoint: Option<PathBuf>, all_flags: bool) -> Outcome {
    let ds = load_dataset(s)?;
    let tree = load_tree(s)?;
    let g = load_graph(s)?;
    let base = match checkpoint {
        Some(p) => load_checkpoint(s, &p, Stage::Model, "train")?.model()?,
        None => Model::new(s.cfg.model.clone(), tree.num_node_ids(), s.cfg.model_seed())?,
    };
    let batch = gradcheck_batch(&ds, &tree, &s.cfg.train, 2)?;
    let flags: Vec<(bool, bool, bool)> = if all_flags {
        (0..8u8).map(|m| (m & 1 != 0, m & 2 != 0, m & 4 != 0)).collect()
    } else {
        let c = base.config();
        vec![(c.use_gc, c.use_pf, c.use_multipath_pf)]
    };
    let cfg = GradCheckConfig {
        per_group: s.cfg.gradcheck_per_group,
        seed: derive_seed(&[s.cfg.seed, 8]),
        ..Default::default()
    };
    let mut reports = Vec::new();
    let mut failed = false;
    for (gc, pf, mpf) in flags {
        let mut model = base.clone();
        model.set_flags(gc, pf, mpf);
        let r = s.timed("check", || grad_check(&model, &g, &batch, &cfg))?;
        let counts: Vec<String> = ParamGroup::ALL.iter().map(|gr| format!("{gr:?} {}", r.count(*gr))).collect();
        println!(
            "gc={} pf={} mpf={}: {} parameters, max rel error {:.3e}, {} excluded, {} [{}]",
            gc as u8,
            pf as u8,
            mpf as u8,
            r.entries.len(),
            r.max_rel_error(),
            r.excluded,
            if r.passed() { "PASS" } else { "FAIL" },
            counts.join(", ")
        );
        failed |= !r.passed();
        reports.push(r);
    }
    let p = outputs(s).join("gradcheck.json");
    s.write(&p, &serde_json::to_vec_pretty(&reports).expect("report serializes"))?;
    if failed {
        return Err(Failure::Check("gradient check exceeded the tolerance".into()));
    }
    Ok(())
}

pub fn kind_override(kind: Option<TreeKind>) -> Option<String> {
    kind.map(|k| format!("tree_kind={k}"))
}
