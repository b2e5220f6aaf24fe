use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use gsebo::autodiff::RngStream;
use gsebo::engine::{
    fd_hypergradient, hypergradient_reverse, inner_unroll, train_gsebo, train_vanilla,
    HistoryRow, TrainConfig, TrainOutcome,
};
use gsebo::graph::{generate_sbm, DatasetBundle};
use gsebo::io::{export_z_report, load_bundle, load_snapshot, save_bundle, save_snapshot};
use gsebo::metrics::{accuracy, aggregate_runs, z_strength_summary};
use gsebo::model::{Backbone, BackboneConfig, GseModel, ModelState};
use gsebo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gsebo",
    about = "Graph structure learning: per-edge connection strengths trained by \
             differentiating through unrolled inner gradient steps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a backbone with learnable strengths (or the frozen baseline)
    Train(TrainArgs),
    /// Verify the reverse-mode hypergradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Accuracy under increasing inter-class edge noise
    Robustness(RobustnessArgs),
    /// Accuracy across a grid of inner-step counts
    TauSweep(TauSweepArgs),
    /// Generate a synthetic block-model dataset bundle
    GenSynth(GenSynthArgs),
    /// Export learned per-edge strengths from a snapshot
    ExportZ(ExportZArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Backbone architecture
    #[arg(long, default_value = "gcn", value_parser = ["gcn", "sage", "jknet", "gat"])]
    backbone: String,
    /// Number of layers K
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Hidden width
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Attention-style heads (gat only)
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Dropout rate between layers
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Squared-norm penalty on the weights
    #[arg(long, default_value_t = 5e-4)]
    lambda: f64,
    /// Extend the penalty to the raw strengths
    #[arg(long)]
    reg_z: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<BackboneConfig> {
        let mut cfg = BackboneConfig::new(self.backbone.parse::<Backbone>()?);
        cfg.layers = self.layers;
        cfg.hidden = self.hidden;
        cfg.heads = self.heads;
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct OptArgs {
    /// Inner gradient steps per outer iteration
    #[arg(long, default_value_t = 15)]
    tau: usize,
    /// Inner-loop learning rate
    #[arg(long, default_value_t = 0.01)]
    eta_inner: f64,
    /// Outer-loop learning rate on the strengths
    #[arg(long, default_value_t = 0.01)]
    eta_outer: f64,
    /// Early-stopping patience on validation accuracy
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Maximum outer iterations
    #[arg(long, default_value_t = 400)]
    max_outer: usize,
    /// Base random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the direct strength term of the outer gradient
    #[arg(long)]
    no_direct_term: bool,
}

impl OptArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(seed);
        cfg.tau = self.tau;
        cfg.eta_inner = self.eta_inner;
        cfg.eta_outer = self.eta_outer;
        cfg.patience = self.patience;
        cfg.max_outer = self.max_outer;
        cfg.include_direct_term = !self.no_direct_term;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset bundle directory
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    /// Independent runs with seeds seed..seed+runs
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Freeze the strengths at their initialization
    #[arg(long)]
    vanilla: bool,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated backbones to check
    #[arg(long, default_value = "gcn,sage,jknet")]
    backbone: String,
    #[arg(long, default_value_t = 3)]
    tau: usize,
    #[arg(long, default_value_t = 0.1)]
    eta_inner: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    /// Multiplier applied to the default noise grid {1000,3000,5000,10000,20000}
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TauSweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    /// Comma-separated inner-step grid
    #[arg(long, default_value = "5,10,15,20,25")]
    grid: String,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    p_intra: f64,
    #[arg(long)]
    p_inter: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Feature noise level around class centroids
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Extra inter-class edges injected after generation
    #[arg(long, default_value_t = 0)]
    inject_inter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportZArgs {
    /// Model snapshot JSON written by `train`
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output TSV path
    #[arg(long, default_value = "z_report.tsv")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Divergence(_) => 2,
                Error::Verification(_) => 3,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Robustness(a) => cmd_robustness(a),
        Cmd::TauSweep(a) => cmd_tau_sweep(a),
        Cmd::GenSynth(a) => cmd_gen_synth(a),
        Cmd::ExportZ(a) => cmd_export_z(a),
    }
}

fn worker_count() -> usize {
    std::env::var("GSEBO_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Order-preserving parallel map over self-contained work items.
fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_count().min(items.len());
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let results: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let item = queue.lock().unwrap().pop_front();
                let Some((i, t)) = item else { break };
                let r = f(t);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

struct RunResult {
    seed: u64,
    outcome: TrainOutcome,
    train_acc: f64,
    strength_intra: Option<f64>,
    strength_inter: Option<f64>,
    inter_ratio: f64,
}

fn execute_run(
    bundle: &DatasetBundle,
    model_args: &ModelArgs,
    opt: &OptArgs,
    seed: u64,
    vanilla: bool,
) -> Result<RunResult> {
    let cfg = model_args.config()?;
    let model = GseModel::new(bundle, cfg, model_args.lambda, model_args.reg_z)?;
    let tcfg = opt.config(seed);
    let outcome = if vanilla { train_vanilla(&model, &tcfg)? } else { train_gsebo(&model, &tcfg)? };
    let logits = model.eval_logits(&outcome.state)?;
    let train_acc = accuracy(&logits, model.labels(), model.train_mask())?;
    // multi-head strengths are averaged entrywise before summarizing
    let z_mean = mean_strength(&outcome.state);
    let summary = z_strength_summary(model.pattern(), &z_mean, model.labels())?;
    let inter_ratio = bundle.graph.inter_class_ratio(&bundle.labels)?;
    Ok(RunResult {
        seed,
        outcome,
        train_acc,
        strength_intra: summary.intra_mean,
        strength_inter: summary.inter_mean,
        inter_ratio,
    })
}

fn mean_strength(state: &ModelState) -> gsebo::model::StrengthParam {
    let k = state.z.len();
    let nnz = state.z[0].values.len();
    let mut values = vec![0.0; nnz];
    for p in &state.z {
        for (acc, v) in values.iter_mut().zip(&p.values) {
            *acc += v / k as f64;
        }
    }
    gsebo::model::StrengthParam { values }
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{}", x))
}

fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut out =
        String::from("outer_iter\tinner_loss\touter_loss\tval_acc\ttest_acc\thypergrad_norm\n");
    for r in history {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.outer_iter, r.inner_loss, r.outer_loss, r.val_acc, r.test_acc, r.hypergrad_norm
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if a.runs == 0 {
        return Err(Error::data("--runs must be >= 1"));
    }
    a.model.config()?;
    fs::create_dir_all(&a.out)?;
    let seeds: Vec<u64> = (0..a.runs as u64).map(|i| a.opt.seed + i).collect();
    let data = a.data.clone();
    let results: Vec<Result<RunResult>> = parallel_map(seeds, |seed| {
        let bundle = load_bundle(&data)?;
        execute_run(&bundle, &a.model, &a.opt, seed, a.vanilla)
    });

    let mut report = String::from(
        "seed\taccuracy_train\taccuracy_val\taccuracy_test\tmean_strength_intra\t\
         mean_strength_inter\tinter_class_ratio\n",
    );
    let mut test_accs = Vec::new();
    let cfg = a.model.config()?;
    for res in results {
        let r = res?;
        write_history(&a.out.join(format!("history_seed{}.tsv", r.seed)), &r.outcome.history)?;
        save_snapshot(&cfg, &r.outcome.state, &a.out.join(format!("snapshot_seed{}.json", r.seed)))?;
        report.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.seed,
            r.train_acc,
            r.outcome.best_val_acc,
            r.outcome.best_test_acc,
            opt_fmt(r.strength_intra),
            opt_fmt(r.strength_inter),
            r.inter_ratio
        ));
        test_accs.push(r.outcome.best_test_acc);
    }
    fs::write(a.out.join("report.tsv"), report)?;
    let stats = aggregate_runs(&test_accs)?;
    println!("test accuracy over {} run(s): {:.4} +/- {:.4}", test_accs.len(), stats.mean, stats.stddev);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut worst: f64 = 0.0;
    for name in a.backbone.split(',') {
        let backbone: Backbone = name.trim().parse()?;
        let mut data_rng = RngStream::new(a.seed.wrapping_add(97));
        let bundle = generate_sbm(14, 2, 0.5, 0.15, 5, 0.3, &mut data_rng)?;
        let mut cfg = BackboneConfig::new(backbone);
        cfg.hidden = 4;
        cfg.dropout = 0.0; // keep the check free of mask kinks
        let model = GseModel::new(&bundle, cfg, 5e-4, false)?;
        let mut init_rng = RngStream::new(a.seed);
        let state = model.init_state(&mut init_rng);
        // scale strengths off the clamp boundary; entries at exactly 1.0
        // have a zero subgradient that finite differences cannot see
        let z: Vec<_> = state
            .z
            .iter()
            .map(|p| gsebo::autodiff::DenseMatrix::column(p.values.iter().map(|v| v * 0.95).collect()))
            .collect::<Result<_>>()?;
        let rng0 = state.rng;
        let mut rng = rng0;
        let traj = inner_unroll(&model, &state.weights, &z, a.tau, a.eta_inner, &mut rng)?;
        let hyper = hypergradient_reverse(&model, &traj, &z, a.eta_inner, true)?;
        let fd = fd_hypergradient(&model, &state.weights, &z, a.tau, a.eta_inner, rng0, 1e-4)?;
        let mut max_rel: f64 = 0.0;
        for (h, f) in hyper
            .iter()
            .flat_map(|m| m.data())
            .zip(fd.iter().flat_map(|m| m.data()))
        {
            if f.abs() < 1e-8 {
                continue;
            }
            max_rel = max_rel.max((h - f).abs() / f.abs());
        }
        println!("{}: max relative error {:.3e}", backbone.name(), max_rel);
        worst = worst.max(max_rel);
    }
    if worst > 1e-3 {
        return Err(Error::Verification(format!(
            "hypergradient check failed: max relative error {:.3e} > 1e-3",
            worst
        )));
    }
    Ok(())
}

fn cmd_robustness(a: RobustnessArgs) -> Result<()> {
    if a.runs == 0 {
        return Err(Error::data("--runs must be >= 1"));
    }
    a.model.config()?;
    fs::create_dir_all(&a.out)?;
    let levels: Vec<usize> = std::iter::once(0)
        .chain([1000usize, 3000, 5000, 10000, 20000].iter().map(|&l| (l as f64 * a.scale) as usize))
        .collect();

    // one work item per (level, method, seed); each rebuilds its noisy
    // bundle deterministically from the level
    let mut items = Vec::new();
    for &level in &levels {
        for vanilla in [true, false] {
            for i in 0..a.runs as u64 {
                items.push((level, vanilla, a.opt.seed + i));
            }
        }
    }
    let data = a.data.clone();
    let accs: Vec<Result<f64>> = parallel_map(items, |(level, vanilla, seed)| {
        let mut bundle = load_bundle(&data)?;
        if level > 0 {
            let mut inject_rng = RngStream::new(a.opt.seed.wrapping_add(level as u64));
            bundle.graph =
                bundle.graph.inject_inter_class_edges(&bundle.labels, level, &mut inject_rng)?;
        }
        Ok(execute_run(&bundle, &a.model, &a.opt, seed, vanilla)?.outcome.best_test_acc)
    });

    let mut table = String::from("level\tmethod\tmean_test_acc\tstddev\n");
    let mut means = std::collections::BTreeMap::new();
    let mut idx = 0;
    for &level in &levels {
        for vanilla in [true, false] {
            let chunk: Vec<f64> = accs[idx..idx + a.runs]
                .iter()
                .map(|r| r.as_ref().map(|&v| v).map_err(|e| Error::data(e.to_string())))
                .collect::<Result<_>>()?;
            idx += a.runs;
            let stats = aggregate_runs(&chunk)?;
            let method = if vanilla { "vanilla" } else { "gsebo" };
            table.push_str(&format!("{}\t{}\t{}\t{}\n", level, method, stats.mean, stats.stddev));
            means.insert((level, vanilla), stats.mean);
        }
    }
    fs::write(a.out.join("robustness.tsv"), &table)?;
    print!("{}", table);

    let margin = |level: usize| means[&(level, false)] - means[&(level, true)];
    let top = *levels.last().unwrap();
    if margin(top) < margin(0) {
        println!(
            "note: margin over the baseline at level {} ({:.4}) is below the clean margin ({:.4})",
            top,
            margin(top),
            margin(0)
        );
    }
    Ok(())
}

fn cmd_tau_sweep(a: TauSweepArgs) -> Result<()> {
    if a.runs == 0 {
        return Err(Error::data("--runs must be >= 1"));
    }
    a.model.config()?;
    fs::create_dir_all(&a.out)?;
    let grid: Vec<usize> = a
        .grid
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::data(format!("bad tau '{}'", t))))
        .collect::<Result<_>>()?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::data("tau grid must be nonempty positive integers"));
    }

    let mut items = Vec::new();
    for &tau in &grid {
        for i in 0..a.runs as u64 {
            items.push((tau, a.opt.seed + i));
        }
    }
    let data = a.data.clone();
    let accs: Vec<Result<f64>> = parallel_map(items, |(tau, seed)| {
        let bundle = load_bundle(&data)?;
        let mut opt = a.opt.clone();
        opt.tau = tau;
        Ok(execute_run(&bundle, &a.model, &opt, seed, false)?.outcome.best_test_acc)
    });

    let mut table = String::from("tau\tmean_test_acc\tstddev\n");
    let mut idx = 0;
    for &tau in &grid {
        let chunk: Vec<f64> = accs[idx..idx + a.runs]
            .iter()
            .map(|r| r.as_ref().map(|&v| v).map_err(|e| Error::data(e.to_string())))
            .collect::<Result<_>>()?;
        idx += a.runs;
        let stats = aggregate_runs(&chunk)?;
        table.push_str(&format!("{}\t{}\t{}\n", tau, stats.mean, stats.stddev));
    }
    fs::write(a.out.join("tau_sweep.tsv"), &table)?;
    print!("{}", table);
    Ok(())
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut rng = RngStream::new(a.seed);
    let mut bundle =
        generate_sbm(a.n, a.classes, a.p_intra, a.p_inter, a.feature_dim, a.noise, &mut rng)?;
    if a.inject_inter > 0 {
        bundle.graph =
            bundle.graph.inject_inter_class_edges(&bundle.labels, a.inject_inter, &mut rng)?;
    }
    save_bundle(&bundle, &a.out)?;
    println!(
        "wrote {} nodes, {} edges, inter-class ratio {:.4} to {}",
        a.n,
        bundle.graph.num_undirected_edges(),
        bundle.graph.inter_class_ratio(&bundle.labels)?,
        a.out.display()
    );
    Ok(())
}

fn cmd_export_z(a: ExportZArgs) -> Result<()> {
    let bundle = load_bundle(&a.data)?;
    let (cfg, weights, z) = load_snapshot(&a.snapshot)?;
    let model = GseModel::new(&bundle, cfg, 0.0, false)?;
    // the snapshot must belong to this dataset
    let state = ModelState { weights, z, rng: RngStream::new(0) };
    model.eval_logits(&state)?;
    export_z_report(&model, &state.z, &a.out)?;
    let summary = z_strength_summary(model.pattern(), &mean_strength(&state), model.labels())?;
    println!(
        "mean strength intra-class: {}  inter-class: {}",
        opt_fmt(summary.intra_mean),
        opt_fmt(summary.inter_mean)
    );
    Ok(())
}
