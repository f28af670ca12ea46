use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dyngraph::diff::check::DEFAULT_STEP;
use dyngraph::diff::Tape;
use dyngraph::features::{save_dataset, synth_generate, SamplePair, Split, SynthConfig};
use dyngraph::gat::alpha_records;
use dyngraph::harness::{self, checkpoint, RunConfig};
use dyngraph::model::Variant;

#[derive(Parser)]
#[command(name = "dyngraph", version, about = "Dynamic-graph RGB-D classification at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant and write its outputs.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train several variants with one seed and compare them.
    Ablate(AblateArgs),
    /// Write a planted-signal dataset.
    SynthGen(SynthArgs),
    /// Print the graph built for one sample.
    GraphDump(DumpArgs),
    /// Finite-difference check of every parameter gradient.
    GradCheck(GradArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Published hyperparameters.
    Paper,
    /// From-scratch synthetic runs on a CPU.
    Desk,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => match self.preset {
                Preset::Paper => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            },
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        apply!(k, m, n, iterations, epochs, lr0, batch, seed, variant, channels);
        if let Some(c) = self.channels {
            if cfg.backbone_widths.as_ref().is_some_and(|w| w.last() != Some(&c)) {
                cfg.backbone_widths = None;
            }
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    /// Also write per-sample node selections to selection.json.
    #[arg(long)]
    dump_selection: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variants; defaults to the full ablation table.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 2)]
    planted: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full generator settings as JSON; the flags above are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use trained parameters instead of a fresh initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Side of the square node grid.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset.as_deref().context("no dataset given (use --dataset or set `dataset` in the config)")
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let (data, planted) = harness::load_data(dataset_path(&cfg)?)?;
    let start = Instant::now();
    let out = harness::train(&cfg, &data, planted.as_ref())?;
    harness::write_outputs(&args.out, &cfg, &out)?;
    let r = &out.evaluation.report;
    println!(
        "{}: mean-class accuracy {:.4} (overall {:.4}) at epoch {} in {:.1?}; outputs in {}",
        cfg.variant,
        r.mean_class_accuracy,
        r.overall_accuracy,
        out.best_epoch,
        start.elapsed(),
        args.out.display()
    );
    if let Some(rec) = out.evaluation.selection_recall {
        println!("planted-cell selection recall {rec:.4}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (mut cfg, store) = checkpoint::load(&args.checkpoint)?;
    if args.dataset.is_some() {
        cfg.dataset = args.dataset.clone();
    }
    let (data, planted) = harness::load_data(dataset_path(&cfg)?)?;
    let model = harness::build_model(&cfg, &data)?;
    checkpoint::check_compatible(&store, &model.init(cfg.seed))?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let eval = harness::evaluate(&model, &store, &data, split, planted.as_ref(), cfg.batch)?;
    harness::write_evaluation(&args.out, cfg.variant.to_string(), None, split, &eval)?;
    if args.dump_selection {
        fs::write(args.out.join("selection.json"), serde_json::to_string_pretty(&eval.selections)?)?;
    }
    println!("mean-class accuracy {:.4}, overall {:.4}", eval.report.mean_class_accuracy, eval.report.overall_accuracy);
    if let Some(r) = eval.selection_recall {
        println!("planted-cell selection recall {r:.4}");
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let (data, planted) = harness::load_data(dataset_path(&cfg)?)?;
    let variants = if args.variants.is_empty() { Variant::ablation_set() } else { args.variants };
    let rows = harness::ablate(&cfg, &variants, &data, planted.as_ref());
    fs::create_dir_all(&args.run.out)?;
    fs::write(args.run.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    fs::write(args.run.out.join("ablation.csv"), harness::ablation_csv(&rows))?;
    for r in &rows {
        match r.mean_class_accuracy {
            Some(a) => println!("{:<16} {a:.4}", r.variant.to_string()),
            None => println!("{:<16} failed: {}", r.variant.to_string(), r.error.as_deref().unwrap_or("")),
        }
    }
    for c in harness::directional_checks(&rows) {
        println!(
            "{} {} ({:.4}) < {} ({:.4})",
            if c.passed { "PASS" } else { "FAIL" },
            c.lower,
            c.lower_acc,
            c.higher,
            c.higher_acc
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SynthConfig {
            num_classes: args.classes,
            train_per_class: args.train_per_class,
            test_per_class: args.test_per_class,
            planted_cells: args.planted,
            seed: args.seed,
            ..SynthConfig::default()
        },
    };
    let (data, planted) = synth_generate(&cfg)?;
    save_dataset(&args.out, &data)?;
    planted.save(&args.out)?;
    fs::write(args.out.join("synth_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_graph_dump(args: DumpArgs) -> Result<()> {
    let (mut cfg, store) = match &args.checkpoint {
        Some(p) => {
            let (c, s) = checkpoint::load(p)?;
            (c, Some(s))
        }
        None => (args.run.config()?, None),
    };
    if args.run.dataset.is_some() {
        cfg.dataset = args.run.dataset.clone();
    }
    let (data, _) = harness::load_data(dataset_path(&cfg)?)?;
    let model = harness::build_model(&cfg, &data)?;
    if !cfg.variant.uses_graph() {
        bail!("variant {} builds no graph", cfg.variant);
    }
    let store = store.unwrap_or_else(|| model.init(cfg.seed));
    let test = data.split(Split::Test);
    let sample: &SamplePair = test.get(args.sample).copied().context("sample index beyond the test split")?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &store, &[sample], data.manifest.normalization.as_ref())?;
    let graph = &fwd.graphs[0];
    print!("{}", graph.dump());
    let out = &args.run.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("graph.txt"), graph.dump())?;
    let selection: Vec<_> = fwd.layouts.iter().map(|(m, l)| (m, &l[0])).collect();
    fs::write(out.join("selection.json"), serde_json::to_string_pretty(&selection)?)?;
    let alphas = alpha_records(&tape, &fwd.graphs, &fwd.alphas);
    fs::write(out.join("alpha.json"), serde_json::to_string_pretty(&alphas)?)?;
    Ok(())
}

fn cmd_grad_check(args: GradArgs) -> Result<()> {
    let cfg = RunConfig {
        k: args.k,
        m: args.m,
        n: args.n,
        iterations: args.iterations,
        channels: args.channels,
        height: args.grid,
        width: args.grid,
        seed: args.seed,
        variant: args.variant,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let report = harness::grad_check(&cfg, args.batch, DEFAULT_STEP)?;
    for p in &report.params {
        println!(
            "{:<32} {:>6} scalars  max rel err {:.3e}{}",
            p.name,
            p.count,
            p.max_rel_err,
            if p.max_rel_err >= args.tolerance && p.straddles_kink(args.tolerance) { "  (straddles a kink)" } else { "" }
        );
    }
    println!("max relative error {:.3e} in {:.1?}", report.max_rel_err(), start.elapsed());
    if !report.passed(args.tolerance) {
        bail!("gradient check failed (tolerance {:e})", args.tolerance);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::SynthGen(a) => cmd_synth(a),
        Cmd::GraphDump(a) => cmd_graph_dump(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    }
}
