use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snas::arch::ArchParams;
use snas::cell::derive_genotype;
use snas::checkpoint::Archive;
use snas::config::RunConfig;
use snas::error::Error;
use snas::params::ParamStore;
use snas::trainer::{evaluate_genotype, run_search, train_child};

#[derive(Parser)]
#[command(name = "snas", about = "Stochastic architecture search over DAG cells", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CfgArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Search mode: snas, darts_attention, reinforce_constant.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of CIFAR-10 .bin batch files (switches data to cifar).
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Number of records to load.
    #[arg(long)]
    take: Option<usize>,
    /// Downsampled image side (8, 16, or 32).
    #[arg(long)]
    resize: Option<usize>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, highest precedence.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CfgArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(m) = &self.mode {
            overrides.push(("mode".into(), m.clone()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(d) = &self.data_dir {
            overrides.push(("data".into(), "cifar".into()));
            overrides.push(("data_dir".into(), d.display().to_string()));
            overrides.push(("num_classes".into(), "10".into()));
        }
        if let Some(t) = self.take {
            overrides.push(("take".into(), t.to_string()));
        }
        if let Some(r) = self.resize {
            overrides.push(("resize".into(), r.to_string()));
        }
        if let Some(o) = &self.out {
            overrides.push(("out_dir".into(), o.display().to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            overrides.push((k.trim().into(), v.trim().into()));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run architecture search and write run artifacts.
    Search(CfgArgs),
    /// Print the genotype encoded by a checkpoint's architecture logits.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write a Graphviz rendering of the derived cells.
        #[arg(long)]
        dot: Option<PathBuf>,
        #[command(flatten)]
        cfg: CfgArgs,
    },
    /// Evaluate a checkpoint's derived child on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: CfgArgs,
    },
    /// Run the full 64-bit verification table.
    Verify,
    /// Train the derived child from scratch (weights only).
    Retrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: CfgArgs,
    },
    /// Sweep the resource penalty and report when zero ops appear.
    CalibrateEta {
        #[command(flatten)]
        cfg: CfgArgs,
        /// Comma-separated penalty strengths to sweep.
        #[arg(long, default_value = "0,0.025,0.05,0.1,0.2,0.4,0.8")]
        etas: String,
    },
}

fn load_arch(archive: &Archive, cfg: &RunConfig) -> Result<ArchParams, Error> {
    let graph = cfg.spec().graph();
    ArchParams::from_archive(archive, graph.num_edges(), graph.candidates.len()).ok_or_else(|| {
        Error::Checkpoint {
            path: PathBuf::new(),
            detail: format!(
                "no architecture logits for {} edges x {} ops",
                graph.num_edges(),
                graph.candidates.len()
            ),
        }
    })
}

fn cmd_search(args: &CfgArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("search requires out_dir (config key or --out)".into()))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let snapshot_path = out_dir.join("config.txt");
    std::fs::write(&snapshot_path, cfg.snapshot()).map_err(|e| Error::io(&snapshot_path, e))?;
    let spec = cfg.spec();
    let data = cfg.load_dataset()?;
    let out = run_search(&spec, &cfg.train, cfg.mode, &data, Some(&out_dir))?;
    let last = out.metrics.last().expect("at least one epoch");
    println!("mode = {}", cfg.mode.name());
    println!("final train_loss = {:.6}", last.train_loss);
    println!("final child_val_acc = {:.6}", last.child_val_acc);
    println!("genotype:\n{}", out.genotype.render(&spec.graph()));
    Ok(())
}

fn cmd_derive(checkpoint: &PathBuf, dot: Option<&PathBuf>, args: &CfgArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let archive = Archive::read(checkpoint)?;
    let alpha = load_arch(&archive, &cfg)?;
    let graph = cfg.spec().graph();
    let genotype = derive_genotype(&alpha, &graph);
    print!("{}", genotype.render(&graph));
    if let Some(path) = dot {
        std::fs::write(path, genotype.to_dot(&graph)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_eval(checkpoint: &PathBuf, args: &CfgArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let archive = Archive::read(checkpoint)?;
    let alpha = load_arch(&archive, &cfg)?;
    let spec = cfg.spec();
    let graph = spec.graph();
    let genotype = derive_genotype(&alpha, &graph);
    let mut store = ParamStore::<f64>::from_archive(&archive, "", cfg.train.seed);
    let data = cfg.load_dataset()?;
    let (_train, val) = data.split(cfg.train.holdout_frac);
    let acc = evaluate_genotype(&spec, &genotype, &mut store, &val, cfg.train.batch_size)?;
    println!("val_accuracy = {acc:.6}");
    Ok(())
}

fn cmd_verify() -> Result<bool, Error> {
    let checks = snas::verify::run_all();
    println!("{:<44} {:>12} {:>12}  result", "check", "value", "tolerance");
    let mut all_pass = true;
    for c in &checks {
        println!("{}", c.render());
        all_pass &= c.pass;
    }
    println!(
        "{} of {} checks passed",
        checks.iter().filter(|c| c.pass).count(),
        checks.len()
    );
    Ok(all_pass)
}

fn cmd_retrain(checkpoint: &PathBuf, args: &CfgArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let archive = Archive::read(checkpoint)?;
    let alpha = load_arch(&archive, &cfg)?;
    let spec = cfg.spec();
    let graph = spec.graph();
    let genotype = derive_genotype(&alpha, &graph);
    let data = cfg.load_dataset()?;
    let (_store, accs) = train_child(&spec, &genotype, &cfg.train, &data)?;
    for (epoch, acc) in accs.iter().enumerate() {
        println!("epoch {epoch}: child_val_acc = {acc:.6}");
    }
    Ok(())
}

fn cmd_calibrate_eta(args: &CfgArgs, etas: &str) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let spec = cfg.spec();
    let data = cfg.load_dataset()?;
    println!("{:>8} {:>11} {:>13} {:>13}", "eta", "zero_edges", "mean_entropy", "expected_cost");
    for tok in etas.split(',') {
        let eta: f64 = tok
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--etas: `{tok}` is not a number")))?;
        let mut train = cfg.train.clone();
        train.resource.eta = eta;
        let out = run_search(&spec, &train, cfg.mode, &data, None)?;
        let zero_edges = out
            .genotype
            .normal
            .iter()
            .filter(|&&o| o == snas::ops::OpKind::Zero)
            .count();
        let last = out.metrics.last().expect("epochs");
        println!(
            "{eta:>8} {zero_edges:>11} {:>13.4} {:>13.4}",
            last.mean_entropy, last.expected_cost
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Search(args) => cmd_search(args),
        Cmd::Derive { checkpoint, dot, cfg } => cmd_derive(checkpoint, dot.as_ref(), cfg),
        Cmd::Eval { checkpoint, cfg } => cmd_eval(checkpoint, cfg),
        Cmd::Verify => match cmd_verify() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Cmd::Retrain { checkpoint, cfg } => cmd_retrain(checkpoint, cfg),
        Cmd::CalibrateEta { cfg, etas } => cmd_calibrate_eta(cfg, etas),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
