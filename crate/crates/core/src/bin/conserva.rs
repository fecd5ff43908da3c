use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conserva::pipeline::{run_pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "conserva", version, about = "Discover conserved quantities of dynamical systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample phase-space points.
    Sample(Opts),
    /// Train an ensemble of neural conserved quantities.
    Train(Opts),
    /// Differential and manifold rank of the trained ensemble.
    Rank(Opts),
    /// Train once per λ of the sweep grid.
    SweepLambda(Opts),
    /// Enumerate symbolic formulas.
    Search(Opts),
    /// Write CSVs and summary.txt from existing artifacts.
    Report(Opts),
    /// sample, train, rank, search and report.
    All(Opts),
}

#[derive(Args)]
struct Opts {
    /// JSON config with one block per stage.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Dotted override, e.g. --set train.lambda=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for train.lambda.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Shorthand for sample.n_points.
    #[arg(long)]
    points: Option<usize>,
    /// Shorthand for model.nets.
    #[arg(long)]
    nets: Option<usize>,
    /// Shorthand for train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for search.max_len.
    #[arg(long)]
    max_len: Option<usize>,
    /// Shorthand for search.budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Also run the sample and train stages before this one.
    #[arg(long)]
    train: bool,
}

impl Opts {
    fn overrides(&self) -> Result<Vec<(String, String)>, conserva::Error> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(s) = &self.system {
            put("system", serde_json::to_string(s).expect("string"));
        }
        if let Some(p) = &self.output {
            put("output", serde_json::to_string(p).map_err(conserva::Error::from)?);
        }
        if let Some(v) = self.lambda {
            put("train.lambda", v.to_string());
        }
        if let Some(v) = self.points {
            put("sample.n_points", v.to_string());
        }
        if let Some(v) = self.nets {
            put("model.nets", v.to_string());
        }
        if let Some(v) = self.epochs {
            put("train.epochs", v.to_string());
        }
        if let Some(v) = self.seed {
            for k in ["sample.seed", "train.seed", "rank.seed", "search.seed"] {
                put(k, v.to_string());
            }
        }
        if let Some(v) = self.max_len {
            put("search.max_len", v.to_string());
        }
        if let Some(v) = self.budget {
            put("search.budget", v.to_string());
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| conserva::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            put(k.trim(), v.trim().to_string());
        }
        Ok(o)
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("CONSERVA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cmd: Cmd) -> conserva::Result<()> {
    let (opts, stage) = match cmd {
        Cmd::Sample(o) => (o, Stage::Sample),
        Cmd::Train(o) => (o, Stage::Train),
        Cmd::Rank(o) => (o, Stage::Rank),
        Cmd::SweepLambda(o) => (o, Stage::Sweep),
        Cmd::Search(o) => (o, Stage::Search),
        Cmd::Report(o) => (o, Stage::Report),
        Cmd::All(o) => {
            let cfg = RunConfig::load(o.config.as_deref(), &o.overrides()?)?;
            let man = run_pipeline(&cfg, &Stage::PIPELINE)?;
            print_manifest(&cfg, &man, &Stage::PIPELINE);
            return Ok(());
        }
    };
    let cfg = RunConfig::load(opts.config.as_deref(), &opts.overrides()?)?;
    let mut stages = Vec::new();
    if opts.train && !matches!(stage, Stage::Sample | Stage::Train) {
        stages.extend([Stage::Sample, Stage::Train]);
    } else if opts.train && stage == Stage::Train {
        stages.push(Stage::Sample);
    }
    stages.push(stage);
    let man = run_pipeline(&cfg, &stages)?;
    print_manifest(&cfg, &man, &stages);
    Ok(())
}

fn print_manifest(cfg: &RunConfig, man: &conserva::pipeline::RunManifest, ran: &[Stage]) {
    for s in man.stages.iter().filter(|s| ran.iter().any(|r| r.name() == s.name)) {
        let note = if s.cache_hit { " (cached)" } else { "" };
        println!("{}: {:.2} s{note}", s.name, s.seconds);
        for a in &s.artifacts {
            println!("  {}", cfg.output.join(&a.path).display());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
