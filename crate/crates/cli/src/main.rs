use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgzne_core::fit::ModelFamily;
use hgzne_core::harness::{emit, run_campaign, write_rows_csv, CampaignConfig, CampaignOutput, Experiment, Method, NoiseSource};
use hgzne_core::Error;

/// Zero-noise extrapolation campaigns for periodic circuits.
#[derive(Debug, Parser)]
#[command(name = "hgzne", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON campaign configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for rows.csv, summary.json and friends. Without it,
    /// rows go to stdout as CSV.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Device profile JSON replacing the built-in fixture.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Shots per expectation value (0 = exact).
    #[arg(long, global = true)]
    shots: Option<u64>,
    /// Comma-separated odd amplification factors for the 3- and 4-parameter models.
    #[arg(long, global = true, value_delimiter = ',')]
    folds: Option<Vec<usize>>,
    /// Comma-separated subset of exp, multi_exp, iczne, pzne, hybrid.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, global = true)]
    circuits: Option<usize>,
    /// Comma-separated depths (Trotter steps, two-qubit depths or iterations).
    #[arg(long, global = true, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trotterized transverse-field Ising circuits.
    Ising,
    /// Random periodic circuits with per-depth Q-Q analysis.
    Random,
    /// Grover search with shot-based stability trials.
    Grover {
        /// Marked bitstring over the target qubits.
        #[arg(long)]
        marked: Option<String>,
    },
    /// Log-normality of path weights versus depth.
    Qq {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fit a (k, y[, sigma]) CSV and print the fit as JSON.
    Fit {
        input: PathBuf,
        /// exponential, multi_exponential(K), linear_in_epsilon, hybrid_ge or hybrid_ge_grover.
        #[arg(long, default_value = "hybrid_ge")]
        model: String,
        #[arg(long, default_value_t = 50)]
        starts: usize,
    },
}

fn build_config(cli: &Cli) -> Result<CampaignConfig, Error> {
    let experiment = match cli.command {
        Command::Ising => Experiment::Ising,
        Command::Random => Experiment::Random,
        Command::Grover { .. } => Experiment::Grover,
        Command::Qq { .. } => Experiment::Qq,
        Command::Fit { .. } => Experiment::FitFile,
    };
    let mut cfg = match &cli.global.config {
        Some(path) => CampaignConfig::load(path)?,
        None => CampaignConfig::default(),
    };
    cfg.experiment = experiment;
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = &g.profile {
        cfg.noise = Some(NoiseSource::Profile { path: p.clone() });
    }
    if let Some(s) = g.shots {
        cfg.shots = s;
    }
    if let Some(f) = &g.folds {
        cfg.folds = f.clone();
    }
    if let Some(m) = &g.methods {
        cfg.methods = m.iter().map(|s| Method::parse(s.trim())).collect::<Result<_, _>>()?;
    }
    if let Some(c) = g.circuits {
        cfg.circuits = c;
    }
    if let Some(d) = &g.depths {
        cfg.depths = d.clone();
    }
    if let Some(o) = &g.out {
        cfg.output = Some(o.clone());
    }
    match &cli.command {
        Command::Grover { marked: Some(m) } => cfg.marked = m.clone(),
        Command::Qq { samples: Some(s) } => cfg.qq_samples = *s,
        Command::Fit { input, model, starts } => {
            cfg.input = Some(input.clone());
            cfg.model = ModelFamily::parse(model)?;
            cfg.starts = *starts;
        }
        _ => {}
    }
    let cfg = cfg.normalized();
    cfg.validate()?;
    Ok(cfg)
}

fn report(cfg: &CampaignConfig, out: &CampaignOutput) -> Result<(), Error> {
    if let Some(dir) = &cfg.output {
        for p in emit(dir, out)? {
            eprintln!("wrote {}", p.display());
        }
        return Ok(());
    }
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    if let Some(f) = &out.fit {
        writeln!(lock, "{}", f.to_json()?)?;
    }
    if !out.rows.is_empty() {
        write_rows_csv(&mut lock, &out.rows)?;
    }
    if !out.qq.is_empty() {
        writeln!(lock, "{}", serde_json::to_string_pretty(&out.qq)?)?;
    }
    if let Some(s) = &out.stability {
        writeln!(lock, "{}", serde_json::to_string_pretty(s)?)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Profile(_) | Error::Parse { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| {
        let out = run_campaign(&cfg)?;
        report(&cfg, &out)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
