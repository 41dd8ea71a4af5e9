use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfgdist_cli::commands;
use cfgdist_cli::{CliError, Result, Scenario};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Fit,
    Evaluate,
    Sample,
    Hmc,
    Product,
    Connectivity,
    Learn,
    RankTasks,
}

/// Variational approximation of robot configuration distributions.
#[derive(Debug, Parser)]
#[command(name = "cfgdist", version)]
struct Args {
    command: Command,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Fitted parameters JSON; `product` takes two, `evaluate` an optional second as the reference density.
    #[arg(long)]
    params: Vec<PathBuf>,
    /// Output directory; defaults to the scenario's `output` or `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the scenario; seeds sampling otherwise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Task values for conditional parameters, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y: Option<Vec<f64>>,
    /// Demonstration CSV for `learn`; defaults to the scenario's dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Draws per importance estimate in `rank-tasks`.
    #[arg(long, default_value_t = 20000)]
    importance_samples: usize,
}

fn scenario(args: &Args) -> Result<(Scenario, &Path)> {
    let path = args.scenario.as_deref().ok_or_else(|| CliError::invalid("scenario", "--scenario is required"))?;
    let mut sc = Scenario::load(path)?;
    if let Some(s) = args.seed {
        sc.reseed(s);
    }
    Ok((sc, path))
}

fn out_dir(args: &Args, sc: Option<&Scenario>) -> PathBuf {
    match (&args.out, sc) {
        (Some(o), _) => o.clone(),
        (None, Some(sc)) => sc.output_dir(Path::new("out")),
        (None, None) => PathBuf::from("out"),
    }
}

fn params(args: &Args, n: std::ops::RangeInclusive<usize>) -> Result<&[PathBuf]> {
    if !n.contains(&args.params.len()) {
        let msg = format!("expected {} to {} --params files, got {}", n.start(), n.end(), args.params.len());
        return Err(CliError::invalid("params", msg));
    }
    Ok(&args.params)
}

fn run(args: &Args) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    match args.command {
        Command::Fit => {
            let (sc, _) = scenario(args)?;
            let out = out_dir(args, Some(&sc));
            let (_, s) = commands::fit(&sc, &out)?;
            println!("{}: {} steps, final loss {:.6}, {:.2} s -> {}", s.name, s.steps, s.final_loss, s.runtime_s, out.display());
        }
        Command::Evaluate => {
            let (sc, _) = scenario(args)?;
            let p = params(args, 1..=2)?;
            let out = out_dir(args, Some(&sc));
            let e = commands::evaluate(&sc, &p[0], p.get(1).map(PathBuf::as_path), &out, seed)?;
            if let Some(m) = &e.metrics {
                println!("bhattacharyya {:.6}  ovl {:.6}  alpha_half {:.6}  log_c {:.6}", m.bhattacharyya, m.ovl, m.alpha_half, m.log_c);
            }
            if let Some(d) = &e.diagnostics {
                for c in &d.checks {
                    println!("{}: median {:.4}  q95 {:.4}  within 3σ {:.3}", c.name, c.median, c.q95, c.within_3sigma);
                }
                println!("mean pairwise distance {:.4}", d.mean_pairwise_distance);
            }
        }
        Command::Sample => {
            let p = params(args, 1..=1)?;
            let loaded = match &args.scenario {
                Some(_) => Some(scenario(args)?.0),
                None => None,
            };
            let chain = match &loaded {
                Some(sc) => sc.build()?.chain,
                None => None,
            };
            let out = out_dir(args, loaded.as_ref());
            let xs = commands::sample(&p[0], chain.as_deref(), args.count, args.y.as_deref(), seed, &out)?;
            println!("{} samples -> {}", xs.len(), out.join("samples.csv").display());
        }
        Command::Hmc => {
            let (sc, _) = scenario(args)?;
            let out = out_dir(args, Some(&sc));
            let (_, s) = commands::hmc(&sc, &out)?;
            println!("{} samples, acceptance {:.3}, {:.2} s", s.rows, s.acceptance_rate, s.runtime_s);
            if let Some(bc) = s.bhattacharyya {
                println!("histogram bhattacharyya {bc:.4}");
            }
        }
        Command::Product => {
            let p = params(args, 2..=2)?;
            let out = out_dir(args, None);
            let m = commands::product(&p[0], &p[1], &out)?;
            println!("product with {} components -> {}", m.k(), out.join("product.json").display());
        }
        Command::Connectivity => {
            let p = params(args, 1..=1)?;
            let out = out_dir(args, None);
            let c = commands::connectivity(&p[0], args.epsilon, &out)?;
            println!("{} edges, {} groups", c.edges.len(), c.groups);
        }
        Command::Learn => {
            let (sc, path) = scenario(args)?;
            let data = match &args.dataset {
                Some(d) => d.clone(),
                None => commands::dataset_path(&sc, path)?,
            };
            let out = out_dir(args, Some(&sc));
            let (_, s) = commands::learn(&sc, &data, &out)?;
            println!("{} iterations, likelihood gain {:.4}, log C {:.4}", s.iterations, s.likelihood_gain, s.final_log_c);
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::RankTasks => {
            let (sc, _) = scenario(args)?;
            let out = out_dir(args, Some(&sc));
            for c in commands::rank_tasks(&sc, &out, args.importance_samples)? {
                println!("active {:?}: log mass {:.4} (importance {:.4})", c.active, c.log_mass, c.log_mass_importance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
