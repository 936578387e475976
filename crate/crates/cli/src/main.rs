use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmdg_core::harness::{cached_reference, convergence_study, run, RunConfig, REFERENCE_DEGREE, REFERENCE_N};
use mmdg_core::{catalog, checks, find, Error};

/// Moving-mesh discontinuous Galerkin solver for Burgers and Euler problems.
#[derive(Parser, Debug)]
#[command(name = "mmdg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a single simulation.
    Run(RunArgs),
    /// Refinement study with observed orders.
    Convergence {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated resolutions (at least three).
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        /// Report final-time instead of space-time norms.
        #[arg(long)]
        final_time: bool,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build (or load from cache) a fine uniform-mesh reference for a 1D problem.
    Reference {
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = REFERENCE_N)]
        n: usize,
        #[arg(long, default_value_t = REFERENCE_DEGREE)]
        k: usize,
        #[arg(long, default_value = "references")]
        dir: PathBuf,
    },
    /// Run the invariant suite.
    Check,
    /// List the built-in problems.
    List,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Polynomial degree (1 or 2).
    #[arg(long)]
    k: Option<usize>,
    /// Elements in 1D, cells along x in 2D.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    cfl: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    moving: Option<bool>,
    #[arg(long)]
    limiter: Option<bool>,
    #[arg(long)]
    tfinal: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cadence: Option<usize>,
    /// Any other `key=value` setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut c = RunConfig::new("", 1, 0);
                c.apply_text(&text)?;
                c
            }
            None => RunConfig::new("", 1, 0),
        };
        if let Some(p) = &self.problem {
            cfg.problem = p.clone();
        }
        if cfg.problem.is_empty() {
            return Err(Error::Config("no problem given (use --problem or a config file)".into()));
        }
        let spec = find(&cfg.problem)?;
        let pairs = [
            ("k", self.k.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("cfl", self.cfl.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("sweeps", self.sweeps.map(|v| v.to_string())),
            ("moving", self.moving.map(|v| v.to_string())),
            ("limiter", self.limiter.map(|v| v.to_string())),
            ("tfinal", self.tfinal.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|v| v.display().to_string())),
            ("cadence", self.cadence.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if cfg.n == 0 {
            cfg.n = spec.n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_numerical() || matches!(e, Error::Budget { .. }) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let out = run(&cfg)?;
            let s = &out.summary;
            println!("problem {} k={} n={} moving={}", s.problem, s.degree, s.n, s.moving);
            println!("steps {} final time {} wall {:.2} s", s.steps, s.final_time, s.wall_seconds);
            println!("min element volume {:.6e}, troubled cells {}, frozen mesh steps {}", s.min_volume, s.troubled_cells, s.frozen_mesh_steps);
            let drift: Vec<String> = s.mass_initial.iter().zip(&s.mass_final).map(|(a, b)| format!("{:.3e}", b - a)).collect();
            println!("mass change [{}]", drift.join(", "));
            if let Some(e) = s.errors {
                println!("space-time  L1 {:.6e}  L2 {:.6e}  Linf {:.6e}", e.space_time.l1, e.space_time.l2, e.space_time.linf);
                println!("final-time  L1 {:.6e}  L2 {:.6e}  Linf {:.6e}", e.final_time.l1, e.final_time.l2, e.final_time.linf);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Convergence { run, ns, final_time, csv } => {
            let cfg = run.config()?;
            let table = convergence_study(&cfg, &ns)?;
            print!("{}", table.to_text(!final_time));
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv(!final_time)).map_err(|e| Error::io(&path, e))?;
            }
            let failed = table.rows.iter().any(|r| r.failure.is_some());
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Reference { problem, n, k, dir } => {
            let r = cached_reference(&dir, &problem, n, k)?;
            let (lo, hi) = r.range(0);
            println!("{} n={} k={} density range [{lo:.6}, {hi:.6}] sha256 {}", r.problem, r.n, r.degree, r.content_hash());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check => {
            let results = checks::run_all();
            for c in &results {
                println!("{c}");
            }
            Ok(if results.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::List => {
            for p in catalog() {
                println!("{:<18} dim {}  T = {:<10.6} default n = {}", p.name, p.dim(), p.t_final, p.n);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
