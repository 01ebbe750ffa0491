use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedncv::error::Error;
use fedncv::fedsim;
use fedncv::output;
use fedncv::run_config::{self, RunConfig};
use fedncv::verify::{self, Suite};

const EXIT_IO: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Federated-learning simulator with networked leave-one-out control variates.
#[derive(Parser)]
#[command(name = "fedncv", version, allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its per-round CSV.
    Run(RunArgs),
    /// Run an oracle suite and print PASS/FAIL lines.
    Verify {
        /// identity, unbiasedness, variance, alpha or all
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeat a run for several values of one numeric setting.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Setting to vary, e.g. clients, beta or seed.
        #[arg(long)]
        vary: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg, clientcv or fedncv
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    /// fixed, descent or closedform
    #[arg(long)]
    alpha_mode: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    /// Dirichlet concentration of the label partition
    #[arg(long)]
    dirichlet: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other setting, as key=value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let flags = [
            ("algorithm", &self.algorithm),
            ("clients", &self.clients),
            ("rounds", &self.rounds),
            ("gamma", &self.gamma),
            ("alpha_mode", &self.alpha_mode),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("dirichlet", &self.dirichlet),
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("out", &self.out),
        ];
        let mut out: Vec<(String, String)> = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                key: s.clone(),
                line: None,
                msg: "--set expects key=value".into(),
            })?;
            out.push((k.trim().to_string(), v.to_string()));
        }
        // named flags win over --set
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, Error> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p)?),
            None => None,
        };
        let cfg = run_config::parse_config(text.as_deref(), &self.overrides()?)?;
        eprintln!("# effective configuration");
        for line in cfg.effective_lines() {
            eprintln!("{line}");
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_IO)
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let cfg = match args.load() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let outcome = match fedsim::run(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_file(&cfg.out, &output::render_run_csv(&cfg, &outcome.metrics)) {
        return fail(&e);
    }
    match outcome.aborted {
        Some(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DIVERGED)
        }
        None => ExitCode::SUCCESS,
    }
}

fn cmd_verify(suite: &str, seed: u64) -> ExitCode {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        match suite.parse() {
            Ok(s) => vec![s],
            Err(msg) => {
                eprintln!("error: unknown suite `{suite}`: {msg}");
                return ExitCode::from(EXIT_IO);
            }
        }
    };
    let mut all_pass = true;
    for s in suites {
        match verify::run_suite(s, seed) {
            Ok(checks) => {
                for c in checks {
                    all_pass &= c.pass;
                    println!("[{s}] {c}");
                }
            }
            Err(e) => {
                all_pass = false;
                println!("[{s}] FAIL suite aborted: {e}");
            }
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    }
}

const SWEEPABLE: &[&str] = &[
    "clients",
    "rounds",
    "gamma",
    "alpha",
    "beta",
    "dirichlet",
    "min_per_client",
    "num_classes",
    "input_dim",
    "n_samples",
    "spread",
    "hidden_dim",
    "local_steps",
    "seed",
    "threads",
];

/// `dir/stem_suffix.csv` next to the configured output path.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn cmd_sweep(args: &RunArgs, vary: &str, values: &[String]) -> ExitCode {
    if !SWEEPABLE.contains(&vary) {
        eprintln!("error: cannot sweep `{vary}`; numeric settings are {}", SWEEPABLE.join(", "));
        return ExitCode::from(EXIT_IO);
    }
    let base = match args.load() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let mut summary = vec![output::SUMMARY_HEADER.to_string()];
    let mut diverged = false;
    for value in values {
        let mut cfg = base.clone();
        let prepared = cfg
            .set(vary, value, None)
            .and_then(|_| cfg.validate());
        if let Err(e) = prepared {
            return fail(&e);
        }
        cfg.out = sibling(&base.out, &format!("{vary}-{}", value.trim()));
        let outcome = match fedsim::run(&cfg) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        if let Err(e) = write_file(&cfg.out, &output::render_run_csv(&cfg, &outcome.metrics)) {
            return fail(&e);
        }
        if let Some(e) = &outcome.aborted {
            eprintln!("error: {vary}={value}: {e}");
            diverged = true;
        }
        summary.push(output::summary_row(vary, value.trim(), &outcome.metrics));
    }
    summary.push(String::new());
    if let Err(e) = write_file(&sibling(&base.out, "summary"), &summary.join("\n")) {
        return fail(&e);
    }
    if diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify { suite, seed } => cmd_verify(suite, *seed),
        Command::Sweep { run, vary, values } => cmd_sweep(run, vary, values),
    }
}
