use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgff_cli::config::{Experiment, RawConfig, KEYS};
use dgff_cli::run;

#[derive(Parser, Debug)]
#[command(
    name = "dgff",
    version,
    about = "Seeded experiments on the planar DGFF, the REM and their limiting point processes"
)]
#[command(
    after_help = "Exit codes: 0 success, 1 validation, 2 resource cap, 3 statistical gate failed (verify only).\n\
Every configuration key can be set with --set KEY=VALUE; run `dgff keys` for the list."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file in key = value format with [run], [domain], [params], [limit] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible output, 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma list of csv, json, svg.
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Truncation level of the point process.
    #[arg(long = "level", global = true)]
    level: Option<f64>,
    /// Radius of the conditioned ball of the dgff-ball decoration.
    #[arg(long = "window-r", global = true)]
    window_r: Option<u32>,
    /// Radius of the simulation window of the dgff-ball decoration.
    #[arg(long = "window-R", global = true)]
    window_big_r: Option<u32>,
    #[arg(long = "burn-in", global = true)]
    burn_in: Option<u32>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Exact Green function (and optionally a Monte Carlo row).
    Green,
    /// DGFF or REM realisations.
    SampleField,
    /// Per-field free energy log Z / log N^2 against its limit.
    FreeEnergy,
    /// Counts and exponents of lambda-high points.
    HighPoints,
    /// Two-temperature overlap distribution on finite lattices.
    Overlap,
    /// Free-energy derivative against the mean overlap.
    DerivativeCheck,
    /// Limiting overlap Q(beta, beta') with its REM partner.
    LimitQ,
    /// Gibbs mass of the top atom, Q(beta, inf), with its REM partner.
    QInfinity,
    /// Gap between E[Q] and E[Q_REM].
    Theorem2,
    /// Verifiers with a pass/fail gate.
    Verify {
        #[command(subcommand)]
        which: Verify,
    },
    /// List configuration keys.
    Keys,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Verify {
    /// Random multipliers against the plain inner product, exact where enumerable.
    Lemma32,
    /// KS test of the decorated log-partition function against the shifted bare one.
    Shift,
    /// Gaussian integration by parts on random covariances.
    Ibp,
    /// Heat-bath conditionals of the dgff-ball decoration.
    Decoration,
}

fn experiment(c: Command) -> Option<Experiment> {
    Some(match c {
        Command::Green => Experiment::Green,
        Command::SampleField => Experiment::SampleField,
        Command::FreeEnergy => Experiment::FreeEnergy,
        Command::HighPoints => Experiment::HighPoints,
        Command::Overlap => Experiment::Overlap,
        Command::DerivativeCheck => Experiment::DerivativeCheck,
        Command::LimitQ => Experiment::LimitQ,
        Command::QInfinity => Experiment::QInfinity,
        Command::Theorem2 => Experiment::Theorem2,
        Command::Verify { which: Verify::Lemma32 } => Experiment::Lemma32,
        Command::Verify { which: Verify::Shift } => Experiment::Shift,
        Command::Verify { which: Verify::Ibp } => Experiment::Ibp,
        Command::Verify { which: Verify::Decoration } => Experiment::Decoration,
        Command::Keys => return None,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(exp) = experiment(cli.command) else {
        for k in KEYS {
            println!("{:<18} [{}] {}", k.name, k.section, k.help);
        }
        return ExitCode::SUCCESS;
    };
    let text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: reading {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        None => String::new(),
    };
    let mut raw = RawConfig::parse(&text);
    raw.set("experiment", exp.name());
    let flags: [(&str, Option<String>); 9] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("threads", cli.threads.map(|v| v.to_string())),
        ("out", cli.out.as_ref().map(|p| p.display().to_string())),
        ("formats", cli.format.clone()),
        ("replicates", cli.replicates.map(|v| v.to_string())),
        ("L", cli.level.map(|v| v.to_string())),
        ("window_r", cli.window_r.map(|v| v.to_string())),
        ("window_R", cli.window_big_r.map(|v| v.to_string())),
        ("burn_in", cli.burn_in.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            raw.set(k, &v);
        }
    }
    for kv in &cli.set {
        match kv.split_once('=') {
            Some((k, v)) => raw.set(k.trim(), v.trim()),
            None => {
                eprintln!("error: --set expects KEY=VALUE, got `{kv}`");
                return ExitCode::from(1);
            }
        }
    }
    let cfg = match raw.build() {
        Ok(c) => c,
        Err(errs) => {
            eprintln!("invalid configuration:\n{errs}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg) {
        Ok(m) => {
            println!(
                "{}: {} artifacts in {} ({:.2} s)",
                m.experiment,
                m.artifacts.len(),
                cfg.out.display(),
                m.wall_clock_seconds
            );
            match m.gate {
                Some(g) if !g.passed => {
                    println!("FAIL {}", g.summary);
                    ExitCode::from(3)
                }
                Some(g) => {
                    println!("PASS {}", g.summary);
                    ExitCode::SUCCESS
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
