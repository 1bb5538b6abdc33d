use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carroll::leverage::{
    capital_extraction_attack, ria_sweep, restake_bonus_surface, ExtractionParams, FundingMode,
    SurfaceParams,
};
use carroll::report::to_canonical_json;
use carroll::scenario::{compare_segmentation, parse_scenario, run, InvariantSummary, Scenario};
use carroll::Security;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "carroll", version, about = "Combinatorial LMSR scenario runner and attack lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Burn,
    Unfunded,
}

impl From<Mode> for FundingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Burn => FundingMode::BurnFunded,
            Mode::Unfunded => FundingMode::Unfunded,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print its report.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario, then price the given securities (e.g. `A&!B`).
    Quote {
        file: PathBuf,
        #[arg(required = true)]
        securities: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a scenario's trades on exact and segmented markets.
    CompareSegmentation {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "M")]
        max_part: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    #[command(subcommand)]
    Attack(Attack),
    /// Restake-bonus surface over (ΔB, Δr).
    RestakeSurface {
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, value_enum, default_value = "burn")]
        mode: Mode,
        /// Initial edge prices, one surface slice each.
        #[arg(long = "r-initial", value_delimiter = ',', default_value = "0.3")]
        r_initials: Vec<f64>,
    },
    /// Run a scenario and print the final market state.
    Snapshot {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum Attack {
    /// RIA margin sweep over (frac_to_leave, A_frac).
    Ria {
        #[arg(long)]
        c: f64,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "burn")]
        mode: Mode,
    },
    /// Restake capital-extraction script with its no-restake control.
    Extract {
        #[arg(long, value_enum, default_value = "burn")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Scenario(String),
    Invariant(String),
}

const EXIT_SCENARIO: u8 = 1;
const EXIT_INVARIANT: u8 = 2;

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Scenario(format!("{}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| Failure::Scenario(format!("{}:\n{e}", path.display())))
}

fn check(inv: &InvariantSummary) -> Result<(), Failure> {
    if inv.passed {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "invariant check failed: normalization {:e}, zero-sum {:e}, identity {:e}, max loss {} vs bound {}",
            inv.normalization, inv.zero_sum, inv.identity, inv.max_maker_loss, inv.worst_case_loss
        )))
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Scenario(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    let scen = |e: &dyn std::fmt::Display| Failure::Scenario(e.to_string());
    match cmd {
        Command::Run { file, seed, out } => {
            let sc = load(&file)?;
            let (report, _) = run(&sc, seed).map_err(|e| scen(&e))?;
            emit(&to_canonical_json(&report), out.as_deref())?;
            if let Some(a) = &report.aborted {
                return Err(Failure::Scenario(format!("aborted at line {}: {}", a.line, a.error)));
            }
            check(&report.invariants)
        }
        Command::Quote { file, securities, seed } => {
            let sc = load(&file)?;
            let (report, m) = run(&sc, seed).map_err(|e| scen(&e))?;
            if let Some(a) = &report.aborted {
                return Err(Failure::Scenario(format!("aborted at line {}: {}", a.line, a.error)));
            }
            let mut prices = serde_json::Map::new();
            for s in &securities {
                let sec = Security::parse(s, m.structure()).map_err(|e| scen(&e))?;
                prices.insert(s.clone(), json!(m.price(&sec).map_err(|e| scen(&e))?));
            }
            emit(&to_canonical_json(&prices), None)
        }
        Command::CompareSegmentation { scenario, max_part, seed } => {
            let sc = load(&scenario)?;
            let r = compare_segmentation(&sc, max_part, seed).map_err(|e| scen(&e))?;
            emit(&to_canonical_json(&r), None)
        }
        Command::Attack(Attack::Ria { c, grid, seed, mode }) => {
            let r = ria_sweep(c, 1.0, grid, mode.into(), seed).map_err(|e| scen(&e))?;
            emit(&to_canonical_json(&r), None)
        }
        Command::Attack(Attack::Extract { mode, seed }) => {
            let base = ExtractionParams {
                mode: mode.into(),
                seed,
                ..Default::default()
            };
            let attack = capital_extraction_attack(base).map_err(|e| scen(&e))?;
            let control = capital_extraction_attack(ExtractionParams {
                restake: false,
                ..base
            })
            .map_err(|e| scen(&e))?;
            emit(&to_canonical_json(&json!({ "attack": attack, "control": control })), None)
        }
        Command::RestakeSurface { grid, mode, r_initials } => {
            let p = SurfaceParams {
                grid,
                mode: mode.into(),
                ..Default::default()
            };
            let r = restake_bonus_surface(p, &r_initials).map_err(|e| scen(&e))?;
            emit(&to_canonical_json(&r), None)
        }
        Command::Snapshot { file, seed } => {
            let sc = load(&file)?;
            let (report, m) = run(&sc, seed).map_err(|e| scen(&e))?;
            if let Some(a) = &report.aborted {
                return Err(Failure::Scenario(format!("aborted at line {}: {}", a.line, a.error)));
            }
            emit(&to_canonical_json(&m.snapshot()), None)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_SCENARIO)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVARIANT)
        }
    }
}
