use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use procmat::classes::DecompositionJson;
use procmat::constructors::{self, BasisMap};
use procmat::process::{check_validity, ProcessJson, ValidityReport};
use procmat::sdp::reduce::detect_symmetry;
use procmat::sdp::{self, assemble_qccc_system, assemble_qcqc_system, SolverOptions, Status, VerdictJson};
use procmat::switch::{self, SlotPattern};
use procmat::{BasisKind, Decomposition, ProcessMatrix};

/// Build, transform and classify process matrices. Commands read JSON from
/// stdin (or `--input`) and write JSON to stdout.
#[derive(Parser)]
#[command(name = "procmat", version)]
struct Cli {
    /// Read input from this file instead of stdin.
    #[arg(short, long, global = true)]
    input: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bipartite quantum switch.
    BuildSwitch,
    /// Write partially dephased example N ∈ {1, 2, 3}.
    BuildExample {
        n: usize,
        /// Derive it from the switch through its slot pattern instead of the closed form.
        #[arg(long)]
        pipeline: bool,
    },
    /// Apply a slot pattern (inject, trace out, dephase) to a process.
    ApplyPattern {
        /// Pattern JSON file: { system: { "action": … } }.
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        pattern: Option<PathBuf>,
        /// A built-in pattern: dephase-all, example-N or flip-N.
        #[arg(long, conflicts_with_all = ["file", "pattern"])]
        builtin: Option<String>,
    },
    /// Check process validity.
    Validate {
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = Validity::Valid)]
        expect: Validity,
    },
    /// Decide QC-QC membership.
    CheckQcqc(CheckArgs),
    /// Decide QC-CC membership (causal separability for up to three slots).
    CheckQccc(CheckArgs),
    /// Construct a decomposition of a dephased process.
    Decompose {
        #[arg(long, value_enum)]
        method: Method,
        /// Basis in which a system is dephased, e.g. `--basis P_c=x`. Default z.
        #[arg(long, value_parser = parse_basis)]
        basis: Vec<(String, BasisKind)>,
    },
    /// Verify a decomposition produced by `decompose`.
    CheckDecomposition {
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Summarize a process: registry, validity, dephased systems, class verdicts.
    Report {
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct CheckArgs {
    #[arg(long, value_enum)]
    expect: Option<Expect>,
    /// Print the assembled constraint system instead of solving it.
    #[arg(long)]
    dump_system: bool,
    #[arg(long, default_value_t = 1e-6)]
    tol_margin: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Validity {
    Valid,
    Invalid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Expect {
    Feasible,
    Infeasible,
    Undetermined,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    DephasedAll,
    DephasedInputs,
    QcccFromQcqc,
}

/// A process together with one of its decompositions.
#[derive(Serialize, Deserialize)]
struct DecomposedJson {
    process: ProcessJson,
    decomposition: DecompositionJson,
}

#[derive(Serialize)]
struct ReportJson {
    registry: Vec<procmat::process::RegistryEntry>,
    validity: ValidityReport,
    dephased: Vec<(String, BasisKind)>,
    qcqc: VerdictJson,
    qccc: VerdictJson,
}

enum Failure {
    Input(String),
    Mismatch(String),
}

impl From<procmat::Error> for Failure {
    fn from(e: procmat::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn parse_basis(s: &str) -> Result<(String, BasisKind), String> {
    let (name, kind) = s.split_once('=').ok_or("expected SYSTEM=z or SYSTEM=x")?;
    let kind = match kind.to_ascii_lowercase().as_str() {
        "z" => BasisKind::Z,
        "x" => BasisKind::X,
        other => return Err(format!("unknown basis `{other}`")),
    };
    Ok((name.to_string(), kind))
}

fn read_input(path: &Option<PathBuf>) -> Result<String, Failure> {
    let mut text = String::new();
    match path {
        Some(p) => {
            text = std::fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
        }
        None => {
            io::stdin().read_to_string(&mut text).map_err(|e| Failure::Input(format!("stdin: {e}")))?;
        }
    }
    Ok(text)
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| {
        Failure::Input(format!("malformed {what} JSON at line {}, column {}: {e}", e.line(), e.column()))
    })
}

fn read_process(path: &Option<PathBuf>) -> Result<ProcessMatrix, Failure> {
    let json: ProcessJson = parse_json(&read_input(path)?, "process")?;
    Ok(ProcessMatrix::from_json(&json)?)
}

fn emit<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Input(e.to_string()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Failure::Input(format!("stdout: {e}")))
}

fn builtin_pattern(name: &str) -> Result<SlotPattern, Failure> {
    let numbered = |prefix: &str| name.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok());
    let pattern = if name == "dephase-all" {
        Ok(switch::dephase_all_pattern())
    } else if let Some(n) = numbered("example-") {
        switch::example_pattern(n)
    } else if let Some(n) = numbered("flip-") {
        switch::flip_pattern(n)
    } else {
        return Err(Failure::Input(format!("unknown built-in pattern `{name}`")));
    };
    Ok(pattern?)
}

fn status_of(e: Expect) -> Status {
    match e {
        Expect::Feasible => Status::Feasible,
        Expect::Infeasible => Status::Infeasible,
        Expect::Undetermined => Status::Undetermined,
    }
}

fn check(cli: &Cli, args: &CheckArgs, qccc: bool) -> Outcome {
    let w = read_process(&cli.input)?;
    let sys = if qccc { assemble_qccc_system(&w)? } else { assemble_qcqc_system(&w)? };
    if args.dump_system {
        return emit(&sys.to_json());
    }
    let opts = SolverOptions { tol_margin: args.tol_margin, ..Default::default() };
    let verdict = sdp::solve_feasibility(&sys, &opts)?;
    emit(&verdict.to_json())?;
    match args.expect {
        Some(e) if status_of(e) != verdict.status => Err(Failure::Mismatch(format!(
            "expected {:?}, got {:?}: {}",
            status_of(e),
            verdict.status,
            verdict.interpretation
        ))),
        _ => Ok(()),
    }
}

fn decompose(w: &ProcessMatrix, method: Method, bases: &BasisMap) -> procmat::Result<Decomposition> {
    Ok(match method {
        Method::DephasedAll => Decomposition::QcQc(constructors::qcqc_from_dephased_all(w, bases)?),
        Method::DephasedInputs => Decomposition::QcQc(constructors::qcqc_from_dephased_inputs(w, bases)?),
        Method::QcccFromQcqc => Decomposition::QcCc(constructors::qccc_from_dephased(w, bases)?),
    })
}

fn text_report(r: &ReportJson) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>4}  {:<7} {:>4}", "system", "dim", "role", "slot");
    for e in &r.registry {
        let role = format!("{:?}", e.role).to_lowercase();
        let slot = e.slot.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{:<10} {:>4}  {:<7} {:>4}", e.name, e.dim, role, slot);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "valid: {} (max residual {:.2e}, min eigenvalue {:.2e})",
        r.validity.verdict,
        r.validity.max_residual(),
        r.validity.psd_min_eig
    );
    let dephased: Vec<String> = r.dephased.iter().map(|(n, k)| format!("{n}:{}", format!("{k:?}").to_lowercase())).collect();
    let _ = writeln!(s, "dephased: {}", if dephased.is_empty() { "none".into() } else { dephased.join(" ") });
    for (name, v) in [("QC-QC", &r.qcqc), ("QC-CC", &r.qccc)] {
        let status = format!("{:?}", v.status).to_lowercase();
        let _ = writeln!(s, "{name}: {status:<12} margin {:+.3e}  {}", v.margin, v.interpretation);
    }
    s
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::BuildSwitch => emit(&switch::build_quantum_switch().to_json()),
        Command::BuildExample { n, pipeline } => {
            let w = if *pipeline {
                switch::apply_pattern(&switch::build_quantum_switch(), &switch::example_pattern(*n)?)?
            } else {
                switch::build_example(*n)?
            };
            emit(&w.to_json())
        }
        Command::ApplyPattern { file, pattern, builtin } => {
            let p = match (file.as_ref().or(pattern.as_ref()), builtin) {
                (Some(path), _) => {
                    let text =
                        std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
                    parse_json::<SlotPattern>(&text, "pattern")?
                }
                (None, Some(name)) => builtin_pattern(name)?,
                (None, None) => return Err(Failure::Input("give a pattern file or --builtin".into())),
            };
            let w = read_process(&cli.input)?;
            emit(&switch::apply_pattern(&w, &p)?.to_json())
        }
        Command::Validate { tol, expect } => {
            let w = read_process(&cli.input)?;
            let report = check_validity(&w, *tol)?;
            emit(&report)?;
            match (expect, report.verdict) {
                (Validity::Valid, true) | (Validity::Invalid, false) => Ok(()),
                (Validity::Valid, false) => Err(Failure::Mismatch(format!(
                    "process is not valid (max residual {:.3e})",
                    report.max_residual()
                ))),
                (Validity::Invalid, true) => Err(Failure::Mismatch("process is valid".into())),
            }
        }
        Command::CheckQcqc(args) => check(cli, args, false),
        Command::CheckQccc(args) => check(cli, args, true),
        Command::Decompose { method, basis } => {
            let w = read_process(&cli.input)?;
            let bases: BasisMap = basis.iter().cloned().collect();
            let d = decompose(&w, *method, &bases)?;
            emit(&DecomposedJson { process: w.to_json(), decomposition: d.to_json(w.n_slots()) })
        }
        Command::CheckDecomposition { tol } => {
            let bundle: DecomposedJson = parse_json(&read_input(&cli.input)?, "decomposition")?;
            let w = ProcessMatrix::from_json(&bundle.process)?;
            let d = Decomposition::from_json(w.registry(), &bundle.decomposition)?;
            let report = d.verify(&w, *tol)?;
            emit(&report)?;
            if report.verdict {
                Ok(())
            } else {
                Err(Failure::Mismatch(format!("decomposition fails (max residual {:.3e})", report.max_residual())))
            }
        }
        Command::Report { json } => {
            let w = read_process(&cli.input)?;
            let reg = w.registry();
            let report = ReportJson {
                registry: w.to_json().registry,
                validity: check_validity(&w, 1e-10)?,
                dephased: detect_symmetry(w.op())?.into_iter().map(|(s, k)| (reg.name(s).to_string(), k)).collect(),
                qcqc: sdp::qcqc_membership(&w)?.to_json(),
                qccc: sdp::qccc_membership(&w)?.to_json(),
            };
            if *json {
                emit(&report)
            } else {
                print!("{}", text_report(&report));
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(msg)) => {
            eprintln!("mismatch: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
