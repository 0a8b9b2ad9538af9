//! Command-line driver: `check`, `normalize`, `run`, `denote` and `verify`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qcl::config_eval::{run, Configuration, Mode, RunOptions, RunResult, DEFAULT_MAX_STEPS};
use qcl::error::{Error, Result};
use qcl::frontend::{check_program, parse, parse_main_term, parse_pure_term, parse_unitary, Declaration, Diagnostic, SourceProgram};
use qcl::main_core::{typecheck_main, MainTerm};
use qcl::mixed_denot::{adequacy_deviation, interp_config, soundness_deviation, ORACLE_TOLERANCE};
use qcl::pure_check::{typecheck_term, typecheck_unitary};
use qcl::pure_core::{set_eps, PureContext};
use qcl::pure_denot::{interp_term, interp_unitary_checked, ComplexMatrix, TruncationConfig};
use qcl::pure_eval::{ket_label, normalize, NormalValue};

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const SCHEMA_VERSION: u32 = 1;
const ISOMETRY_TOLERANCE: f64 = 1e-8;
const PROBABILITY_TOLERANCE: f64 = 1e-9;
/// Bound on the number of configurations whose one-step soundness `verify` checks.
const SOUNDNESS_SAMPLE: usize = 200;

#[derive(Parser)]
#[command(name = "qcl", version, about = "Type check, run and interpret quantum control programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Type check every declaration and print its type.
    Check { file: PathBuf },
    /// Print the normal form of a closed pure term.
    Normalize {
        file: PathBuf,
        #[arg(short = 'e', long = "expr")]
        expr: String,
        /// Digits printed for each amplitude.
        #[arg(long, default_value_t = 4)]
        digits: usize,
    },
    /// Evaluate the entry point, or EXPR, to a distribution of values.
    Run {
        file: PathBuf,
        #[arg(short = 'e', long = "expr")]
        expr: Option<String>,
        #[arg(long, value_enum, default_value_t = ModeArg::Exhaustive)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
        /// Record every reduction step.
        #[arg(long)]
        trace: bool,
        /// Re-check well-formedness after every step.
        #[arg(long)]
        check: bool,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Print the matrix of a unitary, a pure term or a main term as JSON.
    Denote {
        file: PathBuf,
        #[arg(short = 'e', long = "expr")]
        expr: String,
        /// Dimension of the truncated `qnat` space.
        #[arg(long, env = "QCL_TRUNC")]
        trunc: Option<usize>,
    },
    /// Check unitarity, isometry, soundness and adequacy for a program.
    Verify {
        file: PathBuf,
        #[arg(long, env = "QCL_TRUNC")]
        trunc: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exhaustive,
    Sample,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

/// Reason a command did not succeed.
enum Failure {
    Diagnostics(Vec<(Diagnostic, bool)>),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let internal = e.is_internal();
        Failure::Diagnostics(vec![(Diagnostic::from_error(&e), internal)])
    }
}

type Outcome = std::result::Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(tol) = std::env::var("QCL_TOLERANCE") {
        match tol.parse::<f64>() {
            Ok(v) if v > 0.0 => set_eps(v),
            _ => {
                eprintln!("error: QCL_TOLERANCE must be a positive number, got `{tol}`");
                return ExitCode::from(1);
            }
        }
    }
    let outcome = match cli.command {
        Command::Check { file } => cmd_check(&file),
        Command::Normalize { file, expr, digits } => cmd_normalize(&file, &expr, digits),
        Command::Run { file, expr, mode, seed, max_steps, trace, check, format } => {
            let mode = match mode {
                ModeArg::Exhaustive => Mode::Exhaustive,
                ModeArg::Sample => Mode::Sample(seed),
            };
            let opts = RunOptions { mode, max_steps, check_wf: check, trace };
            cmd_run(&file, expr.as_deref(), &opts, format)
        }
        Command::Denote { file, expr, trunc } => cmd_denote(&file, &expr, &truncation(trunc)),
        Command::Verify { file, trunc } => cmd_verify(&file, &truncation(trunc)),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Diagnostics(diags)) => report(&diags),
    }
}

fn truncation(trunc: Option<usize>) -> TruncationConfig {
    trunc.map(TruncationConfig::with_dim).unwrap_or_default()
}

fn report(diags: &[(Diagnostic, bool)]) -> ExitCode {
    for (d, _) in diags {
        eprintln!("{d}");
    }
    if diags.iter().any(|(_, internal)| *internal) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn load(file: &PathBuf) -> std::result::Result<SourceProgram, Failure> {
    let src = std::fs::read_to_string(file).map_err(|e| Failure::Io(format!("cannot read {}: {e}", file.display())))?;
    Ok(parse(&src)?)
}

fn cmd_check(file: &PathBuf) -> Outcome {
    let prog = load(file)?;
    let (items, diags) = check_program(&prog);
    for item in &items {
        emit!("{} : {}", item.name, item.ty);
    }
    if diags.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::Diagnostics(diags))
    }
}

fn cmd_normalize(file: &PathBuf, expr: &str, digits: usize) -> Outcome {
    let prog = load(file)?;
    let t = parse_pure_term(&prog, expr)?;
    typecheck_term(&PureContext::new(), &t)?;
    emit!("{}", normalize(&t)?.pretty(digits));
    Ok(ExitCode::SUCCESS)
}

/// The term to run: EXPR if given, else the program's entry point.
fn entry(prog: &SourceProgram, expr: Option<&str>) -> Result<MainTerm> {
    match expr {
        Some(e) => parse_main_term(prog, e),
        None => prog.entry.clone().ok_or_else(|| Error::Malformed("the program has no `main` entry point".into())),
    }
}

fn cmd_run(file: &PathBuf, expr: Option<&str>, opts: &RunOptions, format: Format) -> Outcome {
    let prog = load(file)?;
    let term = entry(&prog, expr)?;
    let ty = typecheck_main(&vec![], &term)?;
    let res = run(&Configuration::initial(term), opts)?;
    match format {
        Format::Json => {
            let mode = match opts.mode {
                Mode::Exhaustive => json!("exhaustive"),
                Mode::Sample(seed) => json!({ "sample": seed }),
            };
            let out = json!({
                "version": SCHEMA_VERSION,
                "type": ty.to_string(),
                "mode": mode,
                "steps": res.steps,
                "total_probability": res.distribution.total(),
                "branches": branches_json(&res)?,
                "trace": res.trace.iter().map(|s| json!({
                    "from": s.from.to_string(),
                    "probability": s.probability,
                    "to": s.to.to_string(),
                })).collect::<Vec<_>>(),
            });
            emit!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            for s in &res.trace {
                emit!("{} ~>[{:.6}] {}", s.from, s.probability, s.to);
            }
            emit!("type: {ty}");
            emit!("steps: {}", res.steps);
            for (p, c) in &res.distribution.branches {
                emit!("{p:.6}  {c}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn branches_json(res: &RunResult) -> Result<Vec<Value>> {
    res.distribution
        .branches
        .iter()
        .map(|(p, c)| {
            let v = c.normal_state()?;
            Ok(json!({
                "probability": p,
                "term": c.term.to_string(),
                "linking": c.linking.to_string(),
                "state": state_json(&v),
            }))
        })
        .collect()
}

fn state_json(v: &NormalValue) -> Value {
    json!({
        "pretty": v.pretty(4),
        "amplitudes": v.entries.iter().map(|(c, b)| json!({
            "basis": ket_label(b).unwrap_or_else(|| b.to_string()),
            "re": c.re,
            "im": c.im,
        })).collect::<Vec<_>>(),
    })
}

fn cmd_denote(file: &PathBuf, expr: &str, cfg: &TruncationConfig) -> Outcome {
    let prog = load(file)?;
    let out = if let Ok(u) = parse_unitary(&prog, expr) {
        let ty = typecheck_unitary(&u)?;
        let (m, warnings) = interp_unitary_checked(&u, cfg)?;
        json!({
            "version": SCHEMA_VERSION,
            "kind": "unitary",
            "type": ty.to_string(),
            "qnat_dim": cfg.qnat_dim,
            "matrix": m.to_json(),
            "warnings": warnings.iter().map(|w| w.0.clone()).collect::<Vec<_>>(),
        })
    } else if let Some(t) = parse_pure_term(&prog, expr).ok().filter(|t| t.is_closed()) {
        let ty = typecheck_term(&PureContext::new(), &t)?;
        let m = interp_term(&PureContext::new(), &t, cfg)?;
        json!({
            "version": SCHEMA_VERSION,
            "kind": "state",
            "type": ty.to_string(),
            "qnat_dim": cfg.qnat_dim,
            "matrix": m.to_json(),
            "warnings": [],
        })
    } else {
        let m = parse_main_term(&prog, expr)?;
        let ty = typecheck_main(&vec![], &m)?;
        let s = interp_config(&Configuration::initial(m), cfg)?;
        json!({
            "version": SCHEMA_VERSION,
            "kind": "program",
            "type": ty.to_string(),
            "qnat_dim": cfg.qnat_dim,
            "blocks": s.target.blocks,
            "matrix": s.schroedinger().to_json(),
            "warnings": [],
        })
    };
    emit!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(ExitCode::SUCCESS)
}

/// Accumulates PASS/FAIL/SKIP lines.
#[derive(Default)]
struct Report {
    failed: bool,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.failed |= !ok;
        emit!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn skip(&mut self, name: &str, why: String) {
        emit!("SKIP {name}: {why}");
    }

    fn error(&mut self, name: &str, e: &Error) {
        match e {
            Error::Unsupported(_) | Error::Truncation(_) | Error::DimensionCap(_) => self.skip(name, e.to_string()),
            _ => self.check(name, false, e.to_string()),
        }
    }
}

fn isometry_defect(m: &ComplexMatrix) -> f64 {
    m.adjoint().mul(m).max_diff(&ComplexMatrix::identity(m.cols()))
}

fn cmd_verify(file: &PathBuf, cfg: &TruncationConfig) -> Outcome {
    let prog = load(file)?;
    let (_, diags) = check_program(&prog);
    if !diags.is_empty() {
        return Err(Failure::Diagnostics(diags));
    }
    let mut rep = Report::default();
    for d in &prog.declarations {
        match d {
            Declaration::Unitary { name, body, .. } => {
                let label = format!("unitary {name}");
                match interp_unitary_checked(body, cfg) {
                    Ok((_, w)) if !w.is_empty() => rep.skip(&label, format!("{} truncation warning(s)", w.len())),
                    Ok((m, _)) => {
                        let dev = isometry_defect(&m).max(isometry_defect(&m.adjoint()));
                        rep.check(&label, dev <= ISOMETRY_TOLERANCE, format!("max deviation {dev:.3e}"));
                    }
                    Err(e) => rep.error(&label, &e),
                }
            }
            Declaration::State { name, body, .. } => {
                let label = format!("isometry {name}");
                match interp_term(&PureContext::new(), body, cfg) {
                    Ok(m) => {
                        let dev = isometry_defect(&m);
                        rep.check(&label, dev <= ISOMETRY_TOLERANCE, format!("max deviation {dev:.3e}"));
                    }
                    Err(e) => rep.error(&label, &e),
                }
            }
            Declaration::Def { .. } => {}
        }
    }
    if let Some(m) = &prog.entry {
        verify_entry(&mut rep, m, cfg);
    }
    Ok(if rep.failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn verify_entry(rep: &mut Report, m: &MainTerm, cfg: &TruncationConfig) {
    let c = Configuration::initial(m.clone());
    let opts = RunOptions { check_wf: true, trace: true, ..RunOptions::default() };
    let res = match run(&c, &opts) {
        Ok(r) => r,
        Err(e) => {
            rep.check("run", false, e.to_string());
            return;
        }
    };
    rep.check("subject reduction", true, format!("{} steps re-checked", res.steps));
    rep.check("termination", res.steps < DEFAULT_MAX_STEPS, format!("{} steps", res.steps));
    let step_defect = res.max_probability_defect;
    rep.check("step probabilities", step_defect <= PROBABILITY_TOLERANCE, format!("max deviation {step_defect:.3e}"));
    let total = (res.distribution.total() - 1.0).abs();
    rep.check("total probability", total <= PROBABILITY_TOLERANCE, format!("deviation {total:.3e}"));
    match adequacy_deviation(&c, cfg) {
        Ok(dev) => rep.check("adequacy", dev <= ORACLE_TOLERANCE, format!("max deviation {dev:.3e}")),
        Err(e) => rep.error("adequacy", &e),
    }
    let mut worst = 0.0f64;
    let mut seen: Vec<String> = Vec::new();
    for s in &res.trace {
        let key = s.from.to_string();
        if seen.len() >= SOUNDNESS_SAMPLE || seen.contains(&key) {
            continue;
        }
        seen.push(key);
        match soundness_deviation(&s.from, cfg) {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => {
                rep.error("soundness", &e);
                return;
            }
        }
    }
    rep.check("soundness", worst <= ORACLE_TOLERANCE, format!("{} configurations, max deviation {worst:.3e}", seen.len()));
}
