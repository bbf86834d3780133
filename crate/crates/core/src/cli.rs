//! The `fufi` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value as Json};

use crate::analysis::{innocuous_blocks, FunctionAnalyses};
use crate::corpus::{self, Features, GenSpec, Manifest, ManifestEntry};
use crate::diffeval;
use crate::fission::identify_regions;
use crate::interp::{parse_value, Limits, Options, Program, Value};
use crate::ir::{parse_module, print_module, Module, ParseError};
use crate::pipeline::{obfuscate, parse_sidecar, sidecar_json, Mode, ObfuscationConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TRAP: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  the interpreted program trapped (run)
  2  usage error: bad flags, unknown entry, malformed argument literals
  3  file could not be read or written
  4  input IR, provenance or config failed to parse or validate
  5  internal error";

#[derive(Debug, Parser)]
#[command(name = "fufi", version, about = "Function fission and fusion over a small IR", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Parse and validate a module.
    Validate { input: PathBuf },
    /// Obfuscate a module.
    Obfuscate(ObfuscateArgs),
    /// Interpret a function and print its trace and exit value.
    Run(RunArgs),
    /// Match an original module against an obfuscated one.
    Diff {
        original: PathBuf,
        obfuscated: PathBuf,
        /// Sidecar written by `obfuscate --provenance`.
        #[arg(long)]
        provenance: PathBuf,
    },
    /// Dump analyses and the obfuscation statistics of a module.
    Stats {
        input: PathBuf,
        #[arg(long, default_value = "fufi_all")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        settings: Vec<String>,
    },
    /// Generate random programs and their input vectors.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct ObfuscateArgs {
    input: PathBuf,
    /// identity, fission_only, fusion_only, fufi_sep, fufi_ori or fufi_all
    #[arg(long)]
    mode: Mode,
    /// Drives fusion pairing; required so outputs are reproducible.
    #[arg(long)]
    seed: u64,
    /// Output IR file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the provenance sidecar (JSON) here.
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Write the statistics report (JSON) here.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// fission.min_effect, fission.max_regions_per_function,
    /// fission.default_trip_count, fusion.deep, fusion.max_params
    #[arg(long = "set", value_name = "KEY=VALUE")]
    settings: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    input: PathBuf,
    #[arg(long, default_value = "main")]
    entry: String,
    /// Literals for the entry parameters, in order.
    #[arg(long, num_args = 0.., allow_hyphen_values = true)]
    args: Vec<String>,
    /// Step budget; exceeding it traps.
    #[arg(long, default_value_t = Limits::default().steps)]
    max_steps: u64,
    /// Also report runtime invariant violations.
    #[arg(long)]
    checks: bool,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = corpus::STANDARD_SEED)]
    seed: u64,
    /// Number of programs.
    #[arg(long, default_value_t = corpus::STANDARD_COUNT)]
    count: usize,
    /// Comma-separated: branches, loops, icalls, setjmp, may_throw,
    /// globals, variadic, or all / none. Defaults to the standard suite.
    #[arg(long)]
    features: Option<String>,
    /// Defined functions per program, main included.
    #[arg(long)]
    functions: Option<usize>,
    /// Soft cap on blocks per function.
    #[arg(long)]
    max_blocks: Option<usize>,
    /// Input vectors per program; each is stored as one string of
    /// whitespace-separated literals, as `run --args` takes them.
    #[arg(long, default_value_t = 100)]
    inputs: usize,
    /// Output directory.
    #[arg(short, long, default_value = "corpus")]
    output: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type Res<T> = Result<T, Failure>;

fn read(path: &Path) -> Res<String> {
    let bytes = fs::read(path).map_err(|e| fail(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    String::from_utf8(bytes).map_err(|e| fail(EXIT_INVALID, format!("{}: not UTF-8 text: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Res<Module> {
    let text = read(path)?;
    parse_module(&text).map_err(|e| match e {
        ParseError::Syntax { .. } => fail(EXIT_INVALID, format!("{}:{e}", path.display())),
        ParseError::Invalid(_) => fail(EXIT_INVALID, format!("{}: {e}", path.display())),
    })
}

fn configure(cfg: &mut ObfuscationConfig, settings: &[String]) -> Res<()> {
    for s in settings {
        let (k, v) = s.split_once('=').ok_or_else(|| fail(EXIT_USAGE, format!("expected KEY=VALUE, got `{s}`")))?;
        cfg.set(k, v).map_err(|e| fail(EXIT_INVALID, e.to_string()))?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn cmd_validate(input: &Path, out: &mut dyn Write) -> Res<()> {
    let m = load(input)?;
    let defined = m.functions.iter().filter(|f| !f.external).count();
    emit(out, &format!("ok: module {} ({} functions, {} defined)\n", m.name, m.functions.len(), defined))
}

fn emit(out: &mut dyn Write, text: &str) -> Res<()> {
    out.write_all(text.as_bytes()).map_err(|e| fail(EXIT_IO, format!("cannot write output: {e}")))
}

fn cmd_obfuscate(a: &ObfuscateArgs, out: &mut dyn Write) -> Res<()> {
    let m = load(&a.input)?;
    let mut cfg = ObfuscationConfig::new(a.mode, a.seed);
    configure(&mut cfg, &a.settings)?;
    let o = obfuscate(&m, &cfg).map_err(|e| fail(EXIT_INTERNAL, e.to_string()))?;
    let text = print_module(&o.module);
    match &a.output {
        Some(p) => write(p, &text)?,
        None => emit(out, &text)?,
    }
    if let Some(p) = &a.provenance {
        write(p, &(sidecar_json(&o.provenance, a.seed, a.mode) + "\n"))?;
    }
    if let Some(p) = &a.stats {
        write(p, &to_json(&o.stats))?;
    }
    Ok(())
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Res<i32> {
    let m = load(&a.input)?;
    let f = m.function(&a.entry).ok_or_else(|| fail(EXIT_USAGE, format!("no function `@{}`", a.entry)))?;
    if a.args.len() != f.params.len() {
        return Err(fail(EXIT_USAGE, format!("`@{}` takes {} arguments, got {}", a.entry, f.params.len(), a.args.len())));
    }
    let args: Vec<Value> = a
        .args
        .iter()
        .zip(&f.params)
        .map(|(t, p)| parse_value(t, p.ty).ok_or_else(|| fail(EXIT_USAGE, format!("`{t}` is not a {} literal", p.ty))))
        .collect::<Res<_>>()?;
    let prog = Program::new(&m).map_err(|e| fail(EXIT_INVALID, e.to_string()))?;
    let limits = Limits { steps: a.max_steps, ..Limits::default() };
    let o = prog
        .run_with(&a.entry, &args, Options { limits, checks: a.checks, coverage: false })
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let mut text = String::new();
    for line in &o.result.output_trace {
        text.push_str(line);
        text.push('\n');
    }
    for v in &o.violations {
        text.push_str(&format!("violation: {:?} in @{}: {}\n", v.kind, v.function, v.message));
    }
    let code = match &o.result.trap {
        Some(t) => {
            text.push_str(&format!("trap: {} in @{} at {}\n", t.kind.name(), t.function, t.block));
            EXIT_TRAP
        }
        None => {
            let v = o.result.exit_value.map_or("void".to_string(), |v| v.to_string());
            text.push_str(&format!("exit: {v}\n"));
            EXIT_OK
        }
    };
    emit(out, &text)?;
    Ok(code)
}

fn cmd_diff(orig: &Path, obf: &Path, prov: &Path, out: &mut dyn Write) -> Res<()> {
    let a = load(orig)?;
    let b = load(obf)?;
    let side = parse_sidecar(&read(prov)?).map_err(|e| fail(EXIT_INVALID, format!("{}: {e}", prov.display())))?;
    let r = diffeval::diff(&a, &b, &side.provenance);
    let report = json!({
        "precision_at_1": r.precision_at_1,
        "opcode_distance": r.opcode_distances[0],
        "mode": side.mode,
        "seed": side.seed,
        "matches": r.matches,
        "ranks": r.ranks,
    });
    emit(out, &to_json(&report))
}

fn function_dump(m: &Module, cfg: &ObfuscationConfig) -> Vec<Json> {
    let mut out = Vec::new();
    for f in m.functions.iter().filter(|f| !f.external) {
        let an = FunctionAnalyses::new(f, cfg.fission.default_trip_count);
        let label = |i: usize| f.blocks[i].label.clone();
        let idom: Map<String, Json> = (0..f.blocks.len())
            .map(|b| (label(b), an.dom.parent[b].map_or(Json::Null, |p| Json::String(label(p)))))
            .collect();
        let loops: Vec<Json> = an
            .loops
            .loops
            .iter()
            .map(|l| json!({"header": label(l.header), "blocks": l.body.iter().map(|&b| label(b)).collect::<Vec<_>>(), "trip_count": l.trip_count}))
            .collect();
        let regions: Vec<Json> = identify_regions(f, &an, &cfg.fission)
            .iter()
            .map(|r| json!({"head": r.head, "blocks": r.members, "exits": r.exits.len(), "effect": r.effect, "cost": r.cost}))
            .collect();
        let innocuous = innocuous_blocks(m, f);
        out.push(json!({
            "name": f.name,
            "blocks": f.blocks.len(),
            "edges": an.cfg.edge_count(),
            "instructions": f.instruction_count(),
            "idom": idom,
            "loops": loops,
            "innocuous_blocks": f.blocks.iter().filter(|b| innocuous.contains(&b.label)).map(|b| b.label.clone()).collect::<Vec<_>>(),
            "selected_regions": regions,
        }));
    }
    out
}

fn cmd_stats(input: &Path, mode: Mode, seed: u64, settings: &[String], out: &mut dyn Write) -> Res<()> {
    let m = load(input)?;
    let mut cfg = ObfuscationConfig::new(mode, seed);
    configure(&mut cfg, settings)?;
    let o = obfuscate(&m, &cfg).map_err(|e| fail(EXIT_INTERNAL, e.to_string()))?;
    let mut report = match serde_json::to_value(&o.stats).expect("stats serialize") {
        Json::Object(map) => map,
        _ => unreachable!(),
    };
    report.insert("module".into(), Json::String(m.name.clone()));
    report.insert("functions".into(), Json::Array(function_dump(&m, &cfg)));
    emit(out, &to_json(&report))
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Res<()> {
    let features = a.features.as_deref().map(Features::parse).transpose().map_err(|e| fail(EXIT_USAGE, e))?;
    fs::create_dir_all(&a.output).map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", a.output.display())))?;
    let mut programs = Vec::new();
    for i in 0..a.count {
        let mut spec: GenSpec = corpus::suite_spec(a.seed, i);
        if let Some(f) = features {
            spec.features = f;
        }
        spec.n_functions = a.functions.unwrap_or(spec.n_functions);
        spec.max_blocks = a.max_blocks.unwrap_or(spec.max_blocks);
        let m = corpus::generate(&spec);
        let file = format!("prog_{i:04}.ir");
        write(&a.output.join(&file), &print_module(&m))?;
        let inputs = corpus::generate_inputs(&m, "main", a.inputs, spec.seed);
        let inputs = inputs.iter().map(|v| corpus::format_inputs(v)).collect();
        programs.push(ManifestEntry { file, seed: spec.seed, entry: "main".into(), inputs });
    }
    let manifest = Manifest { seed: a.seed, count: a.count, programs };
    write(&a.output.join("inputs.json"), &(serde_json::to_string(&manifest).expect("manifest serializes") + "\n"))?;
    emit(out, &format!("wrote {} programs to {}\n", a.count, a.output.display()))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Res<i32> {
    match cli.cmd {
        Cmd::Validate { input } => cmd_validate(&input, out).map(|_| EXIT_OK),
        Cmd::Obfuscate(a) => cmd_obfuscate(&a, out).map(|_| EXIT_OK),
        Cmd::Run(a) => cmd_run(&a, out),
        Cmd::Diff { original, obfuscated, provenance } => {
            cmd_diff(&original, &obfuscated, &provenance, out).map(|_| EXIT_OK)
        }
        Cmd::Stats { input, mode, seed, settings } => cmd_stats(&input, mode, seed, &settings, out).map(|_| EXIT_OK),
        Cmd::Gen(a) => cmd_gen(&a, out).map(|_| EXIT_OK),
    }
}

/// Runs the command line and returns the process exit code. Diagnostics
/// go to `err`, results to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli, out)));
    match result {
        Ok(Ok(code)) => code,
        Ok(Err(f)) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| p.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            let _ = writeln!(err, "internal error: {msg}");
            EXIT_INTERNAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("fufi").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn sample(dir: &Path) -> PathBuf {
        let p = dir.join("cal.ir");
        fs::write(&p, crate::samples::CAL_FILE).unwrap();
        p
    }

    #[test]
    fn exit_codes() {
        let d = tempfile::tempdir().unwrap();
        let p = sample(d.path());
        let p = p.to_str().unwrap();
        assert_eq!(call(&["validate", p]).0, EXIT_OK);
        assert_eq!(call(&["validate", "/nonexistent/x.ir"]).0, EXIT_IO);
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(call(&["obfuscate", p, "--mode", "fufi_all"]).0, EXIT_USAGE, "seed is mandatory");
        let bad = d.path().join("bad.ir");
        fs::write(&bad, "module m func @f( {").unwrap();
        let (code, _, err) = call(&["validate", bad.to_str().unwrap()]);
        assert_eq!(code, EXIT_INVALID);
        assert!(err.starts_with("error:"));
        assert_eq!(call(&["obfuscate", p, "--mode", "fufi_all", "--seed", "1", "--set", "fission.bogus=1"]).0, EXIT_INVALID);
        assert_eq!(call(&["--help"]).0, EXIT_OK);
        assert!(call(&["--help"]).1.contains("Exit codes"));
    }

    #[test]
    fn run_prints_trace_and_exit() {
        let d = tempfile::tempdir().unwrap();
        let p = sample(d.path());
        let (code, out, _) = call(&["run", p.to_str().unwrap(), "--entry", "main", "--args", "7", "-3"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.lines().last().unwrap().starts_with("exit: "));
        assert_eq!(call(&["run", p.to_str().unwrap(), "--args", "7"]).0, EXIT_USAGE);
        assert_eq!(call(&["run", p.to_str().unwrap(), "--args", "7", "x"]).0, EXIT_USAGE);
        assert_eq!(call(&["run", p.to_str().unwrap(), "--entry", "nope"]).0, EXIT_USAGE);
    }

    #[test]
    fn trap_exit_code() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("t.ir");
        fs::write(&p, "module m\nfunc @main() -> void {\ne:\n  unreachable\n}\n").unwrap();
        let (code, out, _) = call(&["run", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_TRAP);
        assert!(out.contains("trap: unreachable"));
    }

    #[test]
    fn obfuscate_identity_then_diff() {
        let d = tempfile::tempdir().unwrap();
        let p = sample(d.path());
        let (o, pr) = (d.path().join("o.ir"), d.path().join("p.json"));
        let args = ["obfuscate", p.to_str().unwrap(), "--mode", "identity", "--seed", "3", "-o", o.to_str().unwrap(), "--provenance", pr.to_str().unwrap()];
        assert_eq!(call(&args).0, EXIT_OK);
        let (code, out, _) = call(&["diff", p.to_str().unwrap(), o.to_str().unwrap(), "--provenance", pr.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        let v: Json = serde_json::from_str(&out).unwrap();
        assert_eq!(v["precision_at_1"], 1.0);
        assert_eq!(v["opcode_distance"], 0.0);
    }

    #[test]
    fn stats_and_gen() {
        let d = tempfile::tempdir().unwrap();
        let p = sample(d.path());
        let (code, out, _) = call(&["stats", p.to_str().unwrap(), "--mode", "fission_only"]);
        assert_eq!(code, EXIT_OK);
        let v: Json = serde_json::from_str(&out).unwrap();
        for k in ["Fission Ratio", "#BB", "RR", "Fusion Ratio", "#RP", "#HBB"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["functions"][0]["name"], "cal_file");
        let g = d.path().join("g");
        let gen = ["gen", "--seed", "5", "--count", "3", "--inputs", "4", "-o", g.to_str().unwrap()];
        assert_eq!(call(&gen).0, EXIT_OK);
        let manifest: Json = serde_json::from_str(&fs::read_to_string(g.join("inputs.json")).unwrap()).unwrap();
        assert_eq!(manifest["programs"].as_array().unwrap().len(), 3);
        assert_eq!(manifest["programs"][0]["inputs"].as_array().unwrap().len(), 4);
        assert_eq!(call(&["validate", g.join("prog_0002.ir").to_str().unwrap()]).0, EXIT_OK);
        let first = fs::read_to_string(g.join("prog_0000.ir")).unwrap();
        assert_eq!(call(&gen).0, EXIT_OK);
        assert_eq!(fs::read_to_string(g.join("prog_0000.ir")).unwrap(), first);
    }
}
