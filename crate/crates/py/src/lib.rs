use std::collections::BTreeMap;

use fufi_core::corpus::{self, Features, GenSpec};
use fufi_core::diffeval;
use fufi_core::interp::{parse_value, Limits, Options, Program, Value};
use fufi_core::ir::{self, Module};
use fufi_core::pipeline::{self, Mode, ObfuscationConfig};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value as Json};

fn parse(text: &str) -> PyResult<Module> {
    ir::parse_module(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, v: &Json) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn value_json(v: Value) -> Json {
    match v {
        Value::Int(i) => json!(i),
        Value::Float(x) => json!(x),
        other => json!(other.to_string()),
    }
}

/// Canonical text of an IR module. Raises ValueError on malformed input.
#[pyfunction]
fn normalize(text: &str) -> PyResult<String> {
    Ok(ir::print_module(&parse(text)?))
}

/// Structural problems of a module, empty when it is well formed.
#[pyfunction]
fn validate(text: &str) -> PyResult<Vec<String>> {
    match ir::parse_module_unchecked(text) {
        Ok(m) => Ok(ir::validate(&m).iter().map(|v| v.to_string()).collect()),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

#[pyclass(frozen)]
struct Obfuscated {
    #[pyo3(get)]
    ir: String,
    provenance: Json,
    stats: Json,
}

#[pymethods]
impl Obfuscated {
    #[getter]
    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.provenance)
    }

    #[getter]
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.stats)
    }

    /// Provenance in the sidecar format accepted by `diff`.
    #[getter]
    fn sidecar(&self) -> String {
        self.provenance.to_string()
    }

    fn __repr__(&self) -> String {
        format!("<Obfuscated mode={} seed={}>", self.stats["mode"], self.stats["seed"])
    }
}

/// Obfuscates `text`. `config` maps dotted keys such as
/// `fission.min_effect` to values.
#[pyfunction]
#[pyo3(signature = (text, mode, seed, config=None))]
fn obfuscate(
    text: &str,
    mode: &str,
    seed: u64,
    config: Option<BTreeMap<String, Bound<'_, PyAny>>>,
) -> PyResult<Obfuscated> {
    let m = parse(text)?;
    let mode: Mode = mode.parse().map_err(|e: pipeline::UnknownMode| PyValueError::new_err(e.to_string()))?;
    let mut cfg = ObfuscationConfig::new(mode, seed);
    for (k, v) in config.unwrap_or_default() {
        // Python spells booleans True/False
        let v = v.str()?.to_string().to_lowercase();
        cfg.set(&k, &v).map_err(|e| PyKeyError::new_err(e.to_string()))?;
    }
    let o = pipeline::obfuscate(&m, &cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let side = pipeline::sidecar_json(&o.provenance, seed, mode);
    Ok(Obfuscated {
        ir: ir::print_module(&o.module),
        provenance: serde_json::from_str(&side).expect("sidecar is JSON"),
        stats: serde_json::to_value(&o.stats).expect("stats serialize"),
    })
}

/// Interprets `entry`. Arguments are literals in IR syntax, or Python
/// numbers. Returns a dict with exit, trace, trap, steps and violations.
#[pyfunction]
#[pyo3(signature = (text, entry="main", args=Vec::new(), max_steps=None, checks=false))]
fn run<'py>(
    py: Python<'py>,
    text: &str,
    entry: &str,
    args: Vec<Bound<'py, PyAny>>,
    max_steps: Option<u64>,
    checks: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let m = parse(text)?;
    let f = m.function(entry).ok_or_else(|| PyKeyError::new_err(format!("no function `@{entry}`")))?;
    if args.len() != f.params.len() {
        return Err(PyValueError::new_err(format!("`@{entry}` takes {} arguments, got {}", f.params.len(), args.len())));
    }
    let mut values = Vec::new();
    for (a, p) in args.iter().zip(&f.params) {
        let lit = a.str()?.to_string();
        let v = parse_value(&lit, p.ty).ok_or_else(|| PyValueError::new_err(format!("`{lit}` is not a {} literal", p.ty)))?;
        values.push(v);
    }
    let prog = Program::new(&m).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let limits = Limits { steps: max_steps.unwrap_or(Limits::default().steps), ..Limits::default() };
    let o = prog
        .run_with(entry, &values, Options { limits, checks, coverage: false })
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = &o.result;
    let report = json!({
        "exit": r.exit_value.map(value_json),
        "trace": r.output_trace,
        "trap": r.trap.as_ref().map(|t| json!({"kind": t.kind.name(), "function": t.function, "block": t.block})),
        "steps": r.steps,
        "violations": o.violations.iter().map(|v| format!("{:?} in @{}: {}", v.kind, v.function, v.message)).collect::<Vec<_>>(),
    });
    to_py(py, &report)
}

/// Matches the functions of `original` against `obfuscated` and scores
/// the result with the provenance sidecar.
#[pyfunction]
fn diff<'py>(py: Python<'py>, original: &str, obfuscated: &str, sidecar: &str) -> PyResult<Bound<'py, PyAny>> {
    let (a, b) = (parse(original)?, parse(obfuscated)?);
    let side = pipeline::parse_sidecar(sidecar).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = diffeval::diff(&a, &b, &side.provenance);
    let report = json!({
        "precision_at_1": r.precision_at_1,
        "opcode_distance": r.opcode_distances[0],
        "matches": r.matches,
        "ranks": r.ranks,
    });
    to_py(py, &report)
}

/// A random program. `features` is a comma list, `all` or `none`.
#[pyfunction]
#[pyo3(signature = (seed, functions=8, max_blocks=14, features="all"))]
fn generate(seed: u64, functions: usize, max_blocks: usize, features: &str) -> PyResult<String> {
    let features = Features::parse(features).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if functions == 0 {
        return Err(PyValueError::new_err("at least one function (main) is required"));
    }
    let spec = GenSpec { seed, n_functions: functions, max_blocks, features };
    Ok(ir::print_module(&corpus::generate(&spec)))
}

/// `n` argument vectors for `entry`, as IR literals.
#[pyfunction]
#[pyo3(signature = (text, n, seed, entry="main"))]
fn inputs(text: &str, n: usize, seed: u64, entry: &str) -> PyResult<Vec<Vec<String>>> {
    let m = parse(text)?;
    Ok(corpus::generate_inputs(&m, entry, n, seed).iter().map(|v| v.iter().map(|x| x.to_string()).collect()).collect())
}

#[pymodule]
fn fufi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MODES", Mode::ALL.iter().map(|x| x.name()).collect::<Vec<_>>())?;
    m.add("CONFIG_KEYS", ObfuscationConfig::KEYS.to_vec())?;
    m.add_class::<Obfuscated>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(obfuscate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(inputs, m)?)?;
    Ok(())
}
