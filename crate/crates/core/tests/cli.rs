use std::path::Path;
use std::process::{Command, Output};

use fufi_core::corpus;
use fufi_core::samples;

fn fufi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fufi")).args(args).current_dir(dir).output().unwrap()
}

#[test]
fn obfuscate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.ir"), samples::CAL_FILE).unwrap();
    let mut artifacts = Vec::new();
    for k in 0..2 {
        let (o, p, s) = (format!("o{k}.ir"), format!("p{k}.json"), format!("s{k}.json"));
        let r = fufi(&["obfuscate", "in.ir", "--mode", "fufi_all", "--seed", "9", "-o", &o, "--provenance", &p, "--stats", &s], dir.path());
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
        artifacts.push([o, p, s].map(|f| std::fs::read(dir.path().join(f)).unwrap()));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn obfuscated_program_prints_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus::generate(&corpus::suite_spec(5, 1));
    std::fs::write(dir.path().join("p.ir"), fufi_core::ir::print_module(&m)).unwrap();
    let r = fufi(&["obfuscate", "p.ir", "--mode", "fufi_all", "--seed", "3", "-o", "q.ir"], dir.path());
    assert_eq!(r.status.code(), Some(0));
    for args in corpus::generate_inputs(&m, "main", 10, 5) {
        let lits: Vec<String> = args.iter().map(|v| v.to_string()).collect();
        let run = |file: &str| {
            let mut a = vec!["run", file, "--args"];
            a.extend(lits.iter().map(String::as_str));
            fufi(&a, dir.path())
        };
        let (x, y) = (run("p.ir"), run("q.ir"));
        assert_eq!(x.status.code(), y.status.code());
        assert_eq!(String::from_utf8(x.stdout).unwrap(), String::from_utf8(y.stdout).unwrap());
    }
}

#[test]
fn identity_diff_reports_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.ir"), samples::BAR_FOO).unwrap();
    fufi(&["obfuscate", "in.ir", "--mode", "identity", "--seed", "0", "-o", "o.ir", "--provenance", "p.json"], dir.path());
    let r = fufi(&["diff", "in.ir", "o.ir", "--provenance", "p.json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["precision_at_1"], 1.0);
    assert_eq!(v["opcode_distance"], 0.0);
}

#[test]
fn stats_reports_table_fields() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.ir"), samples::CAL_FILE).unwrap();
    let r = fufi(&["stats", "in.ir"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    for k in ["Fission Ratio", "#BB", "RR", "Fusion Ratio", "#RP", "#HBB"] {
        assert!(v[k].is_number(), "{k}");
    }
}
