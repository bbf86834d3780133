//! Small hand-written modules used by tests, the CLI and the bindings.

use crate::interp::Value;
use crate::ir::{parse_module, Module};

pub const CAL_FILE: &str = include_str!("../data/cal_file.ir");

pub fn cal_file() -> Module {
    parse_module(CAL_FILE).expect("bundled cal_file sample parses")
}

/// Arguments for `@main` covering every branch of `@cal_file`.
pub fn cal_file_inputs() -> Vec<Vec<Value>> {
    let mut out = Vec::new();
    for len in [0, 1, 2, 7, 12, 31] {
        for fd in [-3, 0, 5] {
            out.push(vec![Value::Int(len), Value::Int(fd)]);
        }
    }
    out
}

/// Two functions with (i16, i64) and (i32, ptr) parameter lists, called
/// directly from `@main(i64)`.
pub const BAR_FOO: &str = include_str!("../data/bar_foo.ir");

pub fn bar_foo() -> Module {
    parse_module(BAR_FOO).expect("bundled bar_foo sample parses")
}
