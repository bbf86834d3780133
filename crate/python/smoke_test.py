"""Smoke test for the `fufi` extension module.

Uses an installed `fufi` if importable, otherwise loads the library built
by `cargo build -p fufi-py` from the workspace target directory.
"""

import importlib.machinery
import importlib.util
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent

SAMPLE = """module smoke
export @main
func @sq(%x: i64) -> i64 {
e:
  %r = mul i64 %x, %x
  ret %r
}
func @inc(%x: i64) -> i64 {
e:
  %one = const i64 1
  %r = add i64 %x, %one
  ret %r
}
func @main(%a: i64) -> i64 {
e:
  %s = call i64 @sq(%a)
  %t = call i64 @inc(%s)
  print %t
  ret %t
}
"""


def load():
    try:
        import fufi
        return fufi
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libfufi.so", "libfufi.dylib", "fufi.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("fufi", str(path))
                spec = importlib.util.spec_from_file_location("fufi", path, loader=loader)
                mod = importlib.util.module_from_spec(spec)
                loader.exec_module(mod)
                return mod
    sys.exit("fufi extension not found; run `cargo build -p fufi-py` first")


def main():
    fufi = load()
    assert "fufi_all" in fufi.MODES, fufi.MODES

    text = fufi.normalize(SAMPLE)
    assert fufi.validate(text) == []
    try:
        fufi.normalize("func @broken(")
    except ValueError as e:
        print("rejected malformed input:", str(e).splitlines()[0])
    else:
        raise AssertionError("malformed module accepted")

    base = fufi.run(text, "main", [7])
    assert base["exit"] == 50 and base["trace"] == ["50"], base

    for mode in fufi.MODES:
        o = fufi.obfuscate(text, mode, 42)
        got = fufi.run(o.ir, "main", [7], checks=True)
        assert (got["exit"], got["trace"], got["trap"]) == (50, ["50"], None), (mode, got)
        assert got["violations"] == [], got
        d = fufi.diff(text, o.ir, o.sidecar)
        print(f"{mode:13s} P@1={d['precision_at_1']:.2f} opcode_distance={d['opcode_distance']:.2f} "
              f"Fusion Ratio={o.stats['Fusion Ratio']:.2f}")

    prog = fufi.generate(7, functions=6, max_blocks=10)
    for args in fufi.inputs(prog, 5, 7):
        want = fufi.run(prog, "main", args)
        got = fufi.run(fufi.obfuscate(prog, "fufi_all", 3, {"fusion.deep": True}).ir, "main", args)
        assert (want["exit"], want["trace"]) == (got["exit"], got["trace"]), args
    print("smoke test passed")


if __name__ == "__main__":
    main()
