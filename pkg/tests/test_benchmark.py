import pathlib
import subprocess
import sys

BENCH = pathlib.Path(__file__).resolve().parents[1] / "benchmarks" / "bench_qr_kernel.py"


def test_benchmark_runs():
    out = subprocess.run([sys.executable, str(BENCH), "--repeat", "1"], capture_output=True, text=True, timeout=300)
    assert out.returncode == 0, out.stderr
    lines = out.stdout.strip().splitlines()
    assert lines[-1].split()[:2] == ["800", "21"]
    diffs = [float(l.split()[-1]) for l in lines[1:] if l.split()[-1] != "-"]
    assert all(d < 1e-6 for d in diffs)
