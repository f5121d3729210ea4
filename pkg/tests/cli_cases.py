"""Small invocations of every CLI subcommand, shared by the CLI tests and the acceptance suite."""

import subprocess
import sys
from pathlib import Path

BETA = "beta:a=0.5,b=1.5"

CASES = {
    "rates": ["rates", "--measure", BETA, "--b", "8"],
    "psi": ["psi", "--measure", BETA, "--q", "1:1e6", "--points", "5"],
    "speed": ["speed", "--measure", BETA, "--t", "1e-4:1e-1", "--points", "4"],
    "cdi": ["cdi", "--measure", BETA],
    "coalescent": ["coalescent", "--measure", BETA, "--n", "40", "--t", "0.5", "--seed", "3"],
    "levy": ["levy", "--measure", BETA, "--t", "0.1", "--cutoff", "1e-2", "--seed", "3"],
    "csbp": ["csbp", "--measure", BETA, "--t", "0.2", "--cutoff", "1e-2", "--seed", "3"],
    "lookdown": ["lookdown", "--measure", BETA, "--n", "12", "--t", "0.3", "--seed", "3"],
    "couple": ["couple", "--measure", BETA, "--eps", "0.2", "--t", "0.3", "--n", "16", "--seed", "7"],
    "sandwich": ["sandwich", "--measure", BETA, "--eps", "0.3", "--t", "0.2,0.1", "--n", "100", "--runs", "10",
                 "--seed", "3", "--min-coverage", "0"],
    "indices": ["indices", "--measure", BETA, "--n-max", "30"],
    "sparse": ["sparse", "--eps", "0.3", "--n-max", "40", "--r-max", "1"],
    "duality": ["duality", "--measure", BETA, "--n", "3", "--t", "0.3", "--runs", "50", "--seed", "3"],
}


def run_cli(args, out: Path):
    """Run the CLI in a subprocess; returns (exit code, stdout, {relative path: bytes})."""
    proc = subprocess.run([sys.executable, "-m", "lambdacoal", "--out", str(out), *args],
                          capture_output=True, text=True, timeout=600)
    files = {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    return proc.returncode, proc.stdout, files
