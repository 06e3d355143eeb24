"""
Static and dynamic instruction accounting over the kernel corpus, and the
benchmark table comparing the native code against the four hardened
variants.

Ratios are normalized against the native run of the same kernel under
identical timing; the summary row is the geometric mean of those ratios
across kernels.  The simulator is deterministic, so a single run per cell
replaces repeated measurements.

For reference only: hardware measurements of these scheme families on
real benchmark suites report roughly 440% runtime overhead for full
LFENCE serialization versus roughly 60% for the data-dependency schemes,
with mean IPC dropping from about 2.3 to about 0.5 under serialization
but only to about 2 under the dependency schemes.  The simulator's
ratios are desk-scale analogs on micro-kernels and are not calibrated to
those hardware numbers; only orderings carry over.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace

from .corpus import Kernel
from .isa import Program
from .passes import PassConfig, PassError, PassKind, harden
from .specsim import MispredictPolicy, SimError, TimingConfig, simulate
from .interp import InterpError

VARIANTS = ("native", "lfence", "lahf", "slh", "argdep")


def count_static(program: Program) -> int:
    """Instructions in the program; labels are not counted."""
    return sum(len(f.instructions()) for f in program.functions)


@dataclass
class BenchResult:
    program: str
    variant: str
    static_instructions: int = 0
    dynamic_instructions: int = 0
    cycles: int = 0
    ipc: float = 0.0
    overhead_vs_native: float = 1.0
    instr_increase_vs_native: float = 1.0
    failed: bool = False
    error: str = ""

    def as_dict(self) -> dict:
        return {
            "program": self.program,
            "variant": self.variant,
            "static_instructions": self.static_instructions,
            "dynamic_instructions": self.dynamic_instructions,
            "cycles": self.cycles,
            "ipc": self.ipc,
            "overhead_vs_native": self.overhead_vs_native,
            "instr_increase_vs_native": self.instr_increase_vs_native,
            "failed": self.failed,
            "error": self.error,
        }


def _variant_program(kernel: Kernel, variant: str) -> Program:
    if variant == "native":
        return kernel.program
    hardened, _ = harden(kernel.program, PassConfig(PassKind(variant)))
    return hardened


def run_bench(corpus: list[Kernel], variants: list[PassKind] | None = None,
              timing: TimingConfig | None = None,
              policy: MispredictPolicy | None = None) -> list[BenchResult]:
    """Simulate every (kernel, variant) cell and append per-variant
    geometric-mean summary rows. Failed cells are recorded, not fatal."""
    base_timing = timing if timing is not None else TimingConfig()
    policy = policy if policy is not None else MispredictPolicy("never")
    names = ["native"] + [v.value for v in (variants or list(PassKind))]

    results: list[BenchResult] = []
    per_variant: dict[str, list[BenchResult]] = {n: [] for n in names}
    for kernel in sorted(corpus, key=lambda k: k.name):
        kernel_timing = replace(base_timing,
                                warm_lines=base_timing.warm_lines | kernel.warm_lines)
        native_cycles = native_dyn = None
        for variant in names:
            row = BenchResult(kernel.name, variant)
            try:
                program = _variant_program(kernel, variant)
                row.static_instructions = count_static(program)
                sim = simulate(program, kernel.bench_state(), kernel_timing, policy,
                               kernel.step_limit, entry=kernel.entry)
                row.dynamic_instructions = sim.metrics.dynamic_instructions
                row.cycles = sim.metrics.cycles
                row.ipc = sim.metrics.ipc
                if variant == "native":
                    native_cycles = sim.metrics.cycles
                    native_dyn = sim.metrics.dynamic_instructions
                if native_cycles:
                    row.overhead_vs_native = row.cycles / native_cycles
                if native_dyn:
                    row.instr_increase_vs_native = row.dynamic_instructions / native_dyn
            except (PassError, SimError, InterpError) as e:
                row.failed = True
                row.error = str(e)
            results.append(row)
            if not row.failed:
                per_variant[variant].append(row)

    for variant in names:
        rows = per_variant[variant]
        summary = BenchResult("gmean", variant)
        if rows:
            summary.overhead_vs_native = _geomean(r.overhead_vs_native for r in rows)
            summary.instr_increase_vs_native = _geomean(
                r.instr_increase_vs_native for r in rows)
            summary.ipc = _geomean(r.ipc for r in rows)
        results.append(summary)
    return results


def _geomean(values) -> float:
    vals = [v for v in values if v > 0]
    if not vals:
        return 0.0
    return math.exp(sum(math.log(v) for v in vals) / len(vals))


# ---------------------------------------------------------------------------
# report formats
# ---------------------------------------------------------------------------

_COLUMNS = ("program", "variant", "static_instructions", "dynamic_instructions",
            "cycles", "ipc", "overhead_vs_native", "instr_increase_vs_native",
            "failed")

_REFERENCE_NOTE = (
    "Reference (hardware, not comparable to simulated ratios): full LFENCE "
    "serialization has been measured around 440% runtime overhead with mean "
    "IPC dropping from ~2.3 to ~0.5, while data-dependency schemes stay "
    "around 60% overhead with IPC near 2."
)


def _format_value(row: BenchResult, col: str) -> str:
    value = getattr(row, col)
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


def to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for row in results:
        writer.writerow([_format_value(row, c) for c in _COLUMNS])
    return buf.getvalue()


def to_json(results: list[BenchResult]) -> str:
    return json.dumps({"schema": 1, "reference_note": _REFERENCE_NOTE,
                       "results": [r.as_dict() for r in results]}, indent=2) + "\n"


def to_markdown(results: list[BenchResult]) -> str:
    lines = ["| " + " | ".join(_COLUMNS) + " |",
             "|" + "|".join("---" for _ in _COLUMNS) + "|"]
    for row in results:
        lines.append("| " + " | ".join(_format_value(row, c) for c in _COLUMNS) + " |")
    lines.append("")
    lines.append(_REFERENCE_NOTE)
    return "\n".join(lines) + "\n"
