"""
The bundled micro-kernel corpus: thirteen fixed kernels spanning the
regimes the benchmark report characterizes (ILP-heavy streaming, tight
dependent loops, load-dense histogramming, arithmetic-dense loops,
diamonds, nested loops and guards, store/reload traffic) plus the
out-of-bounds gadget family used by the security checks.

Each kernel is a `.s` file next to a `.json` file holding its benchmark
initial state, at least four input vectors for differential testing, and
the attack configuration: the always-warm lines, the swept attack lines,
an optional weak-guard variant (guard lines forced cold), whether the
kernel is natively exploitable at default timing, and the branch whose
misprediction carries the attack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .frontend import parse_asm
from .interp import MachineState
from .isa import Opcode, Program
from .specsim import TimingConfig
from .stateio import apply_state, load_state_file, _int


@dataclass(frozen=True)
class AttackSpec:
    exploitable: bool
    leak_site: int
    step_limit: int
    registers: dict
    memory: list
    warm: frozenset[int]
    attack_lines: frozenset[int]
    cold_variant: frozenset[int]

    def warm_for(self, setting: str) -> frozenset[int]:
        """Warm-line set for a sweep setting: 'warm' and 'cold' toggle the
        attack lines; 'weak_guard' keeps them warm but chills the guard."""
        if setting == "warm":
            return self.warm | self.attack_lines
        if setting == "cold":
            return self.warm
        if setting == "weak_guard":
            return (self.warm - self.cold_variant) | self.attack_lines
        raise ValueError(f"unknown attack setting {setting!r}")

    def settings(self) -> list[str]:
        out = ["warm", "cold"]
        if self.cold_variant:
            out.append("weak_guard")
        return out


@dataclass
class Kernel:
    name: str
    text: str
    program: Program
    entry: str
    step_limit: int
    base: dict
    vectors: list[dict]
    warm_lines: frozenset[int]
    attack: AttackSpec

    def _state(self, overrides: list[dict]) -> MachineState:
        state = MachineState()
        apply_state(state, self.base)
        for data in overrides:
            apply_state(state, data)
        return state

    def bench_state(self) -> MachineState:
        return self._state([])

    def vector_state(self, index: int) -> MachineState:
        return self._state([self.vectors[index]])

    def attack_state(self) -> MachineState:
        return self._state([{"registers": self.attack.registers,
                             "memory": self.attack.memory}])

    def bench_timing(self) -> TimingConfig:
        return TimingConfig(warm_lines=self.warm_lines)

    def attack_timing(self, setting: str) -> TimingConfig:
        return TimingConfig(warm_lines=self.attack.warm_for(setting))

    def branch_sites(self) -> list[int]:
        sites = []
        for func in self.program.functions:
            for instr in func.instructions():
                if instr.opcode is Opcode.JCC:
                    assert instr.loc is not None
                    sites.append(instr.loc)
        return sites


def _expand_warm(data: dict) -> frozenset[int]:
    lines: set[int] = set()
    for a in data.get("warm_lines", []):
        a = _int(a, "warm_lines")
        lines.add(a - a % 64)
    for r in data.get("warm_ranges", []):
        start = _int(r["start"], "warm_ranges.start")
        length = _int(r["length"], "warm_ranges.length")
        a = start - start % 64
        while a < start + length:
            lines.add(a)
            a += 64
    return frozenset(lines)


def _load_kernel(name: str, text: str, data: dict) -> Kernel:
    program = parse_asm(text, source=f"{name}.s")
    atk = data["attack"]
    attack = AttackSpec(
        exploitable=bool(atk["exploitable"]),
        leak_site=_int(atk["leak_site"], "leak_site"),
        step_limit=_int(atk["step_limit"], "attack.step_limit"),
        registers=atk.get("registers", {}),
        memory=atk.get("memory", []),
        warm=frozenset(_int(a, "warm") - _int(a, "warm") % 64
                       for a in atk.get("warm", [])),
        attack_lines=frozenset(_int(a, "attack_lines") - _int(a, "attack_lines") % 64
                               for a in atk.get("attack_lines", [])),
        cold_variant=frozenset(_int(a, "cold_variant") - _int(a, "cold_variant") % 64
                               for a in atk.get("cold_variant", [])),
    )
    return Kernel(
        name=name,
        text=text,
        program=program,
        entry=data["entry"],
        step_limit=_int(data.get("step_limit", 100_000), "step_limit"),
        base=data,
        vectors=list(data.get("vectors", [])),
        warm_lines=_expand_warm(data),
        attack=attack,
    )


def corpus_dir() -> Path:
    return Path(str(resources.files("specharden").joinpath("corpus")))


def load_corpus(directory: str | Path | None = None) -> list[Kernel]:
    """Load every kernel in the directory (bundled corpus by default),
    sorted by name."""
    base = Path(directory) if directory is not None else corpus_dir()
    kernels = []
    for s_path in sorted(base.glob("*.s")):
        json_path = s_path.with_suffix(".json")
        if not json_path.exists():
            raise FileNotFoundError(f"kernel {s_path.name} has no {json_path.name}")
        data = load_state_file(json_path)
        kernels.append(_load_kernel(s_path.stem, s_path.read_text(encoding="utf-8"),
                                    data))
    if not kernels:
        raise FileNotFoundError(f"no corpus kernels found in {base}")
    return kernels
