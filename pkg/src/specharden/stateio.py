"""
JSON schemas for initial machine states, timing, and prediction policies.

Initial state (schema 1):

    {
      "schema": 1,
      "registers": {"rdi": "0x1000", "rcx": 7},
      "memory": [
        {"address": "0x1000", "bytes": [1, 2]},
        {"address": "0x2000", "qwords": ["0x29", 3]},
        {"address": "0x3000", "fill": 0, "length": 64}
      ],
      "secret": [{"start": "0x2150", "length": 64}]
    }

The simulator accepts the same file extended with "warm_lines" (list of
addresses, truncated to 64-byte lines), "timing" (TimingConfig fields),
and "policy" ({"kind": "never" | "always_wrong" | "chosen",
"chosen": {"<branch line>": "taken" | "fallthrough"}}).  Integers may be
written as JSON numbers or hex strings throughout.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Any

from .interp import MachineState, SecretRegion
from .isa import Reg
from .specsim import MispredictPolicy, TimingConfig

SCHEMA_VERSION = 1


class StateFileError(ValueError):
    """Malformed initial-state / timing / policy description."""


def _int(value: Any, what: str) -> int:
    if isinstance(value, bool):
        raise StateFileError(f"{what}: expected an integer, got a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            raise StateFileError(f"{what}: cannot parse integer {value!r}") from None
    raise StateFileError(f"{what}: expected an integer, got {type(value).__name__}")


def _check_schema(data: dict, what: str) -> None:
    version = data.get("schema", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise StateFileError(f"{what}: unsupported schema version {version!r}")


def apply_state(state: MachineState, data: dict) -> MachineState:
    """Apply registers/memory/secret entries from `data` onto `state`."""
    for name, value in data.get("registers", {}).items():
        try:
            r = Reg(name.lower())
        except ValueError:
            raise StateFileError(f"unknown register {name!r}") from None
        if r is Reg.RFLAGS:
            raise StateFileError("rflags cannot be set directly")
        state.gpr[r] = _int(value, f"registers.{name}") & ((1 << 64) - 1)
    for i, entry in enumerate(data.get("memory", [])):
        addr = _int(entry.get("address"), f"memory[{i}].address")
        if "bytes" in entry:
            for k, b in enumerate(entry["bytes"]):
                state.store(addr + k, 1, _int(b, "byte") & 0xFF, False)
        elif "qwords" in entry:
            for k, q in enumerate(entry["qwords"]):
                state.store(addr + 8 * k, 8, _int(q, "qword") & ((1 << 64) - 1), False)
        elif "fill" in entry:
            fill = _int(entry["fill"], "fill") & 0xFF
            for k in range(_int(entry.get("length", 0), "length")):
                state.store(addr + k, 1, fill, False)
        else:
            raise StateFileError(f"memory[{i}]: needs bytes, qwords, or fill")
    for i, region in enumerate(data.get("secret", [])):
        state.secret_regions.append(SecretRegion(
            _int(region.get("start"), f"secret[{i}].start"),
            _int(region.get("length"), f"secret[{i}].length")))
    # preloaded contents of a secret region are the secret itself
    for region in state.secret_regions:
        first_word = region.start - region.start % 8
        for word in range(first_word, region.start + region.length, 8):
            if any((word + i) in state.mem for i in range(8)):
                state.mem_taint[word] = True
    return state


def load_state(data: dict) -> MachineState:
    _check_schema(data, "state")
    return apply_state(MachineState(), data)


def load_timing(data: dict | None, warm_lines: list | None = None) -> TimingConfig:
    kwargs: dict[str, Any] = {}
    valid = {f.name for f in fields(TimingConfig)}
    for key, value in (data or {}).items():
        if key == "schema":
            continue
        if key not in valid:
            raise StateFileError(f"timing: unknown field {key!r}")
        if key == "warm_lines":
            kwargs[key] = frozenset(_int(a, "warm_lines") for a in value)
        else:
            kwargs[key] = _int(value, f"timing.{key}")
    if warm_lines is not None:
        extra = frozenset(_int(a, "warm_lines") for a in warm_lines)
        kwargs["warm_lines"] = kwargs.get("warm_lines", frozenset()) | extra
    try:
        return TimingConfig(**kwargs)
    except ValueError as e:
        raise StateFileError(f"timing: {e}") from None


def load_policy(data: dict | str | None) -> MispredictPolicy:
    if data is None:
        return MispredictPolicy("never")
    if isinstance(data, str):
        kind = data.replace("-", "_")
        return MispredictPolicy(kind)
    kind = data.get("kind", "never").replace("-", "_")
    chosen: list[tuple[int, bool]] = []
    for site, direction in data.get("chosen", {}).items():
        if isinstance(direction, str):
            if direction not in ("taken", "fallthrough"):
                raise StateFileError(
                    f"policy.chosen[{site}]: expected 'taken' or 'fallthrough'")
            taken = direction == "taken"
        else:
            taken = bool(direction)
        chosen.append((_int(site, "policy site"), taken))
    try:
        return MispredictPolicy(kind, tuple(chosen))
    except ValueError as e:
        raise StateFileError(f"policy: {e}") from None


def load_state_file(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise StateFileError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise StateFileError(f"{path}: expected a JSON object")
    _check_schema(data, str(path))
    return data


def default_timing_json() -> dict:
    t = TimingConfig()
    return {
        "schema": SCHEMA_VERSION,
        "issue_width": t.issue_width,
        "lat_alu": t.lat_alu,
        "lat_load_warm": t.lat_load_warm,
        "lat_load_cold": t.lat_load_cold,
        "branch_resolve_extra": t.branch_resolve_extra,
        "max_spec_depth": t.max_spec_depth,
        "warm_lines": [],
    }
