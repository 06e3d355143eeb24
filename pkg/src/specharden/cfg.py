"""
Basic-block control-flow graphs and the analyses shared by all passes:
backward flags liveness and reserved-register verification.

CALL and RET terminate blocks but carry no interprocedural edges; a CALL
block keeps its fall-through edge (the return point), a RET block has no
successors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .isa import Instruction, LabelDef, Opcode, Program, Reg


class CfgError(ValueError):
    """Structurally invalid control flow (unresolved label, fall-off-end)."""


class EdgeKind(enum.Enum):
    TAKEN = "taken"
    FALLTHROUGH = "fallthrough"
    UNCONDITIONAL = "unconditional"


@dataclass
class Block:
    """Maximal straight-line run; a branch may appear only as last instruction."""

    id: int
    function: str
    labels: tuple[str, ...]
    instrs: list[tuple[int, Instruction]]  # (item index in function, instruction)

    def terminator(self) -> Instruction | None:
        if self.instrs and self.instrs[-1][1].opcode in (
                Opcode.JCC, Opcode.JMP, Opcode.CALL, Opcode.RET):
            return self.instrs[-1][1]
        return None

    def first_item_index(self) -> int | None:
        return self.instrs[0][0] if self.instrs else None


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: EdgeKind


@dataclass
class Cfg:
    blocks: list[Block]
    edges: list[Edge]
    entries: dict[str, int]  # function name -> entry block id
    block_of_label: dict[str, int] = field(default_factory=dict)

    def successors(self, block_id: int) -> list[Edge]:
        return [e for e in self.edges if e.src == block_id]

    def predecessors(self, block_id: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == block_id]

    def function_blocks(self, name: str) -> list[Block]:
        return [b for b in self.blocks if b.function == name]


def build_cfg(program: Program) -> Cfg:
    """Partition each function into basic blocks and connect branch edges.

    Raises CfgError for unresolved labels or control that can run off the
    end of a function.
    """
    program.validate()

    blocks: list[Block] = []
    entries: dict[str, int] = {}
    block_of_label: dict[str, int] = {}
    # label -> block id is resolved after all blocks exist
    layout: dict[str, list[int]] = {}

    for func in program.functions:
        func_block_ids: list[int] = []
        head_labels: list[str] = [func.name]  # labels naming the block being built
        current: list[tuple[int, Instruction]] = []

        def flush(labels: list[str], instrs: list[tuple[int, Instruction]]) -> None:
            b = Block(len(blocks), func.name, tuple(labels), instrs)
            blocks.append(b)
            func_block_ids.append(b.id)
            for lbl in labels:
                block_of_label[lbl] = b.id

        for idx, item in enumerate(func.items):
            if isinstance(item, LabelDef):
                if current:
                    flush(head_labels, current)
                    head_labels, current = [], []
                head_labels.append(item.name)
                continue
            current.append((idx, item))
            if item.opcode in (Opcode.JCC, Opcode.JMP, Opcode.CALL, Opcode.RET):
                flush(head_labels, current)
                head_labels, current = [], []
        if current or head_labels:
            flush(head_labels, current)
        if func_block_ids:
            entries[func.name] = func_block_ids[0]
        layout[func.name] = func_block_ids

    edges: list[Edge] = []
    for func in program.functions:
        ids = layout[func.name]
        for pos, bid in enumerate(ids):
            block = blocks[bid]
            next_id = ids[pos + 1] if pos + 1 < len(ids) else None
            term = block.terminator()

            def fallthrough_or_fail(what: str) -> int:
                if next_id is None:
                    raise CfgError(
                        f"control falls off the end of function {func.name!r} ({what})")
                return next_id

            if term is None:
                if not block.instrs and next_id is None and len(ids) == 1:
                    raise CfgError(f"function {func.name!r} is empty")
                edges.append(Edge(bid, fallthrough_or_fail("missing terminator"),
                                  EdgeKind.FALLTHROUGH))
            elif term.opcode is Opcode.RET:
                pass
            elif term.opcode is Opcode.JMP:
                target = term.operands[0].name  # type: ignore[union-attr]
                edges.append(Edge(bid, block_of_label[target], EdgeKind.UNCONDITIONAL))
            elif term.opcode is Opcode.CALL:
                edges.append(Edge(bid, fallthrough_or_fail("call needs a return point"),
                                  EdgeKind.FALLTHROUGH))
            else:  # conditional branch
                target = term.operands[0].name  # type: ignore[union-attr]
                edges.append(Edge(bid, block_of_label[target], EdgeKind.TAKEN))
                edges.append(Edge(bid, fallthrough_or_fail("conditional fallthrough"),
                                  EdgeKind.FALLTHROUGH))

    return Cfg(blocks, edges, entries, block_of_label)


# ---------------------------------------------------------------------------
# flags liveness
# ---------------------------------------------------------------------------

def _reads_flags_conservative(instr: Instruction) -> bool:
    # CALL may reach a flags reader in the callee before any writer; the
    # analysis stays intraprocedural, so treat the call itself as a reader.
    return instr.reads_flags() or instr.opcode is Opcode.CALL


class FlagsLiveness:
    """Per-program-point liveness of the arithmetic flags.

    Point k of a block is the point immediately before its k-th
    instruction; point len(instrs) is the block's exit.
    """

    def __init__(self, cfg: Cfg):
        self.cfg = cfg
        self._points: dict[int, list[bool]] = {}
        self._compute()

    def _compute(self) -> None:
        cfg = self.cfg
        live_in: dict[int, bool] = {b.id: False for b in cfg.blocks}
        changed = True
        while changed:
            changed = False
            for block in reversed(cfg.blocks):
                live = any(live_in[e.dst] for e in cfg.successors(block.id))
                for _, instr in reversed(block.instrs):
                    if _reads_flags_conservative(instr):
                        live = True
                    elif instr.writes_flags():
                        live = False
                if live != live_in[block.id]:
                    live_in[block.id] = live
                    changed = True
        for block in cfg.blocks:
            pts = [False] * (len(block.instrs) + 1)
            live = any(live_in[e.dst] for e in cfg.successors(block.id))
            pts[len(block.instrs)] = live
            for k in range(len(block.instrs) - 1, -1, -1):
                instr = block.instrs[k][1]
                if _reads_flags_conservative(instr):
                    live = True
                elif instr.writes_flags():
                    live = False
                pts[k] = live
            self._points[block.id] = pts

    def before(self, block_id: int, k: int) -> bool:
        """Liveness at the point before instruction k (k = len: block exit)."""
        return self._points[block_id][k]

    def live_out(self, block_id: int) -> bool:
        return self._points[block_id][-1]


def flags_liveness(cfg: Cfg) -> FlagsLiveness:
    return FlagsLiveness(cfg)


# ---------------------------------------------------------------------------
# reserved-register verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReservedViolation:
    function: str
    loc: int | None
    instruction: Instruction
    register: Reg

    def __str__(self) -> str:
        where = f"line {self.loc}" if self.loc is not None else "inserted code"
        return f"{self.function}: {where}: uses reserved register %{self.register.value}"


def verify_reserved(program: Program, reserved: set[Reg]) -> list[ReservedViolation]:
    """Every (instruction, register) pair where the program touches a
    reserved register, in source order. Implicit uses (RAX for lahf/sahf,
    RSP for stack ops) count."""
    violations: list[ReservedViolation] = []
    for func in program.functions:
        for instr in func.instructions():
            for r in instr.regs_mentioned():
                if r in reserved:
                    violations.append(ReservedViolation(func.name, instr.loc, instr, r))
    return violations
