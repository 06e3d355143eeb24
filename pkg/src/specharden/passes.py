"""
The four hardening rewrites over parsed programs:

  lfence  - serialize every conditional branch edge with an LFENCE
  lahf    - flags -> RAX -> dependency register, double-XOR load masking
  slh     - CMOV-maintained all-ones/zero mask, single-AND load masking
  argdep  - XOR comparison register arguments into the dependency
            register, double-XOR load masking

Branch instrumentation lands on CFG edges: the fall-through edge takes
its sequence directly after the branch, the taken edge takes it at the
target block head when this edge is the target's sole predecessor and
otherwise through a fresh edge-split label (trampoline).  Load masking
goes to the earliest flags-dead point after the load, before any use of
the loaded register; when no such point exists in the block the mask is
wrapped in PUSHFQ/POPFQ and the site is counted as a resolved flags
conflict.

Closed-form insertion counts (both edges, no trampolines or flags
conflicts, single function; B branches, E = 2B edges, L hardened loads):
lfence E; lahf B + 3E + 2L; slh 2 + E + L; argdep (register operands
over all located flag setters) + 2L.  Trampoline jumps and PUSHFQ/POPFQ
wraps are counted in `instructions_inserted` when they occur.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .cfg import Block, Cfg, EdgeKind, FlagsLiveness, ReservedViolation, build_cfg, \
    flags_liveness, verify_reserved
from .isa import (CondCode, Function, Imm, Instruction, Item, LabelDef, LabelRef, Mem,
                  Opcode, Program, Reg, Register, ins, reg)


class PassError(ValueError):
    """The requested rewrite cannot be applied to this input."""


class ReservedRegisterError(PassError):
    """Input already uses a register the pass must reserve."""

    def __init__(self, violations: list[ReservedViolation]):
        self.violations = violations
        head = "; ".join(str(v) for v in violations[:4])
        super().__init__(f"{len(violations)} reserved-register violation(s): {head}")


class PassKind(enum.Enum):
    LFENCE = "lfence"
    LAHF = "lahf"
    SLH = "slh"
    ARGDEP = "argdep"


@dataclass(frozen=True)
class PassConfig:
    kind: PassKind
    dep_register: Reg = Reg.R15
    zero_register: Reg = Reg.R14  # used only by the slh pass
    instrument_both_edges: bool = True
    figure_fidelity: bool = False  # instrument only the taken edge

    def __post_init__(self) -> None:
        if self.dep_register == self.zero_register:
            raise PassError("dependency and zero registers must differ")
        for r in (self.dep_register, self.zero_register):
            if r in (Reg.RAX, Reg.RSP, Reg.RFLAGS):
                raise PassError(f"%{r.value} cannot be reserved")

    def taken_edge_only(self) -> bool:
        return self.figure_fidelity or not self.instrument_both_edges


@dataclass
class PassReport:
    branches_instrumented: int = 0
    loads_instrumented: int = 0
    instructions_inserted: int = 0
    flags_conflicts_resolved: int = 0
    branches_skipped: int = 0  # argdep: flag setter not found in block

    def as_dict(self) -> dict[str, int]:
        return {
            "branches_instrumented": self.branches_instrumented,
            "loads_instrumented": self.loads_instrumented,
            "instructions_inserted": self.instructions_inserted,
            "flags_conflicts_resolved": self.flags_conflicts_resolved,
            "branches_skipped": self.branches_skipped,
        }


# ---------------------------------------------------------------------------
# load selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadSite:
    function: str
    item_index: int
    block_id: int
    offset: int  # index within the block's instruction list
    dest: Reg


def select_hardened_loads(cfg: Cfg) -> list[LoadSite]:
    """Loads (explicit memory source, register destination) reachable from
    a conditional branch; anything before the first branch has nothing to
    speculate past and is excluded."""
    starts: set[int] = set()
    for block in cfg.blocks:
        term = block.terminator()
        if term is not None and term.opcode is Opcode.JCC:
            for e in cfg.successors(block.id):
                starts.add(e.dst)
    reached: set[int] = set()
    work = list(starts)
    while work:
        bid = work.pop()
        if bid in reached:
            continue
        reached.add(bid)
        for e in cfg.successors(bid):
            if e.dst not in reached:
                work.append(e.dst)

    sites: list[LoadSite] = []
    for block in cfg.blocks:
        if block.id not in reached:
            continue
        for offset, (item_idx, instr) in enumerate(block.instrs):
            if instr.is_load():
                dest = instr.dest_register()
                assert dest is not None
                sites.append(LoadSite(block.function, item_idx, block.id, offset, dest))
    return sites


# ---------------------------------------------------------------------------
# rewrite bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class _Rewrite:
    """Accumulated insertions against one function's original item list."""

    before: dict[int, list[Item]] = field(default_factory=dict)
    after: dict[int, list[Item]] = field(default_factory=dict)
    retargeted: dict[int, Instruction] = field(default_factory=dict)
    tail: list[Item] = field(default_factory=list)

    def add_before(self, idx: int, items: list[Item]) -> None:
        self.before.setdefault(idx, []).extend(items)

    def add_after(self, idx: int, items: list[Item]) -> None:
        self.after.setdefault(idx, []).extend(items)

    def inserted_instructions(self) -> int:
        count = 0
        for seqs in (self.before, self.after):
            for items in seqs.values():
                count += sum(isinstance(it, Instruction) for it in items)
        count += sum(isinstance(it, Instruction) for it in self.tail)
        return count

    def apply(self, func: Function) -> Function:
        items: list[Item] = []
        for idx, item in enumerate(func.items):
            items.extend(self.before.get(idx, ()))
            items.append(self.retargeted.get(idx, item))
            items.extend(self.after.get(idx, ()))
        items.extend(self.tail)
        return Function(func.name, items, loc=func.loc)


@dataclass
class _PassContext:
    program: Program
    cfg: Cfg
    live: FlagsLiveness
    config: PassConfig
    report: PassReport
    rewrites: dict[str, _Rewrite]
    _fresh: int = 0

    def rewrite(self, function: str) -> _Rewrite:
        return self.rewrites.setdefault(function, _Rewrite())

    def fresh_label(self) -> str:
        table = self.program.label_table()
        while True:
            name = f".Ledge{self._fresh}"
            self._fresh += 1
            if name not in table:
                return name

    def branch_sites(self) -> list[tuple[Block, int, Instruction]]:
        """(block, item index, branch) for every conditional branch."""
        sites = []
        for block in self.cfg.blocks:
            term = block.terminator()
            if term is not None and term.opcode is Opcode.JCC:
                sites.append((block, block.instrs[-1][0], term))
        return sites

    # -- edge instrumentation --------------------------------------------

    def edge_head_live(self, block: Block, kind: EdgeKind) -> bool:
        for e in self.cfg.successors(block.id):
            if e.kind is kind:
                return self.live.before(e.dst, 0)
        raise PassError("branch block lacks the requested edge")

    def instrument_edge(self, block: Block, branch_idx: int, branch: Instruction,
                        kind: EdgeKind, seq: list[Instruction]) -> None:
        rw = self.rewrite(block.function)
        if kind is EdgeKind.FALLTHROUGH:
            rw.add_after(branch_idx, list(seq))
            return
        target = branch.operands[0]
        assert isinstance(target, LabelRef)
        tb = self.cfg.blocks[self.cfg.block_of_label[target.name]]
        preds = self.cfg.predecessors(tb.id)
        if len(preds) == 1:
            first = tb.first_item_index()
            assert first is not None
            rw.add_before(first, list(seq))
        else:
            # shared join point: split the edge through a trampoline
            tramp = self.fresh_label()
            rw.tail.append(LabelDef(tramp))
            rw.tail.extend(seq)
            rw.tail.append(ins(Opcode.JMP, LabelRef(target.name)))
            rw.retargeted[branch_idx] = replace(branch, operands=(LabelRef(tramp),))


def _require_reserved_free(program: Program, regs: set[Reg]) -> None:
    violations = verify_reserved(program, regs)
    if violations:
        raise ReservedRegisterError(violations)


def _context(program: Program, config: PassConfig) -> _PassContext:
    cfg = build_cfg(program)
    return _PassContext(program, cfg, flags_liveness(cfg), config, PassReport(), {})


def _finish(ctx: _PassContext) -> tuple[Program, PassReport]:
    funcs = []
    for func in ctx.program.functions:
        rw = ctx.rewrites.get(func.name)
        funcs.append(rw.apply(func) if rw else Function(func.name, list(func.items),
                                                        loc=func.loc))
        if rw:
            ctx.report.instructions_inserted += rw.inserted_instructions()
    hardened = Program(funcs, source=ctx.program.source, warnings=[])
    hardened.validate()
    return hardened, ctx.report


# ---------------------------------------------------------------------------
# load masking
# ---------------------------------------------------------------------------

def _mask_sequences(config: PassConfig, dest: Reg) -> list[Instruction]:
    dep = reg(config.dep_register)
    if config.kind is PassKind.SLH:
        return [ins(Opcode.AND, dep, reg(dest), width=64)]
    return [ins(Opcode.XOR, dep, reg(dest), width=64),
            ins(Opcode.XOR, dep, reg(dest), width=64)]


def _place_mask(ctx: _PassContext, site: LoadSite) -> None:
    """Insert the masking sequence at the earliest flags-dead point after
    the load; fall back to a PUSHFQ/POPFQ wrap right after the load."""
    block = ctx.cfg.blocks[site.block_id]
    rw = ctx.rewrite(site.function)
    seq = _mask_sequences(ctx.config, site.dest)
    n = len(block.instrs)
    term = block.terminator()
    end_window = n - 1 if term is not None else n

    def point_insert(p: int, items: list[Instruction]) -> None:
        if p < n:
            rw.add_before(block.instrs[p][0], list(items))
        else:
            rw.add_after(block.instrs[-1][0], list(items))

    for p in range(site.offset + 1, end_window + 1):
        if not ctx.live.before(block.id, p):
            point_insert(p, seq)
            return
        if p < n and site.dest in block.instrs[p][1].regs_mentioned():
            break  # the value is consumed before flags ever die
    wrapped = [ins(Opcode.PUSHF, width=64), *seq, ins(Opcode.POPF, width=64)]
    point_insert(site.offset + 1, wrapped)
    ctx.report.flags_conflicts_resolved += 1


def _harden_loads(ctx: _PassContext) -> None:
    sites = select_hardened_loads(ctx.cfg)
    ctx.report.loads_instrumented = len(sites)
    for site in sites:
        _place_mask(ctx, site)


# ---------------------------------------------------------------------------
# the four passes
# ---------------------------------------------------------------------------

def harden_lfence(program: Program, config: PassConfig) -> tuple[Program, PassReport]:
    """An LFENCE becomes the first instruction of every instrumented edge."""
    ctx = _context(program, config)
    for block, idx, branch in ctx.branch_sites():
        ctx.report.branches_instrumented += 1
        ctx.instrument_edge(block, idx, branch, EdgeKind.TAKEN, [ins(Opcode.LFENCE)])
        if not config.taken_edge_only():
            ctx.instrument_edge(block, idx, branch, EdgeKind.FALLTHROUGH,
                                [ins(Opcode.LFENCE)])
    return _finish(ctx)


def _lahf_edge_seq(ctx: _PassContext, block: Block, kind: EdgeKind) -> list[Instruction]:
    dep = reg(ctx.config.dep_register)
    xor = ins(Opcode.XOR, reg(Reg.RAX), dep, width=64)
    if ctx.edge_head_live(block, kind):
        # the XOR would clobber flags a successor still reads
        ctx.report.flags_conflicts_resolved += 1
        return [ins(Opcode.LAHF), ins(Opcode.PUSHF, width=64), xor,
                ins(Opcode.POPF, width=64), ins(Opcode.POP, reg(Reg.RAX), width=64)]
    return [ins(Opcode.LAHF), xor, ins(Opcode.POP, reg(Reg.RAX), width=64)]


def harden_lahf(program: Program, config: PassConfig) -> tuple[Program, PassReport]:
    """RAX is saved, LAHF captures the branch flags, and the dependency
    register absorbs them; every successor edge restores RAX so the stack
    stays balanced on both paths."""
    _require_reserved_free(program, {config.dep_register})
    ctx = _context(program, config)
    for block, idx, branch in ctx.branch_sites():
        ctx.report.branches_instrumented += 1
        rw = ctx.rewrite(block.function)
        rw.add_before(idx, [ins(Opcode.PUSH, reg(Reg.RAX), width=64)])
        ctx.instrument_edge(block, idx, branch, EdgeKind.TAKEN,
                            _lahf_edge_seq(ctx, block, EdgeKind.TAKEN))
        if config.taken_edge_only():
            # keep the push/pop balanced on the uninstrumented path
            ctx.instrument_edge(block, idx, branch, EdgeKind.FALLTHROUGH,
                                [ins(Opcode.POP, reg(Reg.RAX), width=64)])
        else:
            ctx.instrument_edge(block, idx, branch, EdgeKind.FALLTHROUGH,
                                _lahf_edge_seq(ctx, block, EdgeKind.FALLTHROUGH))
    _harden_loads(ctx)
    return _finish(ctx)


def harden_slh(program: Program, config: PassConfig) -> tuple[Program, PassReport]:
    """Maintain an all-ones/zero mask with conditional moves keyed to each
    branch's condition and AND it into every hardened load destination."""
    _require_reserved_free(program, {config.dep_register, config.zero_register})
    ctx = _context(program, config)
    dep = reg(config.dep_register)
    zero = reg(config.zero_register)
    per_function: dict[str, int] = {}
    for block, idx, branch in ctx.branch_sites():
        per_function[block.function] = per_function.get(block.function, 0) + 1
        ctx.report.branches_instrumented += 1
        assert branch.cc is not None
        ctx.instrument_edge(block, idx, branch, EdgeKind.TAKEN,
                            [ins(Opcode.CMOV, zero, dep, cc=branch.cc.invert(), width=64)])
        if not config.taken_edge_only():
            ctx.instrument_edge(block, idx, branch, EdgeKind.FALLTHROUGH,
                                [ins(Opcode.CMOV, zero, dep, cc=branch.cc, width=64)])
    for func in ctx.program.functions:
        if per_function.get(func.name):
            # mask = all ones, zero source = 0; MOV leaves the flags alone
            ctx.rewrite(func.name).add_before(0, [
                ins(Opcode.MOV, Imm(-1), dep, width=64),
                ins(Opcode.MOV, Imm(0), zero, width=64),
            ])
    _harden_loads(ctx)
    return _finish(ctx)


def harden_argdep(program: Program, config: PassConfig) -> tuple[Program, PassReport]:
    """XOR each register argument of the branch's flag-setting instruction
    into the dependency register, immediately before the flag setter."""
    _require_reserved_free(program, {config.dep_register})
    ctx = _context(program, config)
    dep = reg(config.dep_register)
    for block, _, _branch in ctx.branch_sites():
        setter_offset = None
        for k in range(len(block.instrs) - 2, -1, -1):
            if block.instrs[k][1].writes_flags():
                setter_offset = k
                break
        if setter_offset is None:
            # flags arrive from another block; no insertion recipe applies
            ctx.report.branches_skipped += 1
            continue
        ctx.report.branches_instrumented += 1
        setter_idx, setter = block.instrs[setter_offset]
        assert not ctx.live.before(block.id, setter_offset)
        xors = [ins(Opcode.XOR, reg(op.name), dep, width=64)
                for op in setter.operands if isinstance(op, Register)]
        if xors:
            ctx.rewrite(block.function).add_before(setter_idx, xors)
    _harden_loads(ctx)
    return _finish(ctx)


_PASSES = {
    PassKind.LFENCE: harden_lfence,
    PassKind.LAHF: harden_lahf,
    PassKind.SLH: harden_slh,
    PassKind.ARGDEP: harden_argdep,
}


def harden(program: Program, config: PassConfig) -> tuple[Program, PassReport]:
    return _PASSES[config.kind](program, config)


# ---------------------------------------------------------------------------
# post-pass safety check
# ---------------------------------------------------------------------------

def flags_safety_violations(hardened: Program) -> list[tuple[str, int, Instruction]]:
    """Inserted flags-writing instructions sitting at flags-live points.

    Inserted instructions are recognized by loc=None.  A PUSHFQ/POPFQ wrap
    needs no special casing: the points inside a wrap are flags-dead by
    construction (the POPFQ rewrite kills liveness backwards).
    """
    cfg = build_cfg(hardened)
    live = flags_liveness(cfg)
    bad: list[tuple[str, int, Instruction]] = []
    for block in cfg.blocks:
        for k, (_, instr) in enumerate(block.instrs):
            if instr.loc is None and instr.writes_flags() and live.before(block.id, k):
                bad.append((block.function, block.id, instr))
    return bad
