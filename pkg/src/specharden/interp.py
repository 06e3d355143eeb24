"""
Architectural (non-speculative) interpreter: the golden semantics for
pass-correctness testing, with data-flow taint tracking.

Taint marks values derived from declared secret memory regions.  It is
tracked per 64-bit register (RFLAGS included) and per 8-byte-aligned
memory word.  Two value-aware refinements keep masking instructions
honest: AND with an architecturally zero operand yields the zero side's
taint (the result carries no information about the other side), and XOR
of a register with itself yields untainted zero.

Memory below the stack pointer is treated as dead: POP, POPF, and RET
remove the bytes they consume from the sparse memory image, so programs
that balance their stack traffic leave no stale stack bytes behind.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .isa import (ALU_OPS, CondCode, Imm, Instruction, Mem, Opcode, Program, Reg,
                  Register, GPRS)

U64 = 1 << 64
WORD = 8


class InterpError(RuntimeError):
    """Architecturally invalid execution (misaligned stack, fell off end)."""


class StepLimitExceeded(InterpError):
    """The configured dynamic instruction budget ran out."""


@dataclass
class Flags:
    sf: bool = False
    zf: bool = False
    cf: bool = False
    of: bool = False
    pf: bool = False
    af: bool = False

    def copy(self) -> "Flags":
        return replace(self)


def cond_eval(cc: CondCode, f: Flags) -> bool:
    if cc is CondCode.E:
        return f.zf
    if cc is CondCode.NE:
        return not f.zf
    if cc is CondCode.L:
        return f.sf != f.of
    if cc is CondCode.GE:
        return f.sf == f.of
    if cc is CondCode.LE:
        return f.zf or f.sf != f.of
    if cc is CondCode.G:
        return not f.zf and f.sf == f.of
    if cc is CondCode.B:
        return f.cf
    if cc is CondCode.AE:
        return not f.cf
    if cc is CondCode.BE:
        return f.cf or f.zf
    if cc is CondCode.A:
        return not f.cf and not f.zf
    if cc is CondCode.S:
        return f.sf
    if cc is CondCode.NS:
        return not f.sf
    if cc is CondCode.O:
        return f.of
    return not f.of  # NO


@dataclass(frozen=True)
class SecretRegion:
    start: int
    length: int

    def covers(self, address: int) -> bool:
        return self.start <= address < self.start + self.length


@dataclass(frozen=True)
class MemEvent:
    """One architectural or speculative memory access."""

    kind: str  # "load" | "store"
    address: int
    width: int  # bits
    addr_taint: bool
    loc: int | None  # source line of the accessing instruction


@dataclass
class MachineState:
    """Registers, flags, sparse byte memory, and per-location taint."""

    gpr: dict[Reg, int] = field(default_factory=lambda: {r: 0 for r in GPRS})
    flags: Flags = field(default_factory=Flags)
    mem: dict[int, int] = field(default_factory=dict)  # byte address -> byte
    reg_taint: dict[Reg, bool] = field(default_factory=lambda: {r: False for r in Reg})
    mem_taint: dict[int, bool] = field(default_factory=dict)  # word address -> taint
    secret_regions: list[SecretRegion] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.gpr.get(Reg.RSP, 0) == 0:
            self.gpr[Reg.RSP] = 0x7FFF_F000

    def clone(self) -> "MachineState":
        return MachineState(
            gpr=dict(self.gpr),
            flags=self.flags.copy(),
            mem=dict(self.mem),
            reg_taint=dict(self.reg_taint),
            mem_taint=dict(self.mem_taint),
            secret_regions=list(self.secret_regions),
        )

    # -- registers --------------------------------------------------------

    def read_reg(self, r: Register) -> int:
        value = self.gpr[r.name]
        if r.width == 64:
            return value
        return value & ((1 << r.width) - 1)

    def write_reg(self, r: Register, value: int) -> None:
        value &= (1 << r.width) - 1
        if r.width >= 32:
            # 32-bit writes zero-extend; 64-bit writes replace.
            self.gpr[r.name] = value
        else:
            keep = self.gpr[r.name] & ~((1 << r.width) - 1)
            self.gpr[r.name] = (keep | value) & (U64 - 1)

    # -- memory -----------------------------------------------------------

    def _in_secret(self, address: int) -> bool:
        return any(s.covers(address) for s in self.secret_regions)

    def word_taint(self, word_addr: int) -> bool:
        if word_addr in self.mem_taint:
            return self.mem_taint[word_addr]
        return self._in_secret(word_addr)

    def load(self, address: int, nbytes: int) -> tuple[int, bool]:
        """Read nbytes little-endian; returns (value, taint)."""
        value = 0
        taint = False
        for i in range(nbytes):
            a = (address + i) & (U64 - 1)
            value |= self.mem.get(a, 0) << (8 * i)
            word = a & ~(WORD - 1)
            if self.word_taint(word) or (a not in self.mem and self._in_secret(a)):
                taint = True
        return value, taint

    def store(self, address: int, nbytes: int, value: int, taint: bool) -> None:
        for i in range(nbytes):
            a = (address + i) & (U64 - 1)
            self.mem[a] = (value >> (8 * i)) & 0xFF
        first_word = address & ~(WORD - 1)
        last_word = (address + nbytes - 1) & ~(WORD - 1)
        for word in range(first_word, last_word + 1, WORD):
            covered = address <= word and word + WORD <= address + nbytes
            if covered:
                self.mem_taint[word] = taint
            else:
                self.mem_taint[word] = taint or self.word_taint(word)

    def erase(self, address: int, nbytes: int) -> None:
        """Drop bytes from the image (used for consumed stack slots)."""
        for i in range(nbytes):
            self.mem.pop((address + i) & (U64 - 1), None)
        first_word = address & ~(WORD - 1)
        last_word = (address + nbytes - 1) & ~(WORD - 1)
        for word in range(first_word, last_word + 1, WORD):
            self.mem_taint.pop(word, None)

    # -- stack ------------------------------------------------------------

    @property
    def rsp(self) -> int:
        return self.gpr[Reg.RSP]

    def check_stack_alignment(self) -> None:
        if self.rsp % 8 != 0:
            raise InterpError(f"stack pointer 0x{self.rsp:x} is not 8-byte aligned")


def effective_address(state: MachineState, mem: Mem) -> tuple[int, bool]:
    """(address, taint of the address computation)."""
    addr = mem.disp
    taint = False
    if mem.base is not None:
        addr += state.gpr[mem.base]
        taint |= state.reg_taint[mem.base]
    if mem.index is not None:
        addr += state.gpr[mem.index] * mem.scale
        taint |= state.reg_taint[mem.index]
    return addr & (U64 - 1), taint


# ---------------------------------------------------------------------------
# flag arithmetic
# ---------------------------------------------------------------------------

def _parity(value: int) -> bool:
    return bin(value & 0xFF).count("1") % 2 == 0


def _set_szp(f: Flags, result: int, width: int) -> None:
    f.sf = bool(result >> (width - 1) & 1)
    f.zf = result == 0
    f.pf = _parity(result)


def _flags_add(f: Flags, a: int, b: int, width: int) -> int:
    mask = (1 << width) - 1
    r = (a + b) & mask
    f.cf = a + b > mask
    f.of = bool((~(a ^ b) & (a ^ r)) >> (width - 1) & 1)
    f.af = bool((a ^ b ^ r) & 0x10)
    _set_szp(f, r, width)
    return r


def _flags_sub(f: Flags, a: int, b: int, width: int) -> int:
    mask = (1 << width) - 1
    r = (a - b) & mask
    f.cf = b > a
    f.of = bool(((a ^ b) & (a ^ r)) >> (width - 1) & 1)
    f.af = bool((a ^ b ^ r) & 0x10)
    _set_szp(f, r, width)
    return r


def _flags_logic(f: Flags, result: int, width: int) -> int:
    f.cf = False
    f.of = False
    f.af = False
    _set_szp(f, result, width)
    return result


def _flags_imul(f: Flags, a: int, b: int, width: int) -> int:
    mask = (1 << width) - 1
    sign = 1 << (width - 1)
    sa = a - (1 << width) if a & sign else a
    sb = b - (1 << width) if b & sign else b
    full = sa * sb
    r = full & mask
    sr = r - (1 << width) if r & sign else r
    f.cf = f.of = full != sr
    f.af = False
    _set_szp(f, r, width)
    return r


def _lahf_byte(f: Flags) -> int:
    return ((f.sf << 7) | (f.zf << 6) | (f.af << 4) | (f.pf << 2) | 0b10 | f.cf)


def _sahf_flags(f: Flags, byte: int) -> None:
    f.sf = bool(byte & 0x80)
    f.zf = bool(byte & 0x40)
    f.af = bool(byte & 0x10)
    f.pf = bool(byte & 0x04)
    f.cf = bool(byte & 0x01)


def _pushf_word(f: Flags) -> int:
    return (f.cf | 0b10 | (f.pf << 2) | (f.af << 4) | (f.zf << 6) | (f.sf << 7)
            | (f.of << 11))


def _popf_flags(f: Flags, word: int) -> None:
    f.cf = bool(word & 1)
    f.pf = bool(word & 0x04)
    f.af = bool(word & 0x10)
    f.zf = bool(word & 0x40)
    f.sf = bool(word & 0x80)
    f.of = bool(word & 0x800)


# ---------------------------------------------------------------------------
# single-instruction semantics (shared with the speculative simulator)
# ---------------------------------------------------------------------------

# control outcomes of one step
NEXT = "next"
JUMP = "jump"
CALL = "call"
RETURN = "ret"


@dataclass
class StepOutcome:
    control: str = NEXT
    target: str | None = None  # label for JUMP/CALL
    events: list[MemEvent] = field(default_factory=list)
    branch_taken: bool | None = None  # set for conditional branches


def _read_operand(state: MachineState, op, width: int) -> tuple[int, bool, MemEvent | None]:
    """(value, taint, load event) for a source operand."""
    if isinstance(op, Imm):
        return op.value & ((1 << width) - 1), False, None
    if isinstance(op, Register):
        return state.read_reg(op), state.reg_taint[op.name], None
    if isinstance(op, Mem):
        addr, addr_taint = effective_address(state, op)
        value, val_taint = state.load(addr, width // 8)
        ev = MemEvent("load", addr, width, addr_taint, None)
        return value, val_taint or addr_taint, ev
    raise InterpError(f"cannot read operand {op!r}")


def _write_operand(state: MachineState, op, width: int, value: int,
                   taint: bool) -> MemEvent | None:
    if isinstance(op, Register):
        state.write_reg(op, value)
        state.reg_taint[op.name] = taint
        return None
    if isinstance(op, Mem):
        addr, addr_taint = effective_address(state, op)
        state.store(addr, width // 8, value, taint)
        return MemEvent("store", addr, width, addr_taint, None)
    raise InterpError(f"cannot write operand {op!r}")


def step(state: MachineState, instr: Instruction) -> StepOutcome:
    """Execute one instruction against `state`.

    CALL/RET report their intent in the outcome; the driver owns the
    return-address stack and the associated memory traffic.
    """
    out = StepOutcome()
    op = instr.opcode
    width = instr.width or 64
    f = state.flags

    def tag(events: list[MemEvent]) -> None:
        out.events.extend(replace(e, loc=instr.loc) for e in events)

    if op is Opcode.NOP or op is Opcode.LFENCE:
        return out

    if op is Opcode.MOV:
        src, dst = instr.operands
        value, taint, ev = _read_operand(state, src, width)
        if ev:
            tag([ev])
        ev = _write_operand(state, dst, width, value, taint)
        if ev:
            tag([ev])
        return out

    if op is Opcode.LEA:
        src, dst = instr.operands
        assert isinstance(src, Mem) and isinstance(dst, Register)
        addr, taint = effective_address(state, src)
        state.write_reg(dst, addr)
        state.reg_taint[dst.name] = taint
        return out

    if op in ALU_OPS:
        src, dst = instr.operands
        a_val, a_taint, ev_r = _read_operand(state, dst, width)
        b_val, b_taint, ev_s = _read_operand(state, src, width)
        if ev_s:
            tag([ev_s])
        if ev_r:
            tag([ev_r])
        if op is Opcode.ADD:
            result = _flags_add(f, a_val, b_val, width)
            taint = a_taint or b_taint
        elif op is Opcode.SUB:
            result = _flags_sub(f, a_val, b_val, width)
            taint = a_taint or b_taint
        elif op is Opcode.IMUL:
            result = _flags_imul(f, a_val, b_val, width)
            taint = a_taint or b_taint
        elif op is Opcode.XOR:
            result = _flags_logic(f, a_val ^ b_val, width)
            if isinstance(src, Register) and isinstance(dst, Register) \
                    and src.name == dst.name:
                taint = False  # x ^ x == 0 regardless of x
            else:
                taint = a_taint or b_taint
        elif op is Opcode.AND:
            result = _flags_logic(f, a_val & b_val, width)
            if b_val == 0:
                taint = b_taint  # result is the zero side's constant
            elif a_val == 0:
                taint = a_taint
            elif b_val == (1 << width) - 1:
                taint = a_taint  # identity mask passes the value through
            else:
                taint = a_taint or b_taint
        else:  # OR
            result = _flags_logic(f, a_val | b_val, width)
            taint = a_taint or b_taint
        state.reg_taint[Reg.RFLAGS] = a_taint or b_taint
        ev = _write_operand(state, dst, width, result, taint)
        if ev:
            tag([ev])
        return out

    if op in (Opcode.CMP, Opcode.TEST):
        src, dst = instr.operands
        a_val, a_taint, ev_r = _read_operand(state, dst, width)
        b_val, b_taint, ev_s = _read_operand(state, src, width)
        if ev_s:
            tag([ev_s])
        if ev_r:
            tag([ev_r])
        if op is Opcode.CMP:
            _flags_sub(f, a_val, b_val, width)
        else:
            _flags_logic(f, a_val & b_val, width)
        state.reg_taint[Reg.RFLAGS] = a_taint or b_taint
        return out

    if op is Opcode.PUSH:
        state.check_stack_alignment()
        r = instr.operands[0]
        assert isinstance(r, Register)
        state.gpr[Reg.RSP] = (state.rsp - 8) & (U64 - 1)
        state.store(state.rsp, 8, state.gpr[r.name], state.reg_taint[r.name])
        tag([MemEvent("store", state.rsp, 64, state.reg_taint[Reg.RSP], None)])
        return out

    if op is Opcode.POP:
        state.check_stack_alignment()
        r = instr.operands[0]
        assert isinstance(r, Register)
        value, taint = state.load(state.rsp, 8)
        tag([MemEvent("load", state.rsp, 64, state.reg_taint[Reg.RSP], None)])
        state.erase(state.rsp, 8)
        state.gpr[r.name] = value
        state.reg_taint[r.name] = taint
        state.gpr[Reg.RSP] = (state.rsp + 8) & (U64 - 1)
        return out

    if op is Opcode.LAHF:
        byte = _lahf_byte(f)
        state.gpr[Reg.RAX] = (state.gpr[Reg.RAX] & ~0xFF00) | (byte << 8)
        state.reg_taint[Reg.RAX] = state.reg_taint[Reg.RAX] or state.reg_taint[Reg.RFLAGS]
        return out

    if op is Opcode.SAHF:
        _sahf_flags(f, (state.gpr[Reg.RAX] >> 8) & 0xFF)
        state.reg_taint[Reg.RFLAGS] = state.reg_taint[Reg.RAX]
        return out

    if op is Opcode.PUSHF:
        state.check_stack_alignment()
        state.gpr[Reg.RSP] = (state.rsp - 8) & (U64 - 1)
        state.store(state.rsp, 8, _pushf_word(f), state.reg_taint[Reg.RFLAGS])
        tag([MemEvent("store", state.rsp, 64, state.reg_taint[Reg.RSP], None)])
        return out

    if op is Opcode.POPF:
        state.check_stack_alignment()
        value, taint = state.load(state.rsp, 8)
        tag([MemEvent("load", state.rsp, 64, state.reg_taint[Reg.RSP], None)])
        state.erase(state.rsp, 8)
        _popf_flags(f, value)
        state.reg_taint[Reg.RFLAGS] = taint
        state.gpr[Reg.RSP] = (state.rsp + 8) & (U64 - 1)
        return out

    if op is Opcode.CMOV:
        src, dst = instr.operands
        assert isinstance(src, Register) and isinstance(dst, Register)
        assert instr.cc is not None
        if cond_eval(instr.cc, f):
            state.write_reg(dst, state.read_reg(src))
        state.reg_taint[dst.name] = (state.reg_taint[dst.name]
                                     or state.reg_taint[src.name]
                                     or state.reg_taint[Reg.RFLAGS])
        return out

    if op is Opcode.JCC:
        assert instr.cc is not None
        taken = cond_eval(instr.cc, f)
        out.branch_taken = taken
        if taken:
            out.control = JUMP
            out.target = instr.operands[0].name  # type: ignore[union-attr]
        return out

    if op is Opcode.JMP:
        out.control = JUMP
        out.target = instr.operands[0].name  # type: ignore[union-attr]
        return out

    if op is Opcode.CALL:
        out.control = CALL
        out.target = instr.operands[0].name  # type: ignore[union-attr]
        return out

    if op is Opcode.RET:
        out.control = RETURN
        return out

    raise InterpError(f"unsupported opcode {op.value!r}")


# ---------------------------------------------------------------------------
# program execution
# ---------------------------------------------------------------------------

@dataclass
class ExecResult:
    final: MachineState
    dynamic_instructions: int
    mem_events: list[MemEvent]


def execute(program: Program, entry: str, init: MachineState,
            step_limit: int = 100_000) -> ExecResult:
    """Run `entry` to its top-level RET under a dynamic instruction budget."""
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    program.validate()
    labels = program.label_table()
    if entry not in labels:
        raise InterpError(f"entry point {entry!r} not found")

    state = init.clone()
    events: list[MemEvent] = []
    call_stack: list[tuple[str, int]] = []
    func_name, idx = labels[entry]
    func = program.function(func_name)
    executed = 0

    while True:
        # skip label definitions
        while idx < len(func.items) and not isinstance(func.items[idx], Instruction):
            idx += 1
        if idx >= len(func.items):
            raise InterpError(f"control fell off the end of function {func.name!r}")
        instr = func.items[idx]
        assert isinstance(instr, Instruction)
        if executed >= step_limit:
            raise StepLimitExceeded(f"step limit {step_limit} exceeded")
        executed += 1

        out = step(state, instr)
        events.extend(out.events)

        if out.control == NEXT:
            idx += 1
        elif out.control == JUMP:
            assert out.target is not None
            func_name, idx = labels[out.target]
            func = program.function(func_name)
        elif out.control == CALL:
            state.check_stack_alignment()
            state.gpr[Reg.RSP] = (state.rsp - 8) & (U64 - 1)
            state.store(state.rsp, 8, 0, False)
            events.append(MemEvent("store", state.rsp, 64,
                                   state.reg_taint[Reg.RSP], instr.loc))
            call_stack.append((func.name, idx + 1))
            assert out.target is not None
            func_name, idx = labels[out.target]
            func = program.function(func_name)
        elif out.control == RETURN:
            if not call_stack:
                break  # top-level return ends execution
            state.check_stack_alignment()
            events.append(MemEvent("load", state.rsp, 64,
                                   state.reg_taint[Reg.RSP], instr.loc))
            state.erase(state.rsp, 8)
            state.gpr[Reg.RSP] = (state.rsp + 8) & (U64 - 1)
            func_name, idx = call_stack.pop()
            func = program.function(func_name)

    return ExecResult(state, executed, events)


def observable(result: ExecResult, exclude: set[Reg]) -> tuple:
    """Projection compared between native and hardened runs: all GPRs except
    the excluded ones, the memory image, and events from source-located
    instructions (pass-inserted code has loc=None)."""
    regs = {r: v for r, v in result.final.gpr.items() if r not in exclude}
    evs = [(e.kind, e.address, e.width) for e in result.mem_events if e.loc is not None]
    return regs, dict(result.final.mem), evs
