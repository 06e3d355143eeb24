"""
Typed representation of the supported x86-64 subset.

Registers are modeled at 64-bit granularity: a narrower register name
(eax, ax, al) denotes a view of its full 64-bit register, and writes are
treated as redefining the whole register.  Flags are represented as the
RFLAGS pseudo-register wherever a register set is expected (dataflow,
taint), and as individual SF/ZF/CF/OF/PF/AF bits in the interpreter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Reg(enum.Enum):
    """The 16 general-purpose registers plus the RFLAGS pseudo-register."""

    RAX = "rax"
    RBX = "rbx"
    RCX = "rcx"
    RDX = "rdx"
    RSI = "rsi"
    RDI = "rdi"
    RBP = "rbp"
    RSP = "rsp"
    R8 = "r8"
    R9 = "r9"
    R10 = "r10"
    R11 = "r11"
    R12 = "r12"
    R13 = "r13"
    R14 = "r14"
    R15 = "r15"
    RFLAGS = "rflags"

    def __repr__(self) -> str:
        return f"Reg.{self.name}"


GPRS: tuple[Reg, ...] = tuple(r for r in Reg if r is not Reg.RFLAGS)

VALID_WIDTHS = (8, 16, 32, 64)


@dataclass(frozen=True)
class Register:
    """A register reference at a particular access width."""

    name: Reg
    width: int = 64

    def __post_init__(self) -> None:
        if self.width not in VALID_WIDTHS:
            raise ValueError(f"illegal register width {self.width}")
        if self.name is Reg.RFLAGS and self.width != 64:
            raise ValueError("rflags has no sub-register views")


class CondCode(enum.Enum):
    """Condition codes usable by conditional jumps and moves."""

    E = "e"
    NE = "ne"
    L = "l"
    LE = "le"
    G = "g"
    GE = "ge"
    B = "b"
    BE = "be"
    A = "a"
    AE = "ae"
    S = "s"
    NS = "ns"
    O = "o"
    NO = "no"

    def invert(self) -> "CondCode":
        return _CC_INVERSE[self]


_CC_INVERSE = {
    CondCode.E: CondCode.NE,
    CondCode.NE: CondCode.E,
    CondCode.L: CondCode.GE,
    CondCode.GE: CondCode.L,
    CondCode.LE: CondCode.G,
    CondCode.G: CondCode.LE,
    CondCode.B: CondCode.AE,
    CondCode.AE: CondCode.B,
    CondCode.BE: CondCode.A,
    CondCode.A: CondCode.BE,
    CondCode.S: CondCode.NS,
    CondCode.NS: CondCode.S,
    CondCode.O: CondCode.NO,
    CondCode.NO: CondCode.O,
}


@dataclass(frozen=True)
class Imm:
    """Immediate operand, kept as a signed 64-bit value."""

    value: int


@dataclass(frozen=True)
class Mem:
    """Memory operand: disp(base, index, scale)."""

    disp: int = 0
    base: Reg | None = None
    index: Reg | None = None
    scale: int = 1

    def __post_init__(self) -> None:
        if self.scale not in (1, 2, 4, 8):
            raise ValueError("scale must be 1, 2, 4, or 8")
        if self.index is None and self.scale != 1:
            raise ValueError("scale requires an index register")
        if self.base is None and self.index is None and self.disp == 0:
            raise ValueError("empty memory operand")

    def regs(self) -> tuple[Reg, ...]:
        return tuple(r for r in (self.base, self.index) if r is not None)


@dataclass(frozen=True)
class LabelRef:
    """Branch/call target by label name."""

    name: str


Operand = Imm | Register | Mem | LabelRef


class Opcode(enum.Enum):
    MOV = "mov"
    LEA = "lea"
    ADD = "add"
    SUB = "sub"
    IMUL = "imul"
    XOR = "xor"
    AND = "and"
    OR = "or"
    CMP = "cmp"
    TEST = "test"
    PUSH = "push"
    POP = "pop"
    LAHF = "lahf"
    SAHF = "sahf"
    PUSHF = "pushf"
    POPF = "popf"
    CMOV = "cmov"
    JCC = "j"
    JMP = "jmp"
    CALL = "call"
    RET = "ret"
    LFENCE = "lfence"
    NOP = "nop"


# src, dst two-operand ALU group (AT&T operand order: source first)
ALU_OPS = frozenset({Opcode.ADD, Opcode.SUB, Opcode.IMUL, Opcode.XOR, Opcode.AND, Opcode.OR})

ARITY: dict[Opcode, int] = {
    Opcode.MOV: 2,
    Opcode.LEA: 2,
    Opcode.ADD: 2,
    Opcode.SUB: 2,
    Opcode.IMUL: 2,
    Opcode.XOR: 2,
    Opcode.AND: 2,
    Opcode.OR: 2,
    Opcode.CMP: 2,
    Opcode.TEST: 2,
    Opcode.PUSH: 1,
    Opcode.POP: 1,
    Opcode.LAHF: 0,
    Opcode.SAHF: 0,
    Opcode.PUSHF: 0,
    Opcode.POPF: 0,
    Opcode.CMOV: 2,
    Opcode.JCC: 1,
    Opcode.JMP: 1,
    Opcode.CALL: 1,
    Opcode.RET: 0,
    Opcode.LFENCE: 0,
    Opcode.NOP: 0,
}

WRITES_FLAGS = frozenset(
    {Opcode.ADD, Opcode.SUB, Opcode.IMUL, Opcode.XOR, Opcode.AND, Opcode.OR,
     Opcode.CMP, Opcode.TEST, Opcode.SAHF, Opcode.POPF}
)

READS_FLAGS = frozenset({Opcode.JCC, Opcode.CMOV, Opcode.LAHF, Opcode.PUSHF})

# Control transfers always terminate a basic block.
TERMINATORS = frozenset({Opcode.JCC, Opcode.JMP, Opcode.CALL, Opcode.RET})


class IsaError(ValueError):
    """Malformed instruction (bad arity, operand kinds, or widths)."""


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.

    `width` is the operation width in bits; it is None for instructions
    that have no width dimension (jumps, lahf, lfence, ...).  `loc` is
    the 1-based source line, or None for pass-inserted instructions.
    """

    opcode: Opcode
    operands: tuple[Operand, ...] = ()
    cc: CondCode | None = None
    width: int | None = None
    loc: int | None = None

    def __post_init__(self) -> None:
        expected = ARITY[self.opcode]
        if len(self.operands) != expected:
            raise IsaError(
                f"{self.opcode.value} takes {expected} operand(s), got {len(self.operands)}")
        if (self.cc is None) == (self.opcode in (Opcode.JCC, Opcode.CMOV)):
            raise IsaError(f"condition code mismatch for {self.opcode.value}")
        if sum(isinstance(op, Mem) for op in self.operands) > 1:
            raise IsaError("at most one memory operand per instruction")
        for op in self.operands:
            if isinstance(op, LabelRef) and self.opcode not in TERMINATORS:
                raise IsaError(f"label operand not allowed for {self.opcode.value}")
        if self.opcode in (Opcode.JCC, Opcode.JMP, Opcode.CALL):
            if not isinstance(self.operands[0], LabelRef):
                raise IsaError(f"{self.opcode.value} target must be a label")

    # -- structural helpers used by analyses and passes ------------------

    def is_cond_branch(self) -> bool:
        return self.opcode is Opcode.JCC

    def mem_operand(self) -> Mem | None:
        for op in self.operands:
            if isinstance(op, Mem):
                return op
        return None

    def is_load(self) -> bool:
        """Explicit memory source feeding a register destination."""
        if self.opcode is Opcode.MOV or self.opcode in ALU_OPS or self.opcode is Opcode.CMOV:
            src, dst = self.operands
            return isinstance(src, Mem) and isinstance(dst, Register)
        return False

    def is_store(self) -> bool:
        if self.opcode is Opcode.MOV or self.opcode in ALU_OPS:
            return isinstance(self.operands[1], Mem)
        return False

    def dest_register(self) -> Reg | None:
        if self.opcode in (Opcode.MOV, Opcode.LEA, Opcode.CMOV, Opcode.POP) or \
                self.opcode in ALU_OPS:
            dst = self.operands[-1]
            if isinstance(dst, Register):
                return dst.name
        return None

    def regs_mentioned(self) -> tuple[Reg, ...]:
        """Every register this instruction reads or writes, in operand
        order, implicit ones (RAX for lahf/sahf, RSP for stack ops) last."""
        seen: list[Reg] = []
        for op in self.operands:
            if isinstance(op, Register):
                seen.append(op.name)
            elif isinstance(op, Mem):
                seen.extend(op.regs())
        if self.opcode in (Opcode.LAHF, Opcode.SAHF):
            seen.append(Reg.RAX)
        if self.opcode in (Opcode.PUSH, Opcode.POP, Opcode.PUSHF, Opcode.POPF,
                           Opcode.CALL, Opcode.RET):
            seen.append(Reg.RSP)
        out: list[Reg] = []
        for r in seen:
            if r not in out:
                out.append(r)
        return tuple(out)

    def writes_flags(self) -> bool:
        return self.opcode in WRITES_FLAGS

    def reads_flags(self) -> bool:
        return self.opcode in READS_FLAGS


@dataclass(frozen=True)
class LabelDef:
    """A label definition interleaved with instructions."""

    name: str
    loc: int | None = None


Item = LabelDef | Instruction


@dataclass
class Function:
    """A named entry point with its instruction/label item list."""

    name: str
    items: list[Item]
    loc: int | None = None

    def instructions(self) -> list[Instruction]:
        return [it for it in self.items if isinstance(it, Instruction)]


class ProgramError(ValueError):
    """Structural error in a program (label resolution, duplicates)."""


@dataclass
class Program:
    """An ordered list of functions plus source metadata."""

    functions: list[Function]
    source: str = "<memory>"
    warnings: list[str] = field(default_factory=list)

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise ProgramError(f"no function named {name!r}")

    def label_table(self) -> dict[str, tuple[str, int]]:
        """Map label -> (function name, item index). Function names map to
        item index 0 of their own function."""
        table: dict[str, tuple[str, int]] = {}
        for f in self.functions:
            if f.name in table:
                raise ProgramError(f"duplicate label {f.name!r}")
            table[f.name] = (f.name, 0)
            for i, it in enumerate(f.items):
                if isinstance(it, LabelDef):
                    if it.name in table:
                        raise ProgramError(f"duplicate label {it.name!r}")
                    table[it.name] = (f.name, i)
        return table

    def validate(self) -> None:
        """Check label uniqueness and that every branch target resolves."""
        table = self.label_table()
        for f in self.functions:
            for it in f.items:
                if isinstance(it, Instruction) and it.opcode in (
                        Opcode.JCC, Opcode.JMP, Opcode.CALL):
                    target = it.operands[0]
                    assert isinstance(target, LabelRef)
                    if target.name not in table:
                        raise ProgramError(
                            f"unresolved label {target.name!r} at line {it.loc}")


# -- constructors used heavily by the passes and tests -------------------

def reg(name: Reg, width: int = 64) -> Register:
    return Register(name, width)


def ins(opcode: Opcode, *operands: Operand, cc: CondCode | None = None,
        width: int | None = None, loc: int | None = None) -> Instruction:
    return Instruction(opcode, tuple(operands), cc=cc, width=width, loc=loc)
