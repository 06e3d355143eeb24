"""
AT&T-syntax reader and writer for the supported x86-64 subset.

The accepted grammar, one statement per line:

    line    := [label ':'] [instruction] ['#' comment]
    instr   := mnemonic [operand (',' operand)*]
    operand := '$' imm | '%' reg | mem | number | labelref
    mem     := disp? '(' ['%'base] [',' '%'index [',' scale]] ')'

Mnemonics carry an optional b/w/l/q width suffix; a suffixless mnemonic
is accepted only when every register operand agrees on one width.
Conditional jumps and moves are spelled j<cc> / cmov<cc> and take no
width suffix.  `.globl` and `.text` are understood; any other directive
is skipped with a warning and is NOT preserved on output.

The printer emits a canonical form (tab indent, lowercase mnemonics,
explicit width suffixes, labels flush left) that reparses to a
structurally identical program.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .isa import (ALU_OPS, ARITY, CondCode, Function, Imm, Instruction, IsaError, Item,
                  LabelDef, LabelRef, Mem, Opcode, Operand, Program, Reg, Register)

U64 = 1 << 64
I64_MIN = -(1 << 63)


@dataclass(frozen=True)
class SourceSpan:
    """1-based position of a lexeme in the input text."""

    line: int
    column: int
    length: int = 1

    def __post_init__(self) -> None:
        assert self.line >= 1 and self.column >= 1


@dataclass(frozen=True)
class ParseError:
    span: SourceSpan
    message: str
    expected: str = ""

    def __str__(self) -> str:
        tail = f" (expected {self.expected})" if self.expected else ""
        return f"{self.span.line}:{self.span.column}: {self.message}{tail}"


class ParseFailure(ValueError):
    """Raised by parse_asm when the input has one or more syntax errors."""

    def __init__(self, errors: list[ParseError]):
        self.errors = errors
        head = "; ".join(str(e) for e in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} parse error(s): {head}{more}")


# ---------------------------------------------------------------------------
# register name tables
# ---------------------------------------------------------------------------

_R64 = {r.value: r for r in Reg if r is not Reg.RFLAGS}
_R32 = {"eax": Reg.RAX, "ebx": Reg.RBX, "ecx": Reg.RCX, "edx": Reg.RDX,
        "esi": Reg.RSI, "edi": Reg.RDI, "ebp": Reg.RBP, "esp": Reg.RSP}
_R32.update({f"r{i}d": Reg(f"r{i}") for i in range(8, 16)})
_R16 = {"ax": Reg.RAX, "bx": Reg.RBX, "cx": Reg.RCX, "dx": Reg.RDX,
        "si": Reg.RSI, "di": Reg.RDI, "bp": Reg.RBP, "sp": Reg.RSP}
_R16.update({f"r{i}w": Reg(f"r{i}") for i in range(8, 16)})
_R8 = {"al": Reg.RAX, "bl": Reg.RBX, "cl": Reg.RCX, "dl": Reg.RDX,
       "sil": Reg.RSI, "dil": Reg.RDI, "bpl": Reg.RBP, "spl": Reg.RSP}
_R8.update({f"r{i}b": Reg(f"r{i}") for i in range(8, 16)})

_REG_NAMES: dict[str, tuple[Reg, int]] = {}
for _tbl, _w in ((_R64, 64), (_R32, 32), (_R16, 16), (_R8, 8)):
    for _n, _r in _tbl.items():
        _REG_NAMES[_n] = (_r, _w)

_NAME_BY_WIDTH: dict[int, dict[Reg, str]] = {64: {}, 32: {}, 16: {}, 8: {}}
for _n, (_r, _w) in _REG_NAMES.items():
    _NAME_BY_WIDTH[_w][_r] = _n


# ---------------------------------------------------------------------------
# mnemonic tables
# ---------------------------------------------------------------------------

_SUFFIX_WIDTH = {"b": 8, "w": 16, "l": 32, "q": 64}

_WIDTH_BASES = {
    "mov": Opcode.MOV, "lea": Opcode.LEA, "add": Opcode.ADD, "sub": Opcode.SUB,
    "imul": Opcode.IMUL, "xor": Opcode.XOR, "and": Opcode.AND, "or": Opcode.OR,
    "cmp": Opcode.CMP, "test": Opcode.TEST, "push": Opcode.PUSH, "pop": Opcode.POP,
}

_FIXED = {
    "lahf": Opcode.LAHF, "sahf": Opcode.SAHF,
    "pushf": Opcode.PUSHF, "pushfq": Opcode.PUSHF,
    "popf": Opcode.POPF, "popfq": Opcode.POPF,
    "ret": Opcode.RET, "retq": Opcode.RET,
    "jmp": Opcode.JMP, "call": Opcode.CALL, "callq": Opcode.CALL,
    "lfence": Opcode.LFENCE, "nop": Opcode.NOP,
}

_CC_NAMES = {c.value: c for c in CondCode}
_JCC_ALIASES = {"jz": CondCode.E, "jnz": CondCode.NE, "jc": CondCode.B, "jnc": CondCode.AE}


def _decode_mnemonic(name: str) -> tuple[Opcode, CondCode | None, int | None] | None:
    """Return (opcode, cc, width) or None when the mnemonic is unknown."""
    if name in _FIXED:
        return _FIXED[name], None, None
    if name in _JCC_ALIASES:
        return Opcode.JCC, _JCC_ALIASES[name], None
    if name.startswith("cmov") and name[4:] in _CC_NAMES:
        return Opcode.CMOV, _CC_NAMES[name[4:]], None
    if name.startswith("j") and name[1:] in _CC_NAMES:
        return Opcode.JCC, _CC_NAMES[name[1:]], None
    if name in _WIDTH_BASES:
        return _WIDTH_BASES[name], None, None
    base, suffix = name[:-1], name[-1:]
    if base in _WIDTH_BASES and suffix in _SUFFIX_WIDTH:
        return _WIDTH_BASES[base], None, _SUFFIX_WIDTH[suffix]
    return None


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""(?P<ws>[ \t]+)
      | (?P<comment>\#.*)
      | (?P<imm>\$-?(?:0[xX][0-9a-fA-F]+|\d+))
      | (?P<reg>%[A-Za-z][A-Za-z0-9]*)
      | (?P<num>-?(?:0[xX][0-9a-fA-F]+|\d+))
      | (?P<ident>[A-Za-z_.][A-Za-z0-9_.$]*)
      | (?P<colon>:)
      | (?P<comma>,)
      | (?P<lparen>\()
      | (?P<rparen>\))
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    span: SourceSpan


def _lex_line(text: str, lineno: int) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            span = SourceSpan(lineno, pos + 1, 1)
            raise ParseError(span, f"unexpected character {text[pos]!r}", "token")
        kind = m.lastgroup or ""
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), SourceSpan(lineno, pos + 1, len(m.group()))))
        pos = m.end()
    return toks


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _LineParser:
    def __init__(self, toks: list[_Tok], lineno: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> _Tok | None:
        t = self.peek()
        if t is not None:
            self.i += 1
        return t

    def eol_span(self) -> SourceSpan:
        if self.toks:
            last = self.toks[-1].span
            return SourceSpan(self.lineno, last.column + last.length, 1)
        return SourceSpan(self.lineno, 1, 1)

    def fail(self, tok: _Tok | None, message: str, expected: str = "") -> ParseError:
        span = tok.span if tok is not None else self.eol_span()
        return ParseError(span, message, expected)

    def expect(self, kind: str, what: str) -> _Tok:
        t = self.next()
        if t is None or t.kind != kind:
            got = t.text if t is not None else "end of line"
            raise self.fail(t, f"unexpected {got!r}", what)
        return t

    # -- operands ---------------------------------------------------------

    def _number(self, tok: _Tok) -> int:
        value = int(tok.text, 0)
        if value >= U64 or value < I64_MIN:
            raise ParseError(tok.span, f"value {tok.text} out of 64-bit range", "immediate")
        if value >= U64 // 2:
            value -= U64
        return value

    def _register(self, tok: _Tok) -> Register:
        name = tok.text[1:].lower()
        if name not in _REG_NAMES:
            raise ParseError(tok.span, f"unknown register {tok.text!r}", "register")
        r, w = _REG_NAMES[name]
        return Register(r, w)

    def _memory(self, disp: int, disp_tok: _Tok | None) -> Mem:
        lp = self.expect("lparen", "'('")
        base = index = None
        scale = 1
        t = self.peek()
        if t is not None and t.kind == "reg":
            base = self._register(self.next()).name  # type: ignore[arg-type]
        if self.peek() is not None and self.peek().kind == "comma":  # type: ignore[union-attr]
            self.next()
            index = self._register(self.expect("reg", "index register")).name
            if self.peek() is not None and self.peek().kind == "comma":  # type: ignore[union-attr]
                self.next()
                stok = self.expect("num", "scale")
                scale = int(stok.text, 0)
                if scale not in (1, 2, 4, 8):
                    raise ParseError(stok.span, "scale must be 1, 2, 4, or 8", "scale")
        self.expect("rparen", "')'")
        if base is None and index is None and disp == 0:
            where = disp_tok.span if disp_tok else lp.span
            raise ParseError(where, "memory operand needs a base, index, or displacement",
                             "memory operand")
        return Mem(disp=disp, base=base, index=index, scale=scale)

    def operand(self) -> Operand:
        t = self.next()
        if t is None:
            raise self.fail(None, "missing operand", "operand")
        if t.kind == "imm":
            return Imm(self._number(_Tok("num", t.text[1:], t.span)))
        if t.kind == "reg":
            return self._register(t)
        if t.kind == "num":
            disp = self._number(t)
            nxt = self.peek()
            if nxt is not None and nxt.kind == "lparen":
                return self._memory(disp, t)
            if disp == 0:
                raise ParseError(t.span, "absolute address 0 not allowed", "memory operand")
            return Mem(disp=disp)
        if t.kind == "lparen":
            self.i -= 1
            return self._memory(0, None)
        if t.kind == "ident":
            return LabelRef(t.text)
        raise self.fail(t, f"unexpected {t.text!r}", "operand")


def _infer_width(mnemonic_tok: _Tok, opcode: Opcode, width: int | None,
                 operands: tuple[Operand, ...]) -> int | None:
    """Fill in or cross-check the operation width against register operands."""
    if opcode in (Opcode.JCC, Opcode.JMP, Opcode.CALL, Opcode.RET, Opcode.LAHF,
                  Opcode.SAHF, Opcode.LFENCE, Opcode.NOP):
        return None
    if opcode in (Opcode.PUSHF, Opcode.POPF):
        return 64
    reg_widths = {op.width for op in operands if isinstance(op, Register)}
    if len(reg_widths) > 1:
        raise ParseError(mnemonic_tok.span, "register operands disagree on width", "width")
    if width is None and opcode is Opcode.CMOV:
        width = reg_widths.pop() if reg_widths else 64
        reg_widths = set()
    if width is None:
        if not reg_widths:
            raise ParseError(mnemonic_tok.span,
                             f"width suffix required on {mnemonic_tok.text!r}", "width suffix")
        return reg_widths.pop()
    if reg_widths and reg_widths != {width}:
        raise ParseError(mnemonic_tok.span,
                         f"operand width does not match {mnemonic_tok.text!r} suffix", "width")
    return width


def _check_operand_shapes(tok: _Tok, opcode: Opcode, operands: tuple[Operand, ...]) -> None:
    def bad(msg: str) -> ParseError:
        return ParseError(tok.span, msg, "operand")

    if opcode is Opcode.LEA:
        if not (isinstance(operands[0], Mem) and isinstance(operands[1], Register)):
            raise bad("lea takes a memory source and register destination")
    elif opcode is Opcode.MOV:
        src, dst = operands
        if isinstance(dst, Imm) or isinstance(dst, LabelRef) or isinstance(src, LabelRef):
            raise bad("invalid mov operands")
    elif opcode in ALU_OPS or opcode in (Opcode.CMP, Opcode.TEST):
        src, dst = operands
        if isinstance(dst, Imm) or isinstance(src, LabelRef) or isinstance(dst, LabelRef):
            raise bad(f"invalid {opcode.value} operands")
        if opcode is Opcode.IMUL and not isinstance(dst, Register):
            raise bad("imul destination must be a register")
    elif opcode in (Opcode.PUSH, Opcode.POP):
        if not (isinstance(operands[0], Register) and operands[0].width == 64):
            raise bad(f"{opcode.value} takes a 64-bit register")
    elif opcode is Opcode.CMOV:
        if not (isinstance(operands[0], Register) and isinstance(operands[1], Register)):
            raise bad("cmov takes two registers")


def _parse_instruction(lp: _LineParser, mnemonic_tok: _Tok) -> Instruction:
    decoded = _decode_mnemonic(mnemonic_tok.text.lower())
    if decoded is None:
        raise ParseError(mnemonic_tok.span, f"unknown mnemonic {mnemonic_tok.text!r}",
                         "mnemonic")
    opcode, cc, width = decoded
    operands: list[Operand] = []
    if lp.peek() is not None:
        operands.append(lp.operand())
        while lp.peek() is not None:
            lp.expect("comma", "','")
            operands.append(lp.operand())
    if len(operands) != ARITY[opcode]:
        raise ParseError(mnemonic_tok.span,
                         f"{mnemonic_tok.text!r} takes {ARITY[opcode]} operand(s), "
                         f"got {len(operands)}", "operands")
    ops = tuple(operands)
    _check_operand_shapes(mnemonic_tok, opcode, ops)
    width = _infer_width(mnemonic_tok, opcode, width, ops)
    try:
        return Instruction(opcode, ops, cc=cc, width=width, loc=mnemonic_tok.span.line)
    except IsaError as e:
        raise ParseError(mnemonic_tok.span, str(e), "instruction") from None


def _collect_globals(lines: list[str]) -> set[str]:
    names: set[str] = set()
    for line in lines:
        stripped = line.strip()
        if stripped.startswith(".globl") or stripped.startswith(".global"):
            parts = stripped.split()
            if len(parts) >= 2:
                names.add(parts[1].rstrip(","))
    return names


def parse_asm(text: str, source: str = "<memory>") -> Program:
    """Parse AT&T assembly text into a Program.

    Raises ParseFailure carrying every ParseError found; directives other
    than .globl/.text produce warnings on the returned program instead.
    """
    lines = text.splitlines()
    global_names = _collect_globals(lines)
    errors: list[ParseError] = []
    warnings: list[str] = []
    functions: list[Function] = []
    current: Function | None = None
    branch_refs: list[tuple[str, SourceSpan]] = []

    for lineno, raw in enumerate(lines, start=1):
        try:
            toks = _lex_line(raw, lineno)
        except ParseError as e:
            errors.append(e)
            continue
        if not toks:
            continue
        lp = _LineParser(toks, lineno)
        try:
            first = lp.peek()
            assert first is not None
            # directive
            if first.kind == "ident" and first.text.startswith(".") and not (
                    len(toks) >= 2 and toks[1].kind == "colon"):
                name = first.text
                if name not in (".globl", ".global", ".text"):
                    warnings.append(f"{source}:{lineno}: skipped directive {raw.strip()!r}")
                continue
            # label definition (optionally followed by an instruction)
            if first.kind == "ident" and len(toks) >= 2 and toks[1].kind == "colon":
                lp.next(), lp.next()
                label = first.text
                if label in global_names or current is None:
                    current = Function(label, [], loc=lineno)
                    functions.append(current)
                else:
                    current.items.append(LabelDef(label, loc=lineno))
                if lp.peek() is None:
                    continue
                first = lp.peek()
                assert first is not None
            # instruction
            if first.kind != "ident":
                raise lp.fail(first, f"unexpected {first.text!r}", "mnemonic or label")
            if current is None:
                raise lp.fail(first, "instruction before any label", "label")
            mnemonic_tok = lp.next()
            assert mnemonic_tok is not None
            instr = _parse_instruction(lp, mnemonic_tok)
            if instr.opcode in (Opcode.JCC, Opcode.JMP, Opcode.CALL):
                target = instr.operands[0]
                assert isinstance(target, LabelRef)
                branch_refs.append((target.name, mnemonic_tok.span))
            current.items.append(instr)
            if lp.peek() is not None:
                t = lp.peek()
                assert t is not None
                raise lp.fail(t, f"trailing {t.text!r} after instruction", "end of line")
        except ParseError as e:
            errors.append(e)
            continue

    program = Program(functions, source=source, warnings=warnings)
    if not errors:
        try:
            table = program.label_table()
        except Exception as e:  # duplicate labels
            errors.append(ParseError(SourceSpan(max(len(lines), 1), 1), str(e), "label"))
        else:
            for name, span in branch_refs:
                if name not in table:
                    errors.append(ParseError(span, f"unresolved label {name!r}", "label"))
    if errors:
        raise ParseFailure(errors)
    return program


# ---------------------------------------------------------------------------
# printer
# ---------------------------------------------------------------------------

def _format_reg(r: Register) -> str:
    return "%" + _NAME_BY_WIDTH[r.width][r.name]


def _format_mem(m: Mem) -> str:
    if m.base is None and m.index is None:
        return str(m.disp)
    disp = str(m.disp) if m.disp != 0 else ""
    base = f"%{m.base.value}" if m.base is not None else ""
    if m.index is not None:
        return f"{disp}({base},%{m.index.value},{m.scale})"
    return f"{disp}({base})"


def _format_operand(op: Operand) -> str:
    if isinstance(op, Imm):
        return f"${op.value}"
    if isinstance(op, Register):
        return _format_reg(op)
    if isinstance(op, Mem):
        return _format_mem(op)
    return op.name


_SUFFIX_BY_WIDTH = {8: "b", 16: "w", 32: "l", 64: "q"}


def format_instruction(instr: Instruction) -> str:
    op = instr.opcode
    if op is Opcode.JCC:
        assert instr.cc is not None
        mnem = "j" + instr.cc.value
    elif op is Opcode.CMOV:
        assert instr.cc is not None
        mnem = "cmov" + instr.cc.value
    elif op in (Opcode.PUSHF, Opcode.POPF):
        mnem = op.value + "q"
    elif op.value in _WIDTH_BASES:
        assert instr.width is not None
        mnem = op.value + _SUFFIX_BY_WIDTH[instr.width]
    else:
        mnem = op.value
    if not instr.operands:
        return f"\t{mnem}"
    return f"\t{mnem}\t" + ", ".join(_format_operand(o) for o in instr.operands)


def print_asm(program: Program) -> str:
    """Render a program in canonical form; output reparses identically."""
    out: list[str] = ["\t.text"]
    for i, func in enumerate(program.functions):
        if i > 0:
            out.append("")
        out.append(f"\t.globl {func.name}")
        out.append(f"{func.name}:")
        for item in func.items:
            if isinstance(item, LabelDef):
                out.append(f"{item.name}:")
            else:
                out.append(format_instruction(item))
    return "\n".join(out) + "\n"
