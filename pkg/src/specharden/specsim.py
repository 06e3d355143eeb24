"""
Speculative timing simulator: dataflow scheduling with an issue width,
two-level load latencies, adversary-controlled branch prediction,
squash, and a cache-visible access trace with taint-based leak
detection.

Scheduling contract
-------------------
Every dynamic instruction becomes ready when all of its input operands
are ready and issues at the earliest cycle at or after that point with a
free issue slot (at most `issue_width` issues per cycle).  Its result is
ready at issue + latency: `lat_alu` for register operations, the warm or
cold load latency for instructions that read memory (the touched line
joins the warm set on access; squashed loads still install their line -
that is the side channel).  A conditional branch resolves
`branch_resolve_extra` cycles after it issues (it issues once its flags
are ready).  When the policy's prediction disagrees with the actual
direction, fetch follows the wrong path: wrong-path instructions issue
freely until the branch resolves, their trace events are kept and marked
squashed, architectural effects roll back, and fetch redirects to the
correct target no earlier than the resolve cycle.  An LFENCE issues only
once every older instruction (including unresolved branches) has
completed, and nothing younger issues before the LFENCE completes.

Mispredicted branches nest up to `max_spec_depth`; a mispredicting
branch beyond that depth stalls fetch until it resolves instead of
speculating, and `max_spec_depth = 0` therefore disables wrong-path
execution entirely.  In-flight wrong-path fetch is additionally bounded
by a reorder-window of 192 instructions, a Haswell-class buffer size.

`branch_resolve_extra` is security-relevant: the dependency schemes
block a leak only while the masked value chain is longer than the
resolve delay.  The defaults model a prompt squash; raising the knob
lets the trace show when a dependency scheme would lose the race.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .interp import (CALL, JUMP, NEXT, RETURN, InterpError, MachineState, MemEvent,
                     StepLimitExceeded, effective_address, step)
from .isa import ALU_OPS, Instruction, Mem, Opcode, Program, Reg, Register

SPEC_WINDOW = 192  # max in-flight wrong-path instructions

U64 = 1 << 64
LINE = 64


class SimError(RuntimeError):
    """Simulation could not proceed (bad policy coverage, unreached site)."""


@dataclass(frozen=True)
class TimingConfig:
    issue_width: int = 4
    lat_alu: int = 1
    lat_load_warm: int = 4
    lat_load_cold: int = 200
    branch_resolve_extra: int = 1
    max_spec_depth: int = 4
    warm_lines: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.issue_width < 1:
            raise ValueError("issue_width must be >= 1")
        for name in ("lat_alu", "lat_load_warm", "lat_load_cold", "branch_resolve_extra"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_spec_depth < 0:
            raise ValueError("max_spec_depth must be >= 0")

    def lines(self) -> set[int]:
        return {addr - addr % LINE for addr in self.warm_lines}


@dataclass(frozen=True)
class MispredictPolicy:
    """Adversary-controlled branch prediction.

    kind "never" predicts every branch correctly, "always_wrong" forces a
    mispredict at every conditional branch, and "chosen" predicts the
    configured direction (True = taken) per branch site (source line).
    """

    kind: str = "never"
    chosen: tuple[tuple[int, bool], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("never", "always_wrong", "chosen"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def predict(self, site: int | None, actual: bool) -> bool:
        if self.kind == "never":
            return actual
        if self.kind == "always_wrong":
            return not actual
        for loc, direction in self.chosen:
            if loc == site:
                return direction
        raise SimError(f"chosen policy does not cover branch at line {site}")


@dataclass(frozen=True)
class TraceEvent:
    issue_cycle: int
    kind: str  # "load" | "store"
    address: int
    line: int
    speculative: bool
    squashed: bool
    address_taint: bool
    loc: int | None = None
    seq: int = 0

    def as_dict(self) -> dict:
        return {
            "issue_cycle": self.issue_cycle, "kind": self.kind,
            "address": self.address, "line": self.line,
            "speculative": self.speculative, "squashed": self.squashed,
            "address_taint": self.address_taint, "loc": self.loc,
        }


@dataclass
class SpecTrace:
    events: list[TraceEvent] = field(default_factory=list)


@dataclass
class LeakReport:
    leaks: list[TraceEvent] = field(default_factory=list)

    @property
    def leaked(self) -> bool:
        return bool(self.leaks)


@dataclass
class SimMetrics:
    cycles: int
    dynamic_instructions: int

    @property
    def ipc(self) -> float:
        return self.dynamic_instructions / self.cycles if self.cycles else 0.0


@dataclass
class InstrRecord:
    """Debug log entry, one per fetched-and-issued dynamic instruction."""

    seq: int
    loc: int | None
    opcode: str
    issue: int
    complete: int
    committed: bool


@dataclass
class Episode:
    """One misprediction: from wrong-path entry to squash."""

    site: int | None
    resolve: int
    first_issue: int | None = None


@dataclass
class SimResult:
    trace: SpecTrace
    leak: LeakReport
    metrics: SimMetrics
    final: MachineState
    committed_events: list[MemEvent]
    instr_log: list[InstrRecord]
    episodes: list[Episode]


# ---------------------------------------------------------------------------
# per-instruction dataflow shape
# ---------------------------------------------------------------------------

def _input_regs(instr: Instruction) -> tuple[list[Reg], bool]:
    """(registers read, reads flags) - the issue-gating value inputs."""
    regs: list[Reg] = []
    flags = False
    op = instr.opcode

    def operand_regs(o, as_source: bool) -> None:
        if isinstance(o, Register) and as_source:
            regs.append(o.name)
        elif isinstance(o, Mem):
            regs.extend(o.regs())

    if op in (Opcode.MOV, Opcode.LEA):
        src, dst = instr.operands
        operand_regs(src, True)
        operand_regs(dst, False)
        if op is Opcode.MOV and instr.width in (8, 16) and isinstance(dst, Register):
            regs.append(dst.name)  # merge into the wider register
    elif op in ALU_OPS or op in (Opcode.CMP, Opcode.TEST):
        src, dst = instr.operands
        operand_regs(src, True)
        operand_regs(dst, True)
    elif op is Opcode.CMOV:
        src, dst = instr.operands
        operand_regs(src, True)
        operand_regs(dst, True)
        flags = True
    elif op is Opcode.PUSH:
        regs.append(instr.operands[0].name)  # type: ignore[union-attr]
        regs.append(Reg.RSP)
    elif op in (Opcode.POP, Opcode.CALL, Opcode.RET):
        regs.append(Reg.RSP)
    elif op is Opcode.PUSHF:
        regs.append(Reg.RSP)
        flags = True
    elif op is Opcode.POPF:
        regs.append(Reg.RSP)
    elif op is Opcode.LAHF:
        regs.append(Reg.RAX)
        flags = True
    elif op is Opcode.SAHF:
        regs.append(Reg.RAX)
    elif op is Opcode.JCC:
        flags = True
    return regs, flags


def _output_regs(instr: Instruction) -> list[Reg]:
    out: list[Reg] = []
    op = instr.opcode
    dest = instr.dest_register()
    if dest is not None:
        out.append(dest)
    if op is Opcode.LAHF:
        out.append(Reg.RAX)
    if op in (Opcode.PUSH, Opcode.POP, Opcode.PUSHF, Opcode.POPF, Opcode.CALL,
              Opcode.RET):
        out.append(Reg.RSP)
    return out


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------

@dataclass
class _Checkpoint:
    state: MachineState
    reg_ready: dict[Reg, int]
    flags_ready: int
    word_ready: dict[int, int]
    lfence_floor: int
    fetch_floor: int
    max_completion: int
    call_stack: list[tuple[str, int]]
    pc: tuple[str, int]  # correct continuation


class _Simulator:
    def __init__(self, program: Program, init: MachineState, timing: TimingConfig,
                 policy: MispredictPolicy, step_limit: int, entry: str):
        program.validate()
        self.program = program
        self.labels = program.label_table()
        if entry not in self.labels:
            raise SimError(f"entry point {entry!r} not found")
        self.timing = timing
        self.policy = policy
        self.step_limit = step_limit

        self.state = init.clone()
        self.slots: dict[int, int] = {}
        self.reg_ready: dict[Reg, int] = {r: 0 for r in Reg}
        self.flags_ready = 0
        self.word_ready: dict[int, int] = {}
        self.lfence_floor = 0
        self.fetch_floor = 0
        self.max_completion = 0
        self.warm = timing.lines()
        self.call_stack: list[tuple[str, int]] = []

        self.events: list[TraceEvent] = []
        self.committed_events: list[MemEvent] = []
        self.instr_log: list[InstrRecord] = []
        self.episodes: list[Episode] = []
        self.stack: list[tuple[Episode, _Checkpoint]] = []
        self.spec_fetched = 0
        self.committed = 0
        self.seq = 0
        self.last_commit_completion = 0
        self.pc = self.labels[entry]

    # -- scheduling helpers -------------------------------------------------

    def _kill_time(self) -> int | None:
        if not self.stack:
            return None
        return min(ep.resolve for ep, _ in self.stack)

    def _issue_slot(self, min_start: int, kill: int | None) -> int | None:
        width = self.timing.issue_width
        c = min_start
        while self.slots.get(c, 0) >= width:
            c += 1
        if kill is not None and c >= kill:
            return None
        self.slots[c] = self.slots.get(c, 0) + 1
        return c

    def _nothing_can_issue(self, kill: int) -> bool:
        start = max(self.fetch_floor, self.lfence_floor)
        if start >= kill:
            return True
        width = self.timing.issue_width
        return all(self.slots.get(c, 0) >= width for c in range(start, kill))

    def _touch_lines(self, address: int, nbytes: int, install: bool) -> bool:
        """Returns True when every touched line was already warm."""
        first = address - address % LINE
        last = (address + nbytes - 1) - (address + nbytes - 1) % LINE
        warm = True
        for line in range(first, last + LINE, LINE):
            if line not in self.warm:
                warm = False
                if install:
                    self.warm.add(line)
        return warm

    def _memory_access(self, instr: Instruction) -> tuple[str, int, int] | None:
        """(kind, address, nbytes) of the access this instruction will make,
        computed against the current architectural state."""
        op = instr.opcode
        rsp = self.state.rsp
        if op in (Opcode.PUSH, Opcode.PUSHF):
            return "store", (rsp - 8) & (U64 - 1), 8
        if op is Opcode.CALL:
            return "store", (rsp - 8) & (U64 - 1), 8
        if op in (Opcode.POP, Opcode.POPF):
            return "load", rsp, 8
        if op is Opcode.RET:
            if not self.call_stack:
                return None  # top-level return ends execution, no access
            return "load", rsp, 8
        mem = instr.mem_operand()
        if mem is None:
            return None
        addr, _ = effective_address(self.state, mem)
        width = (instr.width or 64) // 8
        kind = "store" if instr.is_store() else "load"
        return kind, addr, width

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimResult:
        program, labels = self.program, self.labels
        func = program.function(self.pc[0])
        idx = self.pc[1]

        while True:
            while idx < len(func.items) and not isinstance(func.items[idx], Instruction):
                idx += 1
            if idx >= len(func.items):
                if self.stack:
                    func, idx = self._squash_and_redirect()
                    continue
                raise InterpError(f"control fell off the end of function {func.name!r}")
            instr = func.items[idx]
            assert isinstance(instr, Instruction)

            in_wrong_path = bool(self.stack)
            if not in_wrong_path:
                if self.committed >= self.step_limit:
                    raise StepLimitExceeded(f"step limit {self.step_limit} exceeded")
                self.committed += 1
            else:
                self.spec_fetched += 1
                if self.spec_fetched > SPEC_WINDOW:
                    func, idx = self._squash_and_redirect()
                    continue

            # ---- timing plane ----
            kill = self._kill_time()
            regs, needs_flags = _input_regs(instr)
            min_start = max(self.fetch_floor, self.lfence_floor)
            for r in regs:
                min_start = max(min_start, self.reg_ready[r])
            if needs_flags:
                min_start = max(min_start, self.flags_ready)
            access = self._memory_access(instr)
            if access is not None and access[0] == "load":
                _, addr, nbytes = access
                for w in range(addr - addr % 8, addr + nbytes, 8):
                    min_start = max(min_start, self.word_ready.get(w, 0))
            if instr.opcode is Opcode.LFENCE:
                min_start = max(min_start, self.max_completion)

            issue = self._issue_slot(min_start, kill)
            latency = self.timing.lat_alu
            if access is not None and issue is not None:
                kind, addr, nbytes = access
                install = kind == "load" or not in_wrong_path
                was_warm = self._touch_lines(addr, nbytes, install)
                if kind == "load":
                    latency = self.timing.lat_load_warm if was_warm \
                        else self.timing.lat_load_cold
            blocked = max(min_start, kill) if kill is not None else min_start
            complete = issue + latency if issue is not None else blocked + latency

            if instr.opcode is Opcode.LFENCE:
                self.lfence_floor = max(self.lfence_floor, complete)

            # ---- value plane ----
            try:
                out = step(self.state, instr)
            except InterpError:
                if in_wrong_path:
                    func, idx = self._squash_and_redirect()
                    continue
                raise

            if issue is not None:
                for ep, _ in self.stack:
                    if ep.first_issue is None:
                        ep.first_issue = issue
                self.instr_log.append(InstrRecord(
                    self.seq, instr.loc, instr.opcode.value, issue, complete,
                    not in_wrong_path))
            self.seq += 1

            # ---- readiness updates ----
            for r in _output_regs(instr):
                ready = complete
                if r is Reg.RSP and instr.opcode in (
                        Opcode.POP, Opcode.POPF, Opcode.RET):
                    # the stack pointer update does not wait for the load
                    ready = (issue if issue is not None else blocked) + self.timing.lat_alu
                self.reg_ready[r] = ready
            if instr.writes_flags():
                self.flags_ready = complete
            if access is not None and access[0] == "store":
                _, saddr, snbytes = access
                for word in range(saddr - saddr % 8, saddr + snbytes, 8):
                    self.word_ready[word] = complete

            resolve = None
            if instr.opcode is Opcode.JCC:
                base = issue if issue is not None else blocked
                resolve = base + self.timing.branch_resolve_extra
                self.max_completion = max(self.max_completion, resolve)
            else:
                self.max_completion = max(self.max_completion, complete)

            # ---- trace events ----
            extra_events = list(out.events)
            if out.control == CALL:
                self.state.check_stack_alignment()
                self.state.gpr[Reg.RSP] = (self.state.rsp - 8) & (U64 - 1)
                self.state.store(self.state.rsp, 8, 0, False)
                extra_events.append(MemEvent("store", self.state.rsp, 64,
                                             self.state.reg_taint[Reg.RSP], instr.loc))
            elif out.control == RETURN and self.call_stack:
                self.state.check_stack_alignment()
                extra_events.append(MemEvent("load", self.state.rsp, 64,
                                             self.state.reg_taint[Reg.RSP], instr.loc))
                self.state.erase(self.state.rsp, 8)
                self.state.gpr[Reg.RSP] = (self.state.rsp + 8) & (U64 - 1)

            if issue is not None:
                for ev in extra_events:
                    self.events.append(TraceEvent(
                        issue, ev.kind, ev.address, ev.address // LINE,
                        speculative=in_wrong_path, squashed=in_wrong_path,
                        address_taint=ev.addr_taint, loc=ev.loc, seq=self.seq))
            if not in_wrong_path:
                self.committed_events.extend(extra_events)
                self.last_commit_completion = max(self.last_commit_completion, complete)

            # ---- control ----
            if instr.opcode is Opcode.JCC:
                assert out.branch_taken is not None and resolve is not None
                func, idx = self._after_branch(instr, func, idx, out.branch_taken,
                                               resolve)
            elif out.control == NEXT:
                idx += 1
            elif out.control == JUMP:
                assert out.target is not None
                fn, idx = labels[out.target]
                func = program.function(fn)
            elif out.control == CALL:
                self.call_stack.append((func.name, idx + 1))
                assert out.target is not None
                fn, idx = labels[out.target]
                func = program.function(fn)
            elif out.control == RETURN:
                if self.call_stack:
                    fn, idx = self.call_stack.pop()
                    func = program.function(fn)
                else:
                    if self.stack:
                        # wrong path ran off the program; wait out the squash
                        func, idx = self._squash_and_redirect()
                        continue
                    break

            if self.stack:
                kill = self._kill_time()
                assert kill is not None
                if self._nothing_can_issue(kill):
                    func, idx = self._squash_and_redirect()

        return self._result()

    # -- branches -------------------------------------------------------------

    def _after_branch(self, instr: Instruction, func, idx: int, taken: bool,
                      resolve: int):
        """Handle prediction for the conditional branch just executed.

        `idx` is the branch's item index; architectural `step` already
        decided `taken`.
        """
        program, labels = self.program, self.labels
        target = instr.operands[0].name  # type: ignore[union-attr]
        taken_pc = labels[target]
        next_pc = (func.name, idx + 1)
        actual_pc = taken_pc if taken else next_pc

        predicted = self.policy.predict(instr.loc, taken)
        if predicted == taken:
            fn, i = actual_pc
            return program.function(fn), i

        if len(self.stack) >= self.timing.max_spec_depth:
            # no speculation capacity: stall fetch until the branch resolves
            self.fetch_floor = max(self.fetch_floor, resolve)
            fn, i = actual_pc
            return program.function(fn), i

        checkpoint = _Checkpoint(
            state=self.state.clone(),
            reg_ready=dict(self.reg_ready),
            flags_ready=self.flags_ready,
            word_ready=dict(self.word_ready),
            lfence_floor=self.lfence_floor,
            fetch_floor=self.fetch_floor,
            max_completion=self.max_completion,
            call_stack=list(self.call_stack),
            pc=actual_pc,
        )
        episode = Episode(site=instr.loc, resolve=resolve)
        self.episodes.append(episode)
        self.stack.append((episode, checkpoint))
        if len(self.stack) == 1:
            self.spec_fetched = 0
        fn, i = taken_pc if predicted else next_pc
        return program.function(fn), i

    def _squash_and_redirect(self):
        """Roll back to the earliest-resolving active episode and resume on
        its correct path."""
        assert self.stack
        k = min(range(len(self.stack)), key=lambda i: self.stack[i][0].resolve)
        episode, checkpoint = self.stack[k]
        del self.stack[k:]
        self.state = checkpoint.state
        self.reg_ready = checkpoint.reg_ready
        self.flags_ready = checkpoint.flags_ready
        self.word_ready = checkpoint.word_ready
        self.lfence_floor = checkpoint.lfence_floor
        self.max_completion = checkpoint.max_completion
        self.call_stack = checkpoint.call_stack
        self.fetch_floor = max(checkpoint.fetch_floor, episode.resolve)
        if not self.stack:
            self.spec_fetched = 0
        fn, idx = checkpoint.pc
        return self.program.function(fn), idx

    # -- results ----------------------------------------------------------

    def _result(self) -> SimResult:
        events = sorted(self.events, key=lambda e: (e.issue_cycle, e.seq))
        trace = SpecTrace(events)
        leak = LeakReport([e for e in events if e.squashed and e.address_taint])
        metrics = SimMetrics(cycles=self.last_commit_completion,
                             dynamic_instructions=self.committed)
        return SimResult(trace, leak, metrics, self.state, self.committed_events,
                         self.instr_log, self.episodes)


def simulate(program: Program, init: MachineState, timing: TimingConfig,
             policy: MispredictPolicy, step_limit: int = 100_000,
             entry: str | None = None) -> SimResult:
    """Run the program speculatively; see the module docstring for the
    scheduling contract.  `step_limit` bounds committed instructions."""
    if entry is None:
        if not program.functions:
            raise SimError("program has no functions")
        entry = program.functions[0].name
    return _Simulator(program, init, timing, policy, step_limit, entry).run()


def speculation_window(program: Program, branch_loc: int, init: MachineState,
                       timing: TimingConfig, policy: MispredictPolicy,
                       step_limit: int = 100_000, entry: str | None = None) -> int:
    """Cycles between the first wrong-path issue after the given branch
    (identified by source line) and that branch's resolution; 0 when
    nothing issued speculatively."""
    result = simulate(program, init, timing, policy, step_limit, entry)
    for ep in result.episodes:
        if ep.site == branch_loc:
            if ep.first_issue is None:
                return 0
            return ep.resolve - ep.first_issue
    fetched = any(rec.loc == branch_loc and rec.opcode == "j"
                  for rec in result.instr_log)
    if fetched:
        raise SimError(f"branch at line {branch_loc} never mispredicts under "
                       f"this policy")
    raise SimError(f"branch at line {branch_loc} was not reached")
