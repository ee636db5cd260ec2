"""Desk-scale feasibility checking of non-termination witnesses.

A schema-valid witness decomposes into a lasso: a stem from the entry node to
a cyclehead plus a cycle returning to that cyclehead.  The checker enumerates
concrete values for the program's nondeterministic variables and simulates
the program while tracking the lasso.  The automaton is an observer: a
program step either matches the pending edge (line and control agree, the
assumption holds afterward) and advances it, or the automaton stutters.
Edges whose line holds no executable statement (declarations, braces, blank
lines) are skipped during matching.

Verdicts come in two honesty tiers: ``ProvenInfinite`` requires a repeated
machine state at the cyclehead with no nondeterministic call inside the
repeating segment; ``BoundedEvidence`` reports a configured number of
completed cycles without a proof.  ``Infeasible`` is only claimed when every
enumerated assignment conclusively failed edge consistency.

The authoritative external validator is driven as a child process; its
verdict overrides the internal tiers when configured.
"""

from __future__ import annotations

import re
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from . import cparse
from .cparse import (
    Assign, Block, CType, Decl, EvalUndefined, For, If, NondetAssign, Program,
    Return, UnsupportedConstruct, While, eval_expr, wrap,
)
from .witness import WitnessAutomaton, WitnessEdge


# ---------------------------------------------------------------------------
# Lasso extraction


@dataclass(frozen=True)
class LassoPath:
    stem: tuple[WitnessEdge, ...]
    cycle: tuple[WitnessEdge, ...]
    cyclehead: str


@dataclass(frozen=True)
class NoLasso:
    reason: str


def _lex_dfs_path(edges_from: dict[str, list[WitnessEdge]], start: str,
                  goal: str, allow_empty: bool) -> list[WitnessEdge] | None:
    """Lexicographically smallest (by edge-id sequence) simple path
    start -> goal.  With ``allow_empty`` false a path must use >= 1 edge,
    which makes start == goal a cycle search.  Trying edges in sorted order
    and returning the first completed path yields the lexicographic minimum.
    """
    if start == goal and allow_empty:
        return []

    def dfs(node: str, visited: set[str], path: list[WitnessEdge]) -> bool:
        for edge in edges_from.get(node, ()):
            if edge.target == goal:
                path.append(edge)
                return True
            if edge.target in visited:
                continue
            visited.add(edge.target)
            path.append(edge)
            if dfs(edge.target, visited, path):
                return True
            path.pop()
            visited.discard(edge.target)
        return False

    path: list[WitnessEdge] = []
    if dfs(start, {start}, path):
        return path
    return None


def extract_lasso(w: WitnessAutomaton) -> LassoPath | NoLasso:
    """Decompose a schema-valid witness into stem + simple cycle.

    The first cyclehead (in node input order) is used; among multiple simple
    cycles through it the lexicographically smallest edge-id sequence wins.
    """
    cycleheads = w.cycleheads()
    entries = w.entry_nodes()
    if not cycleheads or not entries:
        return NoLasso("missing entry or cyclehead node")
    edges_from: dict[str, list[WitnessEdge]] = {}
    for edge in w.edges:
        edges_from.setdefault(edge.source, []).append(edge)
    for out in edges_from.values():
        out.sort(key=lambda e: e.id)

    for head in cycleheads:
        cycle = _lex_dfs_path(edges_from, head.id, head.id, allow_empty=False)
        if cycle is None:
            continue
        stem = _lex_dfs_path(edges_from, entries[0].id, head.id, allow_empty=True)
        if stem is None:
            continue
        return LassoPath(tuple(stem), tuple(cycle), head.id)
    return NoLasso("no cycle through any cyclehead")


# ---------------------------------------------------------------------------
# Checker configuration and results


@dataclass(frozen=True)
class CheckerConfig:
    nondet_domain: tuple[int, int] = (-64, 64)
    max_assignments: int = 4096
    max_steps: int = 200_000
    bounded_cycle_target: int = 1000
    stall_steps: int = 2000  # steps without automaton progress before giving up

    def __post_init__(self):
        lo, hi = self.nondet_domain
        if lo > hi:
            raise ValueError("empty nondet domain")
        for name in ("max_assignments", "max_steps", "bounded_cycle_target",
                     "stall_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MachineState:
    location: int  # source line of the cycle-closing statement
    env: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class ProvenInfinite:
    state: MachineState
    assignment: dict[str, int]


@dataclass(frozen=True)
class BoundedEvidence:
    cycles: int
    assignment: dict[str, int]


@dataclass(frozen=True)
class Infeasible:
    edge_id: str


@dataclass(frozen=True)
class Unknown:
    reason: str


FeasibilityResult = ProvenInfinite | BoundedEvidence | Infeasible | Unknown


# ---------------------------------------------------------------------------
# Interpreter: generator of observable step events


class _ProgramExit(Exception):
    pass


@dataclass
class _Event:
    kind: str  # 'cond' | 'assign' | 'nondet' | 'return'
    line: int
    branch: bool | None = None
    stmt_uid: int = 0  # identity of the executing statement, for state keys


class _Simulator:
    """Executes main() with fixed values for each nondet call site."""

    def __init__(self, program: Program, assignment: dict[str, int]):
        self.program = program
        self.assignment = assignment
        self.env: dict[str, int] = {}
        self.types: dict[str, CType] = {}
        for decl in program.globals:
            self.types[decl.name] = decl.ctype
            value = 0
            if decl.init is not None:
                value, _ = eval_expr(decl.init, self.env, self.types)
            self.env[decl.name] = wrap(value, decl.ctype)

    def run(self):
        try:
            yield from self._exec_block(self.program.main.body)
        except _ProgramExit:
            return

    def _truth(self, expr) -> bool:
        value, _ = eval_expr(expr, self.env, self.types)
        return value != 0

    def _exec_block(self, stmts):
        for stmt in stmts:
            yield from self._exec_stmt(stmt)

    def _exec_stmt(self, stmt):
        if isinstance(stmt, Decl):
            self.types[stmt.name] = stmt.ctype
            if stmt.init is not None:
                value, _ = eval_expr(stmt.init, self.env, self.types)
                self.env[stmt.name] = wrap(value, stmt.ctype)
                yield _Event("assign", stmt.line, stmt_uid=id(stmt))
            else:
                self.env.setdefault(stmt.name, 0)
        elif isinstance(stmt, Assign):
            value, _ = eval_expr(stmt.expr, self.env, self.types)
            ctype = self.types.get(stmt.name, cparse.INT)
            self.env[stmt.name] = wrap(value, ctype)
            yield _Event("assign", stmt.line, stmt_uid=id(stmt))
        elif isinstance(stmt, NondetAssign):
            key = _site_key(stmt.name, stmt.line)
            value = self.assignment.get(key, 0)
            ctype = self.types.get(stmt.name, stmt.ctype)
            self.env[stmt.name] = wrap(value, ctype)
            yield _Event("nondet", stmt.line, stmt_uid=id(stmt))
        elif isinstance(stmt, If):
            branch = self._truth(stmt.cond)
            yield _Event("cond", stmt.line, branch, stmt_uid=id(stmt))
            yield from self._exec_block(stmt.then_body if branch else stmt.else_body)
        elif isinstance(stmt, While):
            while True:
                branch = self._truth(stmt.cond)
                yield _Event("cond", stmt.line, branch, stmt_uid=id(stmt))
                if not branch:
                    break
                yield from self._exec_block(stmt.body)
        elif isinstance(stmt, For):
            if stmt.init is not None:
                yield from self._exec_stmt(stmt.init)
            while True:
                branch = self._truth(stmt.cond) if stmt.cond is not None else True
                yield _Event("cond", stmt.line, branch, stmt_uid=id(stmt))
                if not branch:
                    break
                yield from self._exec_block(stmt.body)
                if stmt.step is not None:
                    yield from self._exec_stmt(stmt.step)
        elif isinstance(stmt, Return):
            if stmt.expr is not None:
                eval_expr(stmt.expr, self.env, self.types)
            yield _Event("return", stmt.line, stmt_uid=id(stmt))
            raise _ProgramExit
        elif isinstance(stmt, Block):
            yield from self._exec_block(stmt.stmts)
        else:
            raise TypeError(f"cannot execute {stmt!r}")


def _site_key(name: str, line: int) -> str:
    return f"{name}@{line}"


# ---------------------------------------------------------------------------
# Edge matching


_EXECUTABLE = (Assign, NondetAssign, If, While, For, Return)


def _executable_lines(program: Program) -> set[str | int]:
    lines = set()
    for stmt in cparse.iter_statements(program):
        if isinstance(stmt, _EXECUTABLE) or (
                isinstance(stmt, Decl) and stmt.init is not None):
            lines.add(stmt.line)
    return lines


def _edge_matchable(edge: WitnessEdge, executable_lines: set) -> bool:
    return edge.line is not None and edge.line in executable_lines


def _offer(event: _Event, edge: WitnessEdge) -> bool:
    if event.line != edge.line:
        return False
    if edge.control is None:
        return True
    if event.kind != "cond":
        return False
    return event.branch is (edge.control == "condition-true")


class _AssumptionCache:
    def __init__(self):
        self._cache: dict[str, object] = {}

    def holds(self, edge: WitnessEdge, sim: _Simulator) -> bool:
        if not edge.assumption:
            return True
        expr = self._cache.get(edge.assumption)
        if expr is None:
            try:
                expr = cparse.parse_expression(edge.assumption)
            except cparse.CParseError:
                expr = False  # unparseable assumption can never hold
            self._cache[edge.assumption] = expr
        if expr is False:
            return False
        try:
            value, _ = eval_expr(expr, sim.env, sim.types)
        except (EvalUndefined, KeyError):
            return False
        return value != 0


# per-assignment outcomes
_PROVEN = "proven"
_BOUNDED = "bounded"
_EDGE_FAIL = "edge_fail"     # ended or stalled while an edge was being refused
_BUDGET = "budget"           # stalled or ran out of steps without a refusal
_NO_PROGRESS = "no_progress"


@dataclass
class _RunOutcome:
    kind: str
    edge_id: str | None = None
    cycles: int = 0
    state: MachineState | None = None


class _Periodic(Exception):
    def __init__(self, state: MachineState):
        self.state = state


class _CycleTarget(Exception):
    pass


class _DegenerateCycle(Exception):
    pass


class _PendingTracker:
    """Walks stem + cycle, auto-skipping edges whose line holds nothing
    executable and accounting for completed cycles."""

    def __init__(self, lasso: LassoPath, cfg: CheckerConfig, executable_lines: set):
        self.sequence = list(lasso.stem) + list(lasso.cycle)
        self.stem_len = len(lasso.stem)
        self.cfg = cfg
        self.executable_lines = executable_lines
        self.pos = 0
        self.cycles = 0
        self.accepted_in_cycle = 0
        self.last_accept_line = 0
        self.last_accept_uid = 0
        self.seen_states: dict[tuple, int] = {}
        self._settle(None)

    @property
    def pending(self) -> WitnessEdge:
        return self.sequence[self.pos]

    def nondet_seen(self):
        self.seen_states.clear()  # repetition evidence no longer deterministic

    def accept(self, event: _Event, env: dict[str, int]):
        """Pending edge matched the event; advance past it and any skippable
        successors.  Raises on a proof, target reached, or degenerate cycle."""
        self.accepted_in_cycle += 1
        self.last_accept_line = event.line
        self.last_accept_uid = event.stmt_uid
        self._step(env)
        self._settle(env)

    def _step(self, env):
        self.pos += 1
        if self.pos == len(self.sequence):
            self._complete(env)
            self.pos = self.stem_len

    def _complete(self, env):
        if self.accepted_in_cycle == 0:
            # the entire cycle was skipped: the witness cannot constrain
            # execution, so looping here proves nothing
            raise _DegenerateCycle
        self.cycles += 1
        self.accepted_in_cycle = 0
        snapshot = tuple(sorted(env.items()))
        key = (self.last_accept_uid, snapshot)
        if key in self.seen_states:
            raise _Periodic(MachineState(self.last_accept_line, snapshot))
        self.seen_states[key] = self.cycles
        if self.cycles >= self.cfg.bounded_cycle_target:
            raise _CycleTarget

    def _settle(self, env):
        guard = 0
        while not _edge_matchable(self.pending, self.executable_lines):
            self._step(env if env is not None else {})
            guard += 1
            if guard > len(self.sequence) + 1:
                raise _DegenerateCycle


def _simulate_assignment(program: Program, lasso: LassoPath,
                         assignment: dict[str, int], cfg: CheckerConfig,
                         executable_lines: set,
                         assumptions: _AssumptionCache) -> _RunOutcome:
    sim = _Simulator(program, assignment)
    try:
        tracker = _PendingTracker(lasso, cfg, executable_lines)
    except _DegenerateCycle:
        return _RunOutcome(_NO_PROGRESS)
    except (_Periodic, _CycleTarget):
        return _RunOutcome(_NO_PROGRESS)  # cycle closed before any execution

    steps = 0
    steps_since_advance = 0
    refusals_since_advance = 0
    events = sim.run()

    while True:
        if steps >= cfg.max_steps:
            kind = _EDGE_FAIL if refusals_since_advance else _BUDGET
            return _RunOutcome(kind, tracker.pending.id, tracker.cycles)
        try:
            event = next(events)
        except StopIteration:
            # program terminated while the automaton still expected edges
            return _RunOutcome(_EDGE_FAIL, tracker.pending.id, tracker.cycles)
        except (EvalUndefined, KeyError):
            return _RunOutcome(_BUDGET, tracker.pending.id, tracker.cycles)
        steps += 1
        steps_since_advance += 1

        if event.kind == "nondet":
            tracker.nondet_seen()

        edge = tracker.pending
        if _offer(event, edge):
            if assumptions.holds(edge, sim):
                try:
                    tracker.accept(event, sim.env)
                except _Periodic as proof:
                    return _RunOutcome(_PROVEN, None, tracker.cycles, proof.state)
                except _CycleTarget:
                    return _RunOutcome(_BOUNDED, None, tracker.cycles)
                except _DegenerateCycle:
                    return _RunOutcome(_NO_PROGRESS, None, tracker.cycles)
                steps_since_advance = 0
                refusals_since_advance = 0
            else:
                refusals_since_advance += 1

        if event.kind == "return":
            return _RunOutcome(_EDGE_FAIL, tracker.pending.id, tracker.cycles)
        if steps_since_advance > cfg.stall_steps:
            kind = _EDGE_FAIL if refusals_since_advance else _BUDGET
            return _RunOutcome(kind, tracker.pending.id, tracker.cycles)


def _clamp_domain(ctype: CType, domain: tuple[int, int]) -> range:
    if ctype.name == "bool":
        return range(0, 2)
    lo = max(domain[0], ctype.min)
    hi = min(domain[1], ctype.max)
    if lo > hi:
        lo = hi = ctype.min
    return range(lo, hi + 1)


def check_feasibility(p: Program | UnsupportedConstruct, lasso: LassoPath,
                      cfg: CheckerConfig | None = None) -> FeasibilityResult:
    """Search the nondet domain for an assignment realizing the lasso.

    Assignments fix one value per nondet call site (reused on every
    execution of that site) and are enumerated in ascending order.  Result
    precedence across assignments: ProvenInfinite > BoundedEvidence >
    Infeasible > Unknown, where Infeasible additionally requires that the
    whole domain was enumerated and every assignment failed edge consistency.
    """
    cfg = cfg or CheckerConfig()
    if isinstance(p, UnsupportedConstruct):
        return Unknown(f"unsupported: {p}")
    if not lasso.cycle:
        return Unknown("lasso has no cycle")

    sites = p.nondet_vars
    executable_lines = _executable_lines(p)
    assumptions = _AssumptionCache()

    domains = [_clamp_domain(site.ctype, cfg.nondet_domain) for site in sites]
    total = 1
    for d in domains:
        total *= len(d)
    truncated = total > cfg.max_assignments

    def assignments():
        if not sites:
            yield {}
            return
        count = 0
        indices = [0] * len(sites)
        while True:
            yield {
                _site_key(site.name, site.line): domains[i][indices[i]]
                for i, site in enumerate(sites)
            }
            count += 1
            if count >= cfg.max_assignments:
                return
            k = len(sites) - 1
            while k >= 0:
                indices[k] += 1
                if indices[k] < len(domains[k]):
                    break
                indices[k] = 0
                k -= 1
            if k < 0:
                return

    best_bounded: BoundedEvidence | None = None
    first_failed_edge: str | None = None
    saw_budget = False
    for assignment in assignments():
        outcome = _simulate_assignment(p, lasso, assignment, cfg,
                                       executable_lines, assumptions)
        if outcome.kind == _PROVEN:
            return ProvenInfinite(outcome.state, dict(assignment))
        if outcome.kind == _BOUNDED and best_bounded is None:
            best_bounded = BoundedEvidence(outcome.cycles, dict(assignment))
        elif outcome.kind == _EDGE_FAIL:
            if first_failed_edge is None:
                first_failed_edge = outcome.edge_id
        elif outcome.kind in (_BUDGET, _NO_PROGRESS):
            saw_budget = True

    if best_bounded is not None:
        return BoundedEvidence(best_bounded.cycles, best_bounded.assignment)
    if saw_budget or truncated:
        return Unknown("budget exhausted before a conclusive answer")
    if first_failed_edge is not None:
        return Infeasible(first_failed_edge)
    return Unknown("no nondet assignments produced evidence")


def run_program(program: Program, assignment: dict[str, int],
                max_steps: int = 100_000) -> tuple[str, int]:
    """Unguided simulation for diagnostics and differential testing.

    Returns ("terminated" | "running" | "undefined", steps executed), where
    "running" means the step budget elapsed first.  ``assignment`` maps
    ``name@line`` nondet sites to fixed values.
    """
    sim = _Simulator(program, assignment)
    steps = 0
    try:
        for _ in sim.run():
            steps += 1
            if steps >= max_steps:
                return "running", steps
    except (EvalUndefined, KeyError):
        return "undefined", steps
    return "terminated", steps


# ---------------------------------------------------------------------------
# External validator


class ValidationStatus(Enum):
    VALIDATED = "validated"
    REJECTED = "rejected"
    TOOL_ERROR = "tool-error"


@dataclass(frozen=True)
class ValidatorConfig:
    validator_root: Path
    architecture: str = "32bit"
    property_path: str = "../properties/termination.prp"
    timeout: float = 60.0


@dataclass
class ValidationResult:
    status: ValidationStatus
    output: str = ""

    def __bool__(self) -> bool:
        return self.status is ValidationStatus.VALIDATED


_FALSE_RE = re.compile(r"\bFALSE\b")
_TRUE_RE = re.compile(r"\bTRUE\b")


def run_external_validator(program_path: Path | str, graphml_path: Path | str,
                           cfg: ValidatorConfig) -> ValidationResult:
    """Drive the external witness validator on an emitted GraphML file.

    The tool printing FALSE means a matching infinite path exists (witness
    validated); TRUE means the witness was rejected.  Everything else,
    including timeouts and missing executables, is a tool error.
    """
    executable = Path(cfg.validator_root) / "Ultimate.py"
    cmd = [
        str(executable),
        "--architecture", cfg.architecture,
        "--spec", str(cfg.property_path),
        "--file", str(program_path),
        "--validate", str(graphml_path),
    ]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True,
                              timeout=cfg.timeout)
    except FileNotFoundError:
        return ValidationResult(ValidationStatus.TOOL_ERROR,
                                f"validator executable not found: {executable}")
    except subprocess.TimeoutExpired as exc:
        partial = (exc.stdout or b"")
        if isinstance(partial, bytes):
            partial = partial.decode("utf-8", "replace")
        return ValidationResult(ValidationStatus.TOOL_ERROR,
                                f"timeout after {cfg.timeout}s\n{partial}")
    output = proc.stdout + proc.stderr
    if _FALSE_RE.search(proc.stdout):
        return ValidationResult(ValidationStatus.VALIDATED, output)
    if _TRUE_RE.search(proc.stdout):
        return ValidationResult(ValidationStatus.REJECTED, output)
    return ValidationResult(ValidationStatus.TOOL_ERROR,
                            f"no verdict in output (exit {proc.returncode})\n{output}")
