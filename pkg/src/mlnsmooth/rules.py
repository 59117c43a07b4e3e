"""Predicates, weighted propositional clauses, the rule DSL and its compiler.

Every formula is one of four clause shapes over a head literal and a body of
literals::

    IMPLIES_ANY   head => b1 | b2 | ...
    IMPLIES_ALL   head => b1 & b2 & ...
    ANY_IMPLIES   b1 | b2 | ... => head
    ALL_IMPLIES   b1 & b2 & ... => head

Each compiles to a single affine row ``a . t + b`` whose sign decides truth:
the clause holds iff ``a . t + b <= 0`` (see :func:`neg_indicator`).
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

#: Activations above this count as strictly positive (clause violated).
NEG_TOL = 1e-9


class RuleError(ValueError):
    """Invalid rule program or rule set."""


class Kind(enum.Enum):
    IMPLIES_ANY = "ImpliesAny"
    IMPLIES_ALL = "ImpliesAll"
    ANY_IMPLIES = "AnyImplies"
    ALL_IMPLIES = "AllImplies"


@dataclass(frozen=True)
class PredicateDecl:
    id: int
    name: str
    group: str | None = None


@dataclass(frozen=True)
class Literal:
    predicate: int
    negated: bool = False

    def negate(self) -> "Literal":
        return Literal(self.predicate, not self.negated)

    def value(self, world) -> bool:
        bit = bool(world[self.predicate])
        return not bit if self.negated else bit


@dataclass(frozen=True)
class Formula:
    kind: Kind
    head: Literal
    body: tuple[Literal, ...]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        object.__setattr__(self, "weight", float(self.weight))
        if not self.body:
            raise RuleError("formula body must be non-empty")
        preds = [lit.predicate for lit in self.body]
        if self.head.predicate in preds:
            raise RuleError("head predicate repeated in body")
        if len(set(preds)) != len(preds):
            raise RuleError("predicate repeated in body")

    @property
    def predicates(self) -> tuple[int, ...]:
        return (self.head.predicate,) + tuple(lit.predicate for lit in self.body)

    def canonical(self) -> "Formula":
        """Single-literal bodies all reduce to ``antecedent => consequent``.

        The four kinds coincide when ``m == 1``; the canonical spelling is
        IMPLIES_ALL with the antecedent as head, which is also how the DSL
        reads ``a => b``.
        """
        if len(self.body) != 1:
            return self
        if self.kind in (Kind.ANY_IMPLIES, Kind.ALL_IMPLIES):
            return Formula(Kind.IMPLIES_ALL, self.body[0], (self.head,), self.weight)
        if self.kind is Kind.IMPLIES_ANY:
            return Formula(Kind.IMPLIES_ALL, self.head, self.body, self.weight)
        return self


@dataclass(frozen=True)
class RuleSet:
    predicates: tuple[PredicateDecl, ...]
    formulas: tuple[Formula, ...] = ()
    groups: tuple[tuple[str, tuple[int, ...]], ...] = field(default=None)

    def __post_init__(self):
        preds = tuple(self.predicates)
        object.__setattr__(self, "predicates", preds)
        object.__setattr__(self, "formulas", tuple(f.canonical() for f in self.formulas))
        names = set()
        for i, p in enumerate(preds):
            if p.id != i:
                raise RuleError(f"predicate {p.name!r} has id {p.id}, expected {i}")
            if p.name in names:
                raise RuleError(f"duplicate predicate name {p.name!r}")
            names.add(p.name)
        derived: dict[str, list[int]] = {}
        for p in preds:
            if p.group is not None:
                derived.setdefault(p.group, []).append(p.id)
        derived_t = tuple((g, tuple(ids)) for g, ids in derived.items())
        if self.groups is not None and tuple(
            (g, tuple(ids)) for g, ids in self.groups
        ) != derived_t:
            raise RuleError("group table inconsistent with predicate declarations")
        # a one-member group is degenerate (its member is always true) but legal
        object.__setattr__(self, "groups", derived_t)
        L = len(preds)
        for f in self.formulas:
            for pid in f.predicates:
                if not 0 <= pid < L:
                    raise RuleError(f"formula references undeclared predicate id {pid}")

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.predicates]

    def index(self, name: str) -> int:
        for p in self.predicates:
            if p.name == name:
                return p.id
        raise KeyError(name)

    @property
    def group_ids(self) -> list[np.ndarray]:
        return [np.asarray(ids, dtype=np.intp) for _, ids in self.groups]

    @property
    def main_group(self) -> int:
        """Index into :attr:`groups` of the group holding predicate 0."""
        for k, (_, ids) in enumerate(self.groups):
            if 0 in ids:
                return k
        raise RuleError("no main group: predicate 0 is not in an exclusion group")

    def with_weights(self, weights: Sequence[float]) -> "RuleSet":
        if len(weights) != len(self.formulas):
            raise RuleError("weight count does not match formula count")
        fs = tuple(
            Formula(f.kind, f.head, f.body, float(w)) for f, w in zip(self.formulas, weights)
        )
        return RuleSet(self.predicates, fs)


# --------------------------------------------------------------------------- DSL

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_PRED_RE = re.compile(rf"^predicate\s+({_NAME})(?:\s+group=({_NAME}))?$")
_RULE_RE = re.compile(r"^rule\s+([^:]+):\s*(.+?)\s*=>\s*(.+)$")
_LIT_RE = re.compile(rf"^(!?)\s*({_NAME})$")


def _split_side(text: str, lineno: int) -> tuple[list[str], str | None]:
    has_or, has_and = "|" in text, "&" in text
    if has_or and has_and:
        raise RuleError(f"line {lineno}: mixed '|' and '&' on one side")
    op = "|" if has_or else "&" if has_and else None
    parts = [s.strip() for s in (text.split(op) if op else [text])]
    return parts, op


def parse_rules(text: str) -> RuleSet:
    """Parse a rule program; declaration order fixes predicate ids."""
    preds: list[PredicateDecl] = []
    by_name: dict[str, int] = {}
    pending: list[tuple[int, str, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("predicate"):
            m = _PRED_RE.match(line)
            if not m:
                raise RuleError(f"line {lineno}: malformed predicate declaration: {raw!r}")
            name, group = m.group(1), m.group(2)
            if name in by_name:
                raise RuleError(f"line {lineno}: duplicate predicate name {name!r}")
            by_name[name] = len(preds)
            preds.append(PredicateDecl(len(preds), name, group))
        elif line.startswith("rule"):
            m = _RULE_RE.match(line)
            if not m:
                raise RuleError(f"line {lineno}: malformed rule: {raw!r}")
            pending.append((lineno, m.group(1).strip(), m.group(2), m.group(3)))
        else:
            raise RuleError(f"line {lineno}: unrecognised statement: {raw!r}")

    def lit(tok: str, lineno: int) -> Literal:
        m = _LIT_RE.match(tok)
        if not m:
            raise RuleError(f"line {lineno}: malformed literal {tok!r}")
        name = m.group(2)
        if name not in by_name:
            raise RuleError(f"line {lineno}: undeclared predicate {name!r}")
        return Literal(by_name[name], bool(m.group(1)))

    formulas = []
    for lineno, wtxt, lhs, rhs in pending:
        try:
            weight = float(wtxt)
        except ValueError:
            raise RuleError(f"line {lineno}: bad weight {wtxt!r}") from None
        lparts, lop = _split_side(lhs, lineno)
        rparts, rop = _split_side(rhs, lineno)
        if any(not p for p in lparts + rparts):
            raise RuleError(f"line {lineno}: empty literal")
        if len(lparts) > 1 and len(rparts) > 1:
            raise RuleError(f"line {lineno}: both sides of '=>' have several literals")
        if len(lparts) == 1:
            head, body = lit(lparts[0], lineno), [lit(p, lineno) for p in rparts]
            kind = Kind.IMPLIES_ANY if rop == "|" else Kind.IMPLIES_ALL
        else:
            head, body = lit(rparts[0], lineno), [lit(p, lineno) for p in lparts]
            kind = Kind.ANY_IMPLIES if lop == "|" else Kind.ALL_IMPLIES
        try:
            formulas.append(Formula(kind, head, tuple(body), weight))
        except RuleError as exc:
            raise RuleError(f"line {lineno}: {exc}") from None
    return RuleSet(tuple(preds), tuple(formulas))


def render_rules(rules: RuleSet) -> str:
    """Inverse of :func:`parse_rules` (weights printed round-trip exact)."""
    names = rules.names
    out = []
    for p in rules.predicates:
        out.append(f"predicate {p.name}" + (f" group={p.group}" if p.group else ""))

    def lit(x: Literal) -> str:
        return ("!" if x.negated else "") + names[x.predicate]

    for f in rules.formulas:
        head = lit(f.head)
        if f.kind in (Kind.IMPLIES_ANY, Kind.IMPLIES_ALL):
            op = " | " if f.kind is Kind.IMPLIES_ANY else " & "
            text = f"{head} => {op.join(lit(b) for b in f.body)}"
        else:
            op = " | " if f.kind is Kind.ANY_IMPLIES else " & "
            text = f"{op.join(lit(b) for b in f.body)} => {head}"
        out.append(f"rule {f.weight!r}: {text}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------- compiler


@dataclass(frozen=True, eq=False)
class CompiledRuleSet:
    """Affine rows ``A t + B`` (one per formula) with formula weights ``w``.

    ``origin[k]`` is the index of the source formula of row ``k`` (or -1 for
    rows built directly with :meth:`from_rows`).
    """

    A: np.ndarray
    B: np.ndarray
    w: np.ndarray
    origin: tuple[int, ...]

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64, ndmin=2)
        B = np.array(self.B, dtype=np.float64).reshape(-1)
        w = np.array(self.w, dtype=np.float64).reshape(-1)
        if A.shape[0] != B.shape[0] or B.shape != w.shape:
            raise RuleError(f"inconsistent shapes A{A.shape} B{B.shape} w{w.shape}")
        for arr in (A, B, w):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "origin", tuple(self.origin))
        # sparse views used by the kernels
        rows, cols = np.nonzero(A)
        indptr = np.searchsorted(rows, np.arange(A.shape[0] + 1)).astype(np.intp)
        order = np.lexsort((rows, cols))
        colptr = np.searchsorted(cols[order], np.arange(A.shape[1] + 1)).astype(np.intp)
        object.__setattr__(self, "_csr", (indptr, cols.astype(np.intp), A[rows, cols].copy()))
        object.__setattr__(
            self, "_csc", (colptr, rows[order].astype(np.intp), A[rows[order], cols[order]].copy())
        )

    @classmethod
    def from_rows(cls, A, B, w) -> "CompiledRuleSet":
        A = np.array(A, dtype=np.float64, ndmin=2)
        return cls(A, B, w, (-1,) * A.shape[0])

    @property
    def n_formulas(self) -> int:
        return self.A.shape[0]

    @property
    def n_predicates(self) -> int:
        return self.A.shape[1]

    def with_weights(self, w) -> "CompiledRuleSet":
        w = np.asarray(w, dtype=np.float64)
        if w.shape != self.w.shape:
            raise RuleError(f"weight vector shape {w.shape} != {self.w.shape}")
        return CompiledRuleSet(self.A, self.B, w, self.origin)

    def members(self, f: int) -> np.ndarray:
        """Predicate ids that appear in row ``f``."""
        indptr, idx, _ = self._csr
        return idx[indptr[f] : indptr[f + 1]]

    def formulas_of(self, i: int) -> np.ndarray:
        """Rows in which predicate ``i`` appears (its Markov blanket)."""
        colptr, rows, _ = self._csc
        return rows[colptr[i] : colptr[i + 1]]


def _row(formula: Formula, L: int) -> tuple[np.ndarray, float]:
    m = len(formula.body)
    coef = np.zeros(L)
    # head coefficient and per-body-literal coefficient, constant, for each kind
    if formula.kind is Kind.IMPLIES_ANY:
        hc, bc, const = 1.0, -1.0, 0.0
    elif formula.kind is Kind.IMPLIES_ALL:
        hc, bc, const = 1.0, -1.0 / m, 0.0
    elif formula.kind is Kind.ANY_IMPLIES:
        hc, bc, const = -1.0, 1.0 / m, 0.0
    else:
        hc, bc, const = -1.0, 1.0, -m + 1.0
    # a negated literal substitutes (1 - t): coefficient flips, constant absorbs it
    for lit, c in [(formula.head, hc)] + [(b, bc) for b in formula.body]:
        if lit.negated:
            coef[lit.predicate] -= c
            const += c
        else:
            coef[lit.predicate] += c
    return coef, const


def compile_rules(rules: RuleSet) -> CompiledRuleSet:
    L, F = rules.n_predicates, len(rules.formulas)
    A = np.zeros((F, L))
    B = np.zeros(F)
    for k, f in enumerate(rules.formulas):
        A[k], B[k] = _row(f, L)
    w = np.array([f.weight for f in rules.formulas], dtype=np.float64)
    return CompiledRuleSet(A, B, w, tuple(range(F)))


def eval_formula_direct(formula: Formula, world) -> bool:
    """Reference truth value by plain boolean semantics."""
    head = formula.head.value(world)
    vals = [b.value(world) for b in formula.body]
    if formula.kind is Kind.IMPLIES_ANY:
        return (not head) or any(vals)
    if formula.kind is Kind.IMPLIES_ALL:
        return (not head) or all(vals)
    if formula.kind is Kind.ANY_IMPLIES:
        return (not any(vals)) or head
    return (not all(vals)) or head


def neg_indicator(v, tol: float = NEG_TOL) -> np.ndarray:
    """Map entries ``> tol`` to 0 and everything else to 1."""
    v = np.asarray(v, dtype=np.float64)
    if np.isnan(v).any():
        raise ValueError("NaN in clause activation")
    return (v <= tol).astype(np.uint8)


def truth_values(compiled: CompiledRuleSet, worlds) -> np.ndarray:
    """Clause truth table, shape ``(S, F)`` for ``S`` worlds (or ``(F,)``)."""
    T = np.asarray(worlds)
    single = T.ndim == 1
    T2 = np.ascontiguousarray(np.atleast_2d(T), dtype=np.uint8)
    if T2.shape[1] != compiled.n_predicates:
        raise ValueError(f"world length {T2.shape[1]} != {compiled.n_predicates}")
    out = kernels.truth_batch(*compiled._csr, compiled.B, T2)
    return out[0] if single else out


def score(compiled: CompiledRuleSet, world, sensor_weights) -> np.ndarray | float:
    """``w . Neg(A t + B) + sensor_weights . t`` for one world or a batch."""
    T = np.asarray(world)
    single = T.ndim == 1
    T2 = np.ascontiguousarray(np.atleast_2d(T), dtype=np.uint8)
    s = np.ascontiguousarray(sensor_weights, dtype=np.float64)
    L = compiled.n_predicates
    if T2.shape[1] != L or s.shape != (L,):
        raise ValueError(
            f"dimension mismatch: world {T2.shape[1]}, sensor weights {s.shape}, L={L}"
        )
    out = kernels.score_batch(*compiled._csr, compiled.B, compiled.w, s, T2)
    return float(out[0]) if single else out


def iter_worlds(L: int) -> Iterable[np.ndarray]:
    """All 2^L binary worlds in lexicographic order (bit 0 most significant)."""
    for k in range(1 << L):
        yield np.array([(k >> (L - 1 - j)) & 1 for j in range(L)], dtype=np.uint8)
