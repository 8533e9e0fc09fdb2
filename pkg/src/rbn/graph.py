"""Likelihood graph: a shared computation DAG over model and data.

`build_graph` grounds every observed probabilistic atom's formula into a DAG
whose leaves are model parameters, learnable numeric input atoms, and 0/1
indicators for unobserved atoms.  Ground subformulas with a fixed value are
folded into their parents; identical ground subformulas are shared through
hash-consing.  The root aggregates, per distinct probability node, how many
observations were true and false, so the log-likelihood and its gradient with
respect to every leaf come out of one forward and one reverse sweep, each
touching every edge a constant number of times.

Observation handling per sample:

* atoms observed true/false contribute ordinary likelihood factors;
* atoms explicitly marked unknown get an indicator leaf plus their own
  factor evaluated at the indicator's current 0/1 setting;
* absent atoms contribute nothing, unless some included atom's formula
  refers to them, in which case they are promoted to indicator atoms.

Evaluation state lives in `EvalBuffer` objects so that several fitting
restarts can share one immutable graph.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import UNKNOWN, DataSet
from .errors import DataError, GraphError, ModelError, NumericalError
from .formula import (
    BOOLEAN_INPUT,
    NUMERIC_INPUT,
    PROBABILISTIC,
    Atom,
    Combine,
    Constant,
    EvalContext,
    Guard,
    GuardAtom,
    Minus,
    Model,
    Param,
    Plus,
    Times,
    VarTest,
    Wif,
    evaluate_probability,
    logistic,
)

PROB_EPS = 1e-12  # factor probabilities are clamped to [eps, 1-eps] before log

_LEAF_KINDS = ("param", "numeric", "indicator")
_CONSTANT_KINDS = ("pool", "const")


def _clip01(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class GraphNode:
    """Build-time record of one slot; kept for stats, DOT export, and the
    scalar (incremental) evaluation path."""

    slot: int
    op: str  # pool|const|param|numeric|indicator|add|sum|mul|wif|lreg|mean|noisyor
    children: tuple[int, ...] = ()
    coeffs: tuple[float, ...] | None = None  # add/sum only
    const: float = 0.0  # additive term; multiplicative factor for mul/noisyor
    n: int = 0  # multiset size for mean
    key: object = None  # leaf identity for leaves


@dataclass
class _OpGroup:
    """One vectorised execution step: all nodes of one op at one DAG level."""

    op: str
    out: np.ndarray  # slots computed by this group
    child_idx: np.ndarray  # flat children (segmented), or (n, 3) matrix for wif
    seg_starts: np.ndarray | None = None
    seg_lens: np.ndarray | None = None
    coeffs: np.ndarray | None = None
    const: np.ndarray | None = None
    n: np.ndarray | None = None


class LikelihoodGraph:
    """Immutable compiled graph; create `EvalBuffer`s to evaluate it."""

    def __init__(self, builder: "_Builder"):
        self.model = builder.model
        self.dataset = builder.dataset
        self.folded = builder.fold
        self.n_slots = len(builder.kinds)
        self.kinds: list[str] = builder.kinds
        self.nodes: dict[int, GraphNode] = builder.nodes

        self.params: dict[str, int] = builder.params
        self.numerics: dict[tuple[str, tuple[int, ...]], int] = builder.numerics
        self.indicators: dict[tuple[int, str, tuple[int, ...]], int] = builder.indicators

        # fixed slot values (pool constants and const nodes)
        self._fixed_slots = np.array(
            [s for s in range(self.n_slots) if self.kinds[s] in _CONSTANT_KINDS], dtype=np.int64
        )
        self._fixed_values = np.array(
            [builder.values[s] for s in self._fixed_slots], dtype=float
        )

        # factor tables
        self.a_idx = np.array(sorted(builder.factors_a), dtype=np.int64)
        self.a_ntrue = np.array(
            [builder.factors_a[s][0] for s in self.a_idx], dtype=float
        )
        self.a_nfalse = np.array(
            [builder.factors_a[s][1] for s in self.a_idx], dtype=float
        )
        self.b_prob_idx = np.array([f[0] for f in builder.factors_b], dtype=np.int64)
        self.b_g_idx = np.array([f[1] for f in builder.factors_b], dtype=np.int64)
        self.b_atoms = [f[2] for f in builder.factors_b]
        self.const_ll = builder.const_ll
        self.a_occurrences = builder.a_occurrences

        self._build_plan()
        self._build_leaf_vectors(builder)
        self._build_parents()
        self._factor_slot_set = set(self.a_idx.tolist()) | set(self.b_prob_idx.tolist())

        # rows of the factor tables touched by each slot (for incremental LL)
        self._a_rows_by_slot: dict[int, list[int]] = {}
        for row, s in enumerate(self.a_idx.tolist()):
            self._a_rows_by_slot.setdefault(s, []).append(row)
        self._b_rows_by_slot: dict[int, list[int]] = {}
        for row in range(len(self.b_prob_idx)):
            self._b_rows_by_slot.setdefault(int(self.b_prob_idx[row]), []).append(row)
            self._b_rows_by_slot.setdefault(int(self.b_g_idx[row]), []).append(row)

    # -- construction helpers -------------------------------------------------

    def _build_plan(self) -> None:
        level = [0] * self.n_slots
        for slot in range(self.n_slots):
            node = self.nodes.get(slot)
            if node is not None and node.children:
                level[slot] = 1 + max(level[c] for c in node.children)
        buckets: dict[tuple[int, str], list[GraphNode]] = {}
        for slot in range(self.n_slots):
            node = self.nodes.get(slot)
            if node is None or self.kinds[slot] in _CONSTANT_KINDS + _LEAF_KINDS:
                continue
            op = "add" if node.op == "sum" else node.op
            buckets.setdefault((level[slot], op), []).append(node)

        groups = []
        for (lvl, op), nodes in sorted(buckets.items(), key=lambda kv: kv[0]):
            out = np.array([n.slot for n in nodes], dtype=np.int64)
            if op == "wif":
                cm = np.array([n.children for n in nodes], dtype=np.int64)
                groups.append(_OpGroup(op, out, cm))
                continue
            if op == "mul":
                # binary Times only: split by arity for exact reverse products
                for arity in (1, 2):
                    sub = [n for n in nodes if len(n.children) == arity]
                    if not sub:
                        continue
                    cm = np.array([n.children for n in sub], dtype=np.int64)
                    groups.append(
                        _OpGroup(
                            "mul",
                            np.array([n.slot for n in sub], dtype=np.int64),
                            cm,
                            const=np.array([n.const for n in sub], dtype=float),
                        )
                    )
                continue
            lens = np.array([len(n.children) for n in nodes], dtype=np.int64)
            starts = np.zeros(len(nodes), dtype=np.int64)
            np.cumsum(lens[:-1], out=starts[1:])
            flat = np.array(
                [c for n in nodes for c in n.children], dtype=np.int64
            )
            grp = _OpGroup(
                op,
                out,
                flat,
                seg_starts=starts,
                seg_lens=lens,
                const=np.array([n.const for n in nodes], dtype=float),
            )
            if op == "add":
                grp.coeffs = np.array(
                    [c for n in nodes for c in (n.coeffs or (1.0,) * len(n.children))],
                    dtype=float,
                )
            if op == "mean":
                grp.n = np.array([n.n for n in nodes], dtype=float)
            groups.append(grp)
        self.plan: list[_OpGroup] = groups
        self.n_edges = sum(
            (g.child_idx.size for g in groups), 0
        ) + len(self.a_idx) + 2 * len(self.b_prob_idx)

    def _build_leaf_vectors(self, builder) -> None:
        keys: list[tuple] = []
        slots: list[int] = []
        lo: list[float] = []
        hi: list[float] = []
        for name, slot in self.params.items():
            decl = self.model.parameters[name]
            keys.append(("param", name))
            slots.append(slot)
            lo.append(decl.lo)
            hi.append(decl.hi)
        for (rel, args), slot in self.numerics.items():
            decl = self.model.relation(rel)
            keys.append(("numeric", rel, args))
            slots.append(slot)
            lo.append(decl.lo)
            hi.append(decl.hi)
        self.cont_keys = keys
        self.cont_slots = np.array(slots, dtype=np.int64)
        self.cont_lo = np.array(lo, dtype=float)
        self.cont_hi = np.array(hi, dtype=float)
        init_lo = np.empty(len(keys))
        init_hi = np.empty(len(keys))
        for i in range(len(keys)):
            l, h = self.cont_lo[i], self.cont_hi[i]
            if math.isfinite(l) and math.isfinite(h):
                init_lo[i], init_hi[i] = l, h
            elif math.isfinite(l):
                init_lo[i], init_hi[i] = l, l + 1.0
            elif math.isfinite(h):
                init_lo[i], init_hi[i] = h - 1.0, h
            else:
                init_lo[i], init_hi[i] = -1.0, 1.0
        self.cont_init_lo = init_lo
        self.cont_init_hi = init_hi
        self.indicator_slots = np.array(sorted(self.indicators.values()), dtype=np.int64)

    def _build_parents(self) -> None:
        parents: list[list[int]] = [[] for _ in range(self.n_slots)]
        for node in self.nodes.values():
            for c in node.children:
                parents[c].append(node.slot)
        self.parents = parents

    # -- public surface -----------------------------------------------------------

    def new_buffer(self) -> "EvalBuffer":
        return EvalBuffer(self)

    def stats(self) -> dict:
        n_internal = sum(
            1 for s in range(self.n_slots) if self.kinds[s] not in ("pool",) + _LEAF_KINDS
        )
        return {
            "nodes": n_internal + len(self.params) + len(self.numerics) + len(self.indicators) + 1,
            "edges": int(self.n_edges),
            "params": len(self.params),
            "numeric_leaves": len(self.numerics),
            "indicators": len(self.indicators),
        }

    def to_dot(self) -> str:
        colors = {
            "param": "lightblue",
            "numeric": "lightgreen",
            "indicator": "orange",
            "const": "gray",
            "pool": "gray",
        }
        lines = ["digraph likelihood {", "  root [shape=doubleoctagon];"]
        for slot in range(self.n_slots):
            kind = self.kinds[slot]
            node = self.nodes.get(slot)
            label = kind if node is None else node.op
            if node is not None and node.key is not None:
                label = f"{label}\\n{node.key}"
            color = colors.get(kind, "white")
            lines.append(f'  n{slot} [label="{label}", style=filled, fillcolor={color}];')
            if node is not None:
                for c in node.children:
                    lines.append(f"  n{slot} -> n{c};")
        for s in self.a_idx.tolist():
            lines.append(f"  root -> n{s};")
        for i in range(len(self.b_prob_idx)):
            lines.append(f"  root -> n{int(self.b_prob_idx[i])};")
            lines.append(f"  root -> n{int(self.b_g_idx[i])} [style=dashed];")
        lines.append("}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Builder


class _Builder:
    def __init__(self, model, dataset, fold, fix_params, learn_relations, freeze_relations):
        self.model = model
        self.dataset = dataset
        self.fold = fold
        self.fix_params = dict(fix_params or {})
        for name in self.fix_params:
            if name not in model.parameters:
                raise ModelError(f"cannot fix unknown parameter {name}")
        learn = set(learn_relations or ())
        freeze = set(freeze_relations or ())
        clash = learn & freeze
        if clash:
            raise ModelError(f"relations both learned and frozen: {sorted(clash)}")
        self.learnable: set[str] = set()
        for decl in model.relations.values():
            if decl.kind != NUMERIC_INPUT:
                if decl.name in learn:
                    raise ModelError(f"cannot learn non-numeric relation {decl.name}")
                continue
            if decl.name in learn or (decl.learnable and decl.name not in freeze):
                self.learnable.add(decl.name)

        self.kinds: list[str] = []
        self.values: list[float] = []  # meaningful for pool/const slots only
        self.nodes: dict[int, GraphNode] = {}
        self.memo: dict = {}
        self.pool: dict[float, int] = {}
        self.params: dict[str, int] = {}
        self.numerics: dict[tuple[str, tuple[int, ...]], int] = {}
        self.indicators: dict[tuple[int, str, tuple[int, ...]], int] = {}
        self.factors_a: dict[int, list[float]] = {}
        self.a_occurrences: dict[int, list] = {}
        self.factors_b: list[tuple[int, int, tuple]] = []
        self.const_ll = 0.0
        self.dep_edges: dict[tuple, set] = {}
        self.latent_done: set = set()
        self._dep_stack: list[tuple] = []

    # -- slots ------------------------------------------------------------------

    def _new_slot(self, kind: str, value: float = math.nan) -> int:
        self.kinds.append(kind)
        self.values.append(value)
        return len(self.kinds) - 1

    def lit(self, value: float):
        """A constant subformula: a bare float under folding, a const node otherwise."""
        if self.fold:
            return float(value)
        return self._const_slot(value)

    def _const_slot(self, value: float) -> int:
        key = ("const", float(value))
        slot = self.memo.get(key)
        if slot is None:
            slot = self._new_slot("const", float(value))
            self.nodes[slot] = GraphNode(slot, "const", const=float(value))
            self.memo[key] = slot
        return slot

    def _pool_slot(self, value: float) -> int:
        slot = self.pool.get(float(value))
        if slot is None:
            slot = self._new_slot("pool", float(value))
            self.pool[float(value)] = slot
        return slot

    def _as_slot(self, ref) -> int:
        """Materialise a literal as a shared read-only slot (wif operands)."""
        if isinstance(ref, float):
            return self._pool_slot(ref)
        return ref

    def param_slot(self, name: str) -> int:
        slot = self.params.get(name)
        if slot is None:
            slot = self._new_slot("param")
            self.nodes[slot] = GraphNode(slot, "param", key=name)
            self.params[name] = slot
        return slot

    def numeric_slot(self, rel: str, args: tuple[int, ...]) -> int:
        key = (rel, args)
        slot = self.numerics.get(key)
        if slot is None:
            slot = self._new_slot("numeric")
            self.nodes[slot] = GraphNode(slot, "numeric", key=key)
            self.numerics[key] = slot
        return slot

    def indicator_slot(self, sample: int, rel: str, args: tuple[int, ...]) -> int:
        key = (sample, rel, args)
        slot = self.indicators.get(key)
        if slot is None:
            slot = self._new_slot("indicator")
            self.nodes[slot] = GraphNode(slot, "indicator", key=key)
            self.indicators[key] = slot
        return slot

    def _node(self, op, children, coeffs=None, const=0.0, n=0) -> int:
        if op in ("add", "sum"):
            order = sorted(range(len(children)), key=lambda i: (children[i], coeffs[i]))
            children = tuple(children[i] for i in order)
            coeffs = tuple(coeffs[i] for i in order)
        elif op in ("lreg", "mean", "noisyor"):
            children = tuple(sorted(children))
        elif op == "mul":
            children = tuple(sorted(children))
        key = (op, children, coeffs, const, n)
        slot = self.memo.get(key)
        if slot is None:
            slot = self._new_slot(op)
            self.nodes[slot] = GraphNode(slot, op, children, coeffs, const, n)
            self.memo[key] = slot
        return slot

    # -- observation factors ---------------------------------------------------

    def add_observed(self, sample: int, rel: str, args: tuple[int, ...], value: bool) -> None:
        ref = self._ground_atom(sample, rel, args)
        if isinstance(ref, float):
            p = _check_prob(ref, rel, args)
            p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
            self.const_ll += math.log(p) if value else math.log(1.0 - p)
            return
        counts = self.factors_a.setdefault(ref, [0.0, 0.0])
        counts[0 if value else 1] += 1.0
        self.a_occurrences.setdefault(ref, []).append((sample, rel, args, value))

    def add_latent(self, sample: int, rel: str, args: tuple[int, ...]) -> int:
        key = (sample, rel, args)
        if key in self.latent_done:
            return self.indicators[key]
        self.latent_done.add(key)
        g_slot = self.indicator_slot(sample, rel, args)
        ref = self._ground_atom(sample, rel, args)
        if isinstance(ref, float):
            prob_slot = self._pool_slot(_check_prob(ref, rel, args))
        else:
            prob_slot = ref
        self.factors_b.append((prob_slot, g_slot, (sample, rel, args)))
        return g_slot

    def _ground_atom(self, sample: int, rel: str, args: tuple[int, ...]):
        decl = self.model.relation(rel)
        if decl.kind != PROBABILISTIC:
            raise GraphError(f"{rel} is not probabilistic")
        assignment = self.model.assignments.get(rel)
        if assignment is None:
            raise ModelError(f"probabilistic relation {rel} has no assignment")
        head_vars, formula = assignment
        if len(args) != len(head_vars):
            raise ModelError(f"atom {rel}{args}: arity mismatch")
        self._dep_stack.append((sample, rel, args))
        try:
            return self.ground(formula, dict(zip(head_vars, args)), sample)
        finally:
            self._dep_stack.pop()

    def _prob_atom_ref(self, sample: int, rel: str, args: tuple[int, ...]):
        """Reference to a probabilistic atom inside another atom's formula."""
        if self._dep_stack:
            self.dep_edges.setdefault(self._dep_stack[-1], set()).add((sample, rel, args))
        status = self.dataset.samples[sample].get((rel, args))
        if status is True:
            return self.lit(1.0)
        if status is False:
            return self.lit(0.0)
        # explicitly unknown or absent: condition on the atom's indicator
        self.add_latent(sample, rel, args)
        return self.indicators[(sample, rel, args)]

    # -- recursive grounding ----------------------------------------------------

    def ground(self, f, binding: dict, sample: int):
        fold = self.fold
        if isinstance(f, Constant):
            return self.lit(f.value)
        if isinstance(f, Param):
            if f.name in self.fix_params:
                return self.lit(self.fix_params[f.name])
            return self.param_slot(f.name)
        if isinstance(f, Atom):
            decl = self.model.relation(f.relation)
            args = tuple(binding[v] for v in f.args)
            if decl.kind == BOOLEAN_INPUT:
                return self.lit(self.dataset.input_value(f.relation, args))
            if decl.kind == NUMERIC_INPUT:
                if f.relation in self.learnable:
                    return self.numeric_slot(f.relation, args)
                return self.lit(self.dataset.input_value(f.relation, args))
            return self._prob_atom_ref(sample, f.relation, args)
        if isinstance(f, (Plus, Minus)):
            sign = 1.0 if isinstance(f, Plus) else -1.0
            a = self.ground(f.left, binding, sample)
            b = self.ground(f.right, binding, sample)
            if isinstance(a, float) and isinstance(b, float):
                return a + sign * b
            children, coeffs, const = [], [], 0.0
            if isinstance(a, float):
                const += a
            else:
                children.append(a)
                coeffs.append(1.0)
            if isinstance(b, float):
                const += sign * b
            else:
                children.append(b)
                coeffs.append(sign)
            return self._node("add", tuple(children), tuple(coeffs), const)
        if isinstance(f, Times):
            a = self.ground(f.left, binding, sample)
            b = self.ground(f.right, binding, sample)
            if isinstance(a, float) and isinstance(b, float):
                return a * b
            if isinstance(a, float) or isinstance(b, float):
                factor = a if isinstance(a, float) else b
                node = b if isinstance(a, float) else a
                if factor == 0.0:
                    return 0.0
                return self._node("mul", (node,), const=factor)
            return self._node("mul", (a, b), const=1.0)
        if isinstance(f, Wif):
            cond = self.ground(f.cond, binding, sample)
            if isinstance(cond, float):
                if cond == 1.0:
                    return self.ground(f.then, binding, sample)
                if cond == 0.0:
                    return self.ground(f.orelse, binding, sample)
                t = self.ground(f.then, binding, sample)
                e = self.ground(f.orelse, binding, sample)
                if isinstance(t, float) and isinstance(e, float):
                    return cond * t + (1.0 - cond) * e
                children, coeffs, const = [], [], 0.0
                if isinstance(t, float):
                    const += cond * t
                else:
                    children.append(t)
                    coeffs.append(cond)
                if isinstance(e, float):
                    const += (1.0 - cond) * e
                else:
                    children.append(e)
                    coeffs.append(1.0 - cond)
                return self._node("add", tuple(children), tuple(coeffs), const)
            t = self.ground(f.then, binding, sample)
            e = self.ground(f.orelse, binding, sample)
            if isinstance(t, float) and isinstance(e, float) and t == e:
                return t if self.fold else self._const_slot(t)
            return self._node("wif", (cond, self._as_slot(t), self._as_slot(e)))
        if isinstance(f, Combine):
            refs = []
            if f.forall:
                objs = range(self.dataset.n_objects)
                for combo in itertools.product(objs, repeat=len(f.forall)):
                    inner = dict(binding)
                    inner.update(zip(f.forall, combo))
                    if not self._guard_holds(f.where, inner):
                        continue
                    for b in f.bodies:
                        refs.append(self.ground(b, inner, sample))
            else:
                for b in f.bodies:
                    refs.append(self.ground(b, binding, sample))
            return self._combine_node(f.comb, refs, rel_hint=f)
        raise TypeError(f"not a formula: {f!r}")

    def _combine_node(self, comb: str, refs: list, rel_hint=None):
        lits = [r for r in refs if isinstance(r, float)]
        nodes = tuple(r for r in refs if not isinstance(r, float))
        if comb in ("sum", "l-reg"):
            const = math.fsum(lits)
            if not nodes:
                total = const
                return self.lit(total) if comb == "sum" else self.lit(logistic(total))
            if comb == "sum":
                return self._node("add", nodes, (1.0,) * len(nodes), const)
            return self._node("lreg", nodes, const=const)
        if comb == "mean":
            n = len(refs)
            if n == 0:
                raise GraphError("mean over an empty multiset")
            const = math.fsum(lits)
            if not nodes:
                return self.lit(const / n)
            return self._node("mean", nodes, const=const, n=n)
        if comb == "noisy-or":
            factor = 1.0
            for v in lits:
                if v < 0.0 or v > 1.0:
                    raise NumericalError(f"noisy-or input {v} outside [0, 1]")
                factor *= 1.0 - v
            if not nodes:
                return self.lit(1.0 - factor)
            return self._node("noisyor", nodes, const=factor)
        raise ModelError(f"unknown combination function {comb!r}")

    def _guard_holds(self, guard: Optional[Guard], binding: Mapping[str, int]) -> bool:
        if guard is None:
            return True
        for t in guard.terms:
            if isinstance(t, VarTest):
                if (binding[t.left] == binding[t.right]) != t.equal:
                    return False
            else:
                val = bool(self.dataset.input_value(t.relation, tuple(binding[a] for a in t.args)))
                if val == t.negated:
                    return False
        return True

    # -- cycle check --------------------------------------------------------------

    def check_acyclic(self) -> None:
        state: dict[tuple, int] = {}  # 1 in progress, 2 done
        for start in list(self.dep_edges):
            if state.get(start):
                continue
            stack = [(start, iter(self.dep_edges.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                advanced = False
                for nxt in it:
                    st = state.get(nxt)
                    if st == 1:
                        s, rel, args = nxt
                        raise GraphError(
                            f"cyclic dependency among probabilistic atoms at {rel}{args} (sample {s})"
                        )
                    if st is None:
                        state[nxt] = 1
                        stack.append((nxt, iter(self.dep_edges.get(nxt, ()))))
                        advanced = True
                        break
                if not advanced:
                    state[node] = 2
                    stack.pop()


def _check_prob(p: float, rel: str, args: tuple) -> float:
    if not (-1e-12 <= p <= 1.0 + 1e-12):
        raise NumericalError(
            f"probability formula for {rel}{args} evaluated to {p}, outside [0, 1]"
        )
    return min(max(p, 0.0), 1.0)


def build_graph(
    model: Model,
    dataset: DataSet,
    *,
    fold: bool = True,
    fix_params: Mapping[str, float] | None = None,
    learn_relations: Iterable[str] | None = None,
    freeze_relations: Iterable[str] | None = None,
) -> LikelihoodGraph:
    """Compile `model` + `dataset` into a likelihood graph.

    `fix_params` pins parameters to constants (they fold away).
    `learn_relations` / `freeze_relations` override the per-relation
    `learnable` declarations.
    """
    builder = _Builder(model, dataset, fold, fix_params, learn_relations, freeze_relations)
    for sample_index, sample in enumerate(dataset.samples):
        for (rel, args), value in sample.items():
            if value is UNKNOWN:
                builder.add_latent(sample_index, rel, args)
            else:
                builder.add_observed(sample_index, rel, args, value)
    builder.check_acyclic()
    return LikelihoodGraph(builder)


# ---------------------------------------------------------------------------
# Evaluation buffers


class EvalBuffer:
    """Mutable evaluation state over an immutable graph.

    Leaf updates invalidate only the ancestors of the changed slot; small
    dirty sets are recomputed node by node, full invalidation runs the
    vectorised plan.  `edge_visits` counts gather/scatter work for the
    complexity assertions in the tests.
    """

    _SCALAR_LIMIT = 512

    def __init__(self, graph: LikelihoodGraph):
        self.graph = graph
        self.values = np.full(graph.n_slots, np.nan)
        self.values[graph._fixed_slots] = graph._fixed_values
        if len(graph.indicator_slots):
            self.values[graph.indicator_slots] = 0.0
        self._a_contrib = np.zeros(len(graph.a_idx))
        self._b_contrib = np.zeros(len(graph.b_prob_idx))
        self._total_ll = math.nan
        self._all_dirty = True
        self._dirty: set[int] = set()
        self.last_invalidated = 0
        self.edge_visits = 0

    # -- leaf setters ------------------------------------------------------------

    def set_param(self, name: str, value: float) -> None:
        self._set_slot(self.graph.params[name], value)

    def set_numeric(self, rel: str, args: tuple[int, ...], value: float) -> None:
        self._set_slot(self.graph.numerics[(rel, tuple(args))], value)

    def set_indicator(self, rel: str, args: tuple[int, ...], value: int, sample: int = 0) -> None:
        key = (sample, rel, tuple(args))
        slot = self.graph.indicators.get(key)
        if slot is None:
            raise GraphError(f"atom {rel}{tuple(args)} (sample {sample}) has no indicator")
        if value not in (0, 1):
            raise GraphError(f"indicator value must be 0 or 1, got {value!r}")
        self._set_slot(slot, float(value))

    def set_continuous(self, x: np.ndarray) -> None:
        """Bulk-set all parameters and learnable numeric atoms (fit hot path)."""
        self.values[self.graph.cont_slots] = x
        self._all_dirty = True

    def set_indicator_vector(self, bits: np.ndarray) -> None:
        self.values[self.graph.indicator_slots] = bits
        self._all_dirty = True

    def indicator_vector(self) -> np.ndarray:
        return self.values[self.graph.indicator_slots].astype(int)

    def _set_slot(self, slot: int, value: float) -> None:
        if self.values[slot] == value:
            return
        self.values[slot] = value
        if self._all_dirty:
            return
        touched = self._ancestors(slot)
        self._dirty |= touched
        self.last_invalidated = len(touched)
        if len(self._dirty) > self._SCALAR_LIMIT:
            self._all_dirty = True
            self._dirty.clear()

    def _ancestors(self, slot: int) -> set[int]:
        seen = {slot}
        frontier = [slot]
        parents = self.graph.parents
        while frontier:
            s = frontier.pop()
            for p in parents[s]:
                if p not in seen:
                    seen.add(p)
                    frontier.append(p)
        return seen

    # -- evaluation ---------------------------------------------------------------

    def forward(self) -> None:
        if self._all_dirty:
            self._forward_full()
            self._all_dirty = False
            self._dirty.clear()
        elif self._dirty:
            self._forward_scalar(sorted(self._dirty))
            self._dirty.clear()

    def _forward_full(self) -> None:
        V = self.values
        for g in self.graph.plan:
            op = g.op
            if op == "wif":
                c = V[g.child_idx[:, 0]]
                t = V[g.child_idx[:, 1]]
                e = V[g.child_idx[:, 2]]
                V[g.out] = c * t + (1.0 - c) * e
                self.edge_visits += g.child_idx.size
                continue
            if op == "mul":
                prod = V[g.child_idx[:, 0]]
                if g.child_idx.shape[1] == 2:
                    prod = prod * V[g.child_idx[:, 1]]
                V[g.out] = prod * g.const
                self.edge_visits += g.child_idx.size
                continue
            vals = V[g.child_idx]
            self.edge_visits += g.child_idx.size
            if op == "add":
                s = np.add.reduceat(vals * g.coeffs, g.seg_starts) + g.const
                V[g.out] = s
            elif op == "lreg":
                s = np.add.reduceat(vals, g.seg_starts) + g.const
                out = np.empty_like(s)
                pos = s >= 0
                out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
                es = np.exp(s[~pos])
                out[~pos] = es / (1.0 + es)
                V[g.out] = out
            elif op == "mean":
                V[g.out] = (np.add.reduceat(vals, g.seg_starts) + g.const) / g.n
            elif op == "noisyor":
                if np.any(vals < -1e-12) or np.any(vals > 1.0 + 1e-12):
                    raise NumericalError("noisy-or input outside [0, 1]")
                V[g.out] = 1.0 - g.const * np.multiply.reduceat(1.0 - vals, g.seg_starts)
            else:
                raise GraphError(f"unknown op {op}")
        self._refresh_all_factors()

    def _forward_scalar(self, slots: list[int]) -> None:
        V = self.values
        nodes = self.graph.nodes
        touched_rows_a: set[int] = set()
        touched_rows_b: set[int] = set()
        for slot in slots:
            node = nodes.get(slot)
            if node is not None and node.children:
                V[slot] = self._compute_scalar(node)
                self.edge_visits += len(node.children)
            rows = self.graph._a_rows_by_slot.get(slot)
            if rows:
                touched_rows_a.update(rows)
            rows = self.graph._b_rows_by_slot.get(slot)
            if rows:
                touched_rows_b.update(rows)
        self._update_factor_rows(touched_rows_a, touched_rows_b)

    def _compute_scalar(self, node: GraphNode) -> float:
        V = self.values
        op = node.op
        if op in ("add", "sum"):
            return math.fsum(
                c * V[s] for c, s in zip(node.coeffs, node.children)
            ) + node.const
        if op == "mul":
            prod = node.const
            for s in node.children:
                prod *= V[s]
            return prod
        if op == "wif":
            c, t, e = (V[s] for s in node.children)
            return c * t + (1.0 - c) * e
        if op == "lreg":
            return logistic(math.fsum(V[s] for s in node.children) + node.const)
        if op == "mean":
            return (math.fsum(V[s] for s in node.children) + node.const) / node.n
        if op == "noisyor":
            prod = node.const
            for s in node.children:
                v = V[s]
                if v < -1e-12 or v > 1.0 + 1e-12:
                    raise NumericalError("noisy-or input outside [0, 1]")
                prod *= 1.0 - v
            return 1.0 - prod
        raise GraphError(f"unknown op {op}")

    # -- likelihood ----------------------------------------------------------------

    def _refresh_all_factors(self) -> None:
        g = self.graph
        if len(g.a_idx):
            p = self.values[g.a_idx]
            self._check_probs(p)
            pc = _clip01(p)
            self._a_contrib = g.a_ntrue * np.log(pc) + g.a_nfalse * np.log1p(-pc)
        if len(g.b_prob_idx):
            p = self.values[g.b_prob_idx]
            self._check_probs(p)
            pc = _clip01(p)
            bits = self.values[g.b_g_idx]
            self._b_contrib = bits * np.log(pc) + (1.0 - bits) * np.log1p(-pc)
        self._total_ll = (
            g.const_ll + float(np.sum(self._a_contrib)) + float(np.sum(self._b_contrib))
        )

    def _update_factor_rows(self, rows_a: set[int], rows_b: set[int]) -> None:
        g = self.graph
        for row in rows_a:
            p = self.values[g.a_idx[row]]
            self._check_probs(np.array([p]))
            pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
            self._a_contrib[row] = g.a_ntrue[row] * math.log(pc) + g.a_nfalse[row] * math.log1p(-pc)
        for row in rows_b:
            p = self.values[g.b_prob_idx[row]]
            self._check_probs(np.array([p]))
            pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
            bit = self.values[g.b_g_idx[row]]
            self._b_contrib[row] = bit * math.log(pc) + (1.0 - bit) * math.log1p(-pc)
        self._total_ll = (
            g.const_ll + float(np.sum(self._a_contrib)) + float(np.sum(self._b_contrib))
        )

    @staticmethod
    def _check_probs(p: np.ndarray) -> None:
        if np.isnan(p).any():
            raise GraphError("evaluation with unset leaves (NaN probability)")
        if np.any(p < -1e-12) or np.any(p > 1.0 + 1e-12):
            bad = p[(p < -1e-12) | (p > 1.0 + 1e-12)][0]
            raise NumericalError(f"probability {bad} outside [0, 1] at a likelihood factor")

    def log_likelihood(self) -> float:
        self.forward()
        return self._total_ll

    # -- gradients ----------------------------------------------------------------

    def backward(self) -> np.ndarray:
        """Adjoints d LL / d slot for every slot, by one reverse sweep."""
        self.forward()
        g = self.graph
        V = self.values
        A = np.zeros(g.n_slots)
        if len(g.a_idx):
            p = V[g.a_idx]
            pc = _clip01(p)
            np.add.at(A, g.a_idx, g.a_ntrue / pc - g.a_nfalse / (1.0 - pc))
        if len(g.b_prob_idx):
            p = V[g.b_prob_idx]
            pc = _clip01(p)
            bits = V[g.b_g_idx]
            np.add.at(A, g.b_prob_idx, bits / pc - (1.0 - bits) / (1.0 - pc))
        self.edge_visits += len(g.a_idx) + len(g.b_prob_idx)

        n = g.n_slots
        for grp in reversed(self.graph.plan):
            adj = A[grp.out]
            op = grp.op
            if op == "wif":
                c = V[grp.child_idx[:, 0]]
                t = V[grp.child_idx[:, 1]]
                e = V[grp.child_idx[:, 2]]
                A += np.bincount(grp.child_idx[:, 0], weights=adj * (t - e), minlength=n)
                A += np.bincount(grp.child_idx[:, 1], weights=adj * c, minlength=n)
                A += np.bincount(grp.child_idx[:, 2], weights=adj * (1.0 - c), minlength=n)
                self.edge_visits += grp.child_idx.size
                continue
            if op == "mul":
                if grp.child_idx.shape[1] == 1:
                    contrib = adj * grp.const
                    A += np.bincount(grp.child_idx[:, 0], weights=contrib, minlength=n)
                else:
                    v0 = V[grp.child_idx[:, 0]]
                    v1 = V[grp.child_idx[:, 1]]
                    A += np.bincount(grp.child_idx[:, 0], weights=adj * grp.const * v1, minlength=n)
                    A += np.bincount(grp.child_idx[:, 1], weights=adj * grp.const * v0, minlength=n)
                self.edge_visits += grp.child_idx.size
                continue
            lens = grp.seg_lens
            if op == "add":
                contrib = np.repeat(adj, lens) * grp.coeffs
            elif op == "lreg":
                out_v = V[grp.out]
                contrib = np.repeat(adj * out_v * (1.0 - out_v), lens)
            elif op == "mean":
                contrib = np.repeat(adj / grp.n, lens)
            elif op == "noisyor":
                one_minus = 1.0 - V[grp.child_idx]
                seg_prod = np.multiply.reduceat(one_minus, grp.seg_starts)
                flat_prod = np.repeat(grp.const * seg_prod, lens)
                flat_adj = np.repeat(adj, lens)
                with np.errstate(divide="ignore", invalid="ignore"):
                    contrib = flat_adj * flat_prod / one_minus
                bad = ~np.isfinite(contrib)
                if bad.any():
                    contrib[bad] = 0.0
                    for i in np.nonzero(bad)[0]:
                        seg = np.searchsorted(grp.seg_starts, i, side="right") - 1
                        s0 = grp.seg_starts[seg]
                        s1 = s0 + lens[seg]
                        others = 1.0
                        for j in range(s0, s1):
                            if j != i:
                                others *= one_minus[j]
                        contrib[i] = adj[seg] * grp.const[seg] * others
            else:
                raise GraphError(f"unknown op {op}")
            A += np.bincount(grp.child_idx, weights=contrib, minlength=n)
            self.edge_visits += grp.child_idx.size
        return A

    def gradient(self) -> dict:
        """Partials for every parameter and learnable numeric atom."""
        A = self.backward()
        out = {}
        for name, slot in self.graph.params.items():
            out[("param", name)] = float(A[slot])
        for (rel, args), slot in self.graph.numerics.items():
            out[("numeric", rel, args)] = float(A[slot])
        return out

    def ll_and_grad(self) -> tuple[float, np.ndarray]:
        """Log-likelihood and gradient over the continuous leaf vector."""
        ll = self.log_likelihood()
        A = self.backward()
        return ll, A[self.graph.cont_slots]

    def continuous_vector(self) -> np.ndarray:
        return self.values[self.graph.cont_slots].copy()


# ---------------------------------------------------------------------------
# Reference (naive) likelihood for cross-checking the compiled graph


class DatasetContext(EvalContext):
    """EvalContext over a dataset plus explicit leaf values."""

    def __init__(
        self,
        model: Model,
        dataset: DataSet,
        sample_index: int = 0,
        params: Mapping[str, float] | None = None,
        numeric_values: Mapping[tuple, float] | None = None,
        indicator_values: Mapping[tuple, float] | None = None,
        learn_relations: Iterable[str] = (),
    ):
        self.model = model
        self.dataset = dataset
        self.sample_index = sample_index
        self.params_map = dict(params or {})
        self.numeric_values = {
            (rel, tuple(args)): v for (rel, args), v in (numeric_values or {}).items()
        }
        self.indicator_values = {
            (rel, tuple(args)): v for (rel, args), v in (indicator_values or {}).items()
        }
        self.learn_relations = set(learn_relations)

    def param(self, name):
        return self.params_map[name]

    def input_value(self, relation, args):
        key = (relation, tuple(args))
        if key in self.numeric_values:
            return self.numeric_values[key]
        if relation in self.learn_relations:
            # learned atom with no supplied value: it can only occur inside a
            # zero-weight branch, so any finite number gives the same result
            try:
                return self.dataset.input_value(relation, tuple(args))
            except DataError:
                return 0.0
        return self.dataset.input_value(relation, tuple(args))

    def prob_value(self, relation, args):
        status = self.dataset.samples[self.sample_index].get((relation, tuple(args)))
        if status is True:
            return 1.0
        if status is False:
            return 0.0
        return self.indicator_values[(relation, tuple(args))]

    def objects(self):
        return range(self.dataset.n_objects)


def naive_log_likelihood(
    model: Model,
    dataset: DataSet,
    params: Mapping[str, float] | None = None,
    numeric_values: Mapping[tuple, float] | None = None,
    indicator_values: Mapping[tuple, float] | None = None,
    learn_relations: Iterable[str] = (),
) -> float:
    """Per-atom recursive evaluation of the same log-likelihood the graph
    computes; slow, independent, used as the test oracle."""
    terms = []
    for s in range(len(dataset.samples)):
        ctx = DatasetContext(
            model, dataset, s, params, numeric_values, indicator_values, learn_relations
        )
        for (rel, args), value in dataset.samples[s].items():
            p = evaluate_probability(model, rel, args, ctx)
            p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
            if value is UNKNOWN:
                bit = ctx.indicator_values[(rel, tuple(args))]
                terms.append(math.log(p) if bit else math.log1p(-p))
            elif value:
                terms.append(math.log(p))
            else:
                terms.append(math.log1p(-p))
    return math.fsum(terms)
