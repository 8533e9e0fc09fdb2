"""Fitting and inference over likelihood graphs.

* `fit`: multi-restart projected gradient ascent over parameters and
  learnable numeric atoms, with an adaptive step size (grow on accept,
  shrink on reject) and box projection onto declared ranges.
* `map_inference`: greedy single-flip ascent over indicator leaves,
  restarted from several configurations.
* `gibbs_marginalize`: single-site Gibbs sweeps over indicator leaves.
* `forward_sample`: ancestral sampling of probabilistic atoms in
  dependency order, used to generate synthetic datasets.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import DataSet, UNKNOWN
from .errors import DataError, GraphError, NumericalError
from .formula import (
    PROBABILISTIC,
    Atom,
    Combine,
    Constant,
    EvalContext,
    Minus,
    Model,
    Param,
    Plus,
    Times,
    Wif,
    evaluate_probability,
    guard_holds,
)
from .graph import EvalBuffer, LikelihoodGraph


@dataclass
class FitConfig:
    restarts: int = 20
    max_iter: int = 5000
    tol: float = 1e-7  # relative LL gain counted as "no progress"
    patience: int = 3  # consecutive low-gain accepted steps before stopping
    step_init: float = 0.01
    step_grow: float = 1.2
    step_shrink: float = 0.5
    max_move: float = 1.0  # per-iteration cap on any single leaf's movement
    seed: int = 0
    init_indicators: str = "random"  # or "keep"
    workers: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.step_grow <= 1.0 or not (0.0 < self.step_shrink < 1.0):
            raise ValueError("step factors must satisfy grow > 1 and 0 < shrink < 1")


@dataclass
class FitResult:
    best_ll: float
    params: dict[str, float]
    numeric_atoms: list[tuple[str, tuple[str, ...], float]]  # (rel, arg labels, value)
    indicators: list[tuple[str, tuple[str, ...], int, int]]  # (rel, arg labels, sample, bit)
    restart_lls: list[float]
    trace: list[float]  # accepted-step LLs of the best restart
    restart_seconds: list[float]
    best_restart: int
    x_best: np.ndarray = field(repr=False, default=None)
    bits_best: np.ndarray = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        doc = {
            "best_ll": self.best_ll,
            "params": self.params,
            "numeric_atoms": [
                {"rel": rel, "args": list(args), "value": value}
                for rel, args, value in self.numeric_atoms
            ],
            "restart_lls": self.restart_lls,
            "trace": self.trace,
            "restart_seconds": self.restart_seconds,
            "best_restart": self.best_restart,
        }
        if self.indicators:
            doc["indicators"] = [
                {"rel": rel, "args": list(args), "sample": s, "value": bit}
                for rel, args, s, bit in self.indicators
            ]
        return doc


def _restart_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _climb(graph: LikelihoodGraph, buffer: EvalBuffer, x0: np.ndarray, cfg: FitConfig):
    """One projected-gradient ascent run from `x0`; returns (ll, x, trace)."""
    lo, hi = graph.cont_lo, graph.cont_hi
    x = np.clip(x0, lo, hi)
    buffer.set_continuous(x)
    ll, grad = buffer.ll_and_grad()
    _check_gradient(graph, grad)
    step = cfg.step_init
    trace = [ll]
    slow_steps = 0
    iters = 0
    while iters < cfg.max_iter:
        iters += 1
        biggest = float(np.max(np.abs(grad)))
        eff = step if step * biggest <= cfg.max_move else cfg.max_move / biggest
        trial = np.clip(x + eff * grad, lo, hi)
        buffer.set_continuous(trial)
        ll_new = buffer.log_likelihood()
        if ll_new > ll:
            gain = (ll_new - ll) / max(1.0, abs(ll))
            x = trial
            ll = ll_new
            trace.append(ll)
            step *= cfg.step_grow
            _, grad = buffer.ll_and_grad()
            _check_gradient(graph, grad)
            slow_steps = slow_steps + 1 if gain < cfg.tol else 0
            if slow_steps >= cfg.patience:
                break
        else:
            step *= cfg.step_shrink
            if step < 1e-15:
                break
    buffer.set_continuous(x)
    return ll, x, trace


def _check_gradient(graph: LikelihoodGraph, grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        bad = int(np.nonzero(~np.isfinite(grad))[0][0])
        raise NumericalError(f"non-finite gradient for leaf {graph.cont_keys[bad]}")


def _run_restart(graph: LikelihoodGraph, cfg: FitConfig, rng: np.random.Generator,
                 keep_bits: np.ndarray | None):
    buffer = graph.new_buffer()
    t0 = time.perf_counter()
    n_ind = len(graph.indicator_slots)
    if n_ind:
        if cfg.init_indicators == "random":
            bits = (rng.random(n_ind) < 0.5).astype(float)
        else:
            bits = keep_bits if keep_bits is not None else np.zeros(n_ind)
        buffer.set_indicator_vector(bits)
    x0 = rng.uniform(graph.cont_init_lo, graph.cont_init_hi)
    ll, x, trace = _climb(graph, buffer, x0, cfg)
    seconds = time.perf_counter() - t0
    bits = buffer.values[graph.indicator_slots].copy() if n_ind else np.zeros(0)
    return ll, x, bits, trace, seconds


def fit(graph: LikelihoodGraph, cfg: FitConfig | None = None,
        keep_bits: np.ndarray | None = None) -> FitResult:
    """Maximum-likelihood fit of all continuous leaves by multi-restart
    projected gradient ascent.  Deterministic for a fixed config and seed."""
    cfg = cfg or FitConfig()
    if len(graph.cont_keys) == 0:
        raise GraphError("graph has no learnable leaves")
    rngs = _restart_rngs(cfg.seed, cfg.restarts)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(
                pool.map(lambda rng: _run_restart(graph, cfg, rng, keep_bits), rngs)
            )
    else:
        results = [_run_restart(graph, cfg, rng, keep_bits) for rng in rngs]

    best = max(range(len(results)), key=lambda i: results[i][0])
    ll, x, bits, trace, _ = results[best]
    return _make_result(graph, ll, x, bits, trace, best,
                        [r[0] for r in results], [r[4] for r in results])


def _make_result(graph, ll, x, bits, trace, best_restart, restart_lls, restart_seconds):
    labels = graph.dataset.objects
    params = {}
    numeric_atoms = []
    for key, value in zip(graph.cont_keys, x):
        if key[0] == "param":
            params[key[1]] = float(value)
        else:
            _, rel, args = key
            numeric_atoms.append((rel, tuple(labels[a] for a in args), float(value)))
    indicators = []
    if len(bits):
        slot_to_key = {slot: key for key, slot in graph.indicators.items()}
        for slot, bit in zip(graph.indicator_slots.tolist(), bits.tolist()):
            sample, rel, args = slot_to_key[slot]
            indicators.append((rel, tuple(labels[a] for a in args), sample, int(bit)))
    return FitResult(
        best_ll=float(ll),
        params=params,
        numeric_atoms=numeric_atoms,
        indicators=indicators,
        restart_lls=[float(v) for v in restart_lls],
        trace=[float(v) for v in trace],
        restart_seconds=restart_seconds,
        best_restart=best_restart,
        x_best=np.asarray(x, dtype=float),
        bits_best=np.asarray(bits, dtype=float),
    )


# ---------------------------------------------------------------------------
# Leaf-value plumbing shared by MAP / Gibbs


def apply_leaf_values(buffer: EvalBuffer, values) -> None:
    """Set parameters and numeric atoms from a vector (aligned with
    `graph.cont_keys`) or a mapping keyed like gradient() results."""
    graph = buffer.graph
    if isinstance(values, np.ndarray) or isinstance(values, (list, tuple)):
        buffer.set_continuous(np.asarray(values, dtype=float))
        return
    vec = np.empty(len(graph.cont_keys))
    for i, key in enumerate(graph.cont_keys):
        vec[i] = values[key] if key in values else values[tuple(key)]
    buffer.set_continuous(vec)


# ---------------------------------------------------------------------------
# MAP inference over indicators


def map_inference(
    graph: LikelihoodGraph,
    leaf_values=None,
    *,
    seed: int = 0,
    inits: int = 8,
    buffer: EvalBuffer | None = None,
) -> tuple[dict, float]:
    """Local MAP assignment of all indicator atoms by greedy single flips.

    Restarted from all-false, all-true, and `inits - 2` random settings;
    returns (assignment, log-likelihood) of the best local optimum found.
    Assignment keys are (sample, relation, arg ids).
    """
    if buffer is None:
        buffer = graph.new_buffer()
        if leaf_values is not None:
            apply_leaf_values(buffer, leaf_values)
    n_ind = len(graph.indicator_slots)
    if n_ind == 0:
        return {}, buffer.log_likelihood()

    rng = np.random.default_rng(seed)
    starts = [np.zeros(n_ind), np.ones(n_ind)]
    for _ in range(max(0, inits - 2)):
        starts.append((rng.random(n_ind) < 0.5).astype(float))

    slots = graph.indicator_slots
    slot_to_key = {slot: key for key, slot in graph.indicators.items()}
    best_ll, best_bits = -math.inf, None
    for bits in starts:
        buffer.set_indicator_vector(bits)
        ll = buffer.log_likelihood()
        improved = True
        while improved:
            improved = False
            for j in range(n_ind):
                slot = int(slots[j])
                old = buffer.values[slot]
                buffer._set_slot(slot, 1.0 - old)
                ll_flip = buffer.log_likelihood()
                if ll_flip > ll + 1e-12:
                    ll = ll_flip
                    improved = True
                else:
                    buffer._set_slot(slot, old)
                    buffer.forward()
        if ll > best_ll:
            best_ll = ll
            best_bits = buffer.values[slots].copy()
    buffer.set_indicator_vector(best_bits)
    buffer.forward()
    assignment = {
        slot_to_key[int(slots[j])]: int(best_bits[j]) for j in range(n_ind)
    }
    return assignment, float(best_ll)


# ---------------------------------------------------------------------------
# Gibbs sampling over indicators


@dataclass
class GibbsResult:
    marginals: dict  # (sample, rel, args) -> P(atom true)
    expected_ll: float
    sweeps: int


def gibbs_marginalize(
    graph: LikelihoodGraph,
    leaf_values=None,
    sweeps: int = 1000,
    burn_in: int = 100,
    seed: int = 0,
    buffer: EvalBuffer | None = None,
) -> GibbsResult:
    """Single-site Gibbs over indicator atoms with fixed continuous leaves.

    Returns Monte Carlo marginals P(atom = true) and the average
    log-likelihood of the sampled complete configurations.
    """
    if buffer is None:
        buffer = graph.new_buffer()
        if leaf_values is not None:
            apply_leaf_values(buffer, leaf_values)
    n_ind = len(graph.indicator_slots)
    if n_ind == 0:
        ll = buffer.log_likelihood()
        return GibbsResult({}, ll, 0)

    rng = np.random.default_rng(seed)
    slots = graph.indicator_slots
    slot_to_key = {slot: key for key, slot in graph.indicators.items()}
    bits = (rng.random(n_ind) < 0.5).astype(float)
    buffer.set_indicator_vector(bits)
    buffer.forward()

    counts = np.zeros(n_ind)
    ll_sum = 0.0
    kept = 0
    for sweep in range(burn_in + sweeps):
        for j in range(n_ind):
            slot = int(slots[j])
            cur = buffer.values[slot]
            buffer._set_slot(slot, 1.0)
            ll1 = buffer.log_likelihood()
            buffer._set_slot(slot, 0.0)
            ll0 = buffer.log_likelihood()
            d = ll1 - ll0
            p1 = 1.0 / (1.0 + math.exp(-d)) if d >= 0 else math.exp(d) / (1.0 + math.exp(d))
            bit = 1.0 if rng.random() < p1 else 0.0
            buffer._set_slot(slot, bit)
        if sweep >= burn_in:
            kept += 1
            counts += buffer.values[slots]
            ll_sum += buffer.log_likelihood()
    marginals = {
        slot_to_key[int(slots[j])]: counts[j] / kept for j in range(n_ind)
    }
    return GibbsResult(marginals, ll_sum / kept, kept)


# ---------------------------------------------------------------------------
# Forward sampling


class _SamplingContext(EvalContext):
    def __init__(self, model, dataset, params, numeric_values, assigned):
        self.model = model
        self.dataset = dataset
        self.params_map = dict(params or {})
        self.numeric_values = {
            (rel, tuple(args)): v for (rel, args), v in (numeric_values or {}).items()
        }
        self.assigned = assigned  # (rel, args) -> 0/1

    def param(self, name):
        if name not in self.params_map:
            raise GraphError(f"forward sampling needs a value for parameter {name}")
        return self.params_map[name]

    def input_value(self, relation, args):
        key = (relation, tuple(args))
        if key in self.numeric_values:
            return self.numeric_values[key]
        return self.dataset.input_value(relation, tuple(args))

    def prob_value(self, relation, args):
        return self.assigned[(relation, tuple(args))]

    def objects(self):
        return range(self.dataset.n_objects)


def _prob_dependencies(model: Model, dataset: DataSet, rel: str, args: tuple[int, ...]):
    """Probabilistic atoms referenced by the ground formula of `rel(args)`.

    Conservative: all branches of WIF are included.
    """
    head_vars, formula = model.assignments[rel]
    binding = dict(zip(head_vars, args))
    deps: set = set()
    ctx = _SamplingContext(model, dataset, {}, {}, {})

    def walk(f, bnd):
        if isinstance(f, (Constant, Param)):
            return
        if isinstance(f, Atom):
            if model.relation(f.relation).kind == PROBABILISTIC:
                deps.add((f.relation, tuple(bnd[v] for v in f.args)))
            return
        if isinstance(f, (Plus, Minus, Times)):
            walk(f.left, bnd)
            walk(f.right, bnd)
            return
        if isinstance(f, Wif):
            walk(f.cond, bnd)
            walk(f.then, bnd)
            walk(f.orelse, bnd)
            return
        if isinstance(f, Combine):
            if f.forall:
                for combo in itertools.product(range(dataset.n_objects), repeat=len(f.forall)):
                    inner = dict(bnd)
                    inner.update(zip(f.forall, combo))
                    if not guard_holds(f.where, inner, ctx):
                        continue
                    for b in f.bodies:
                        walk(b, inner)
            else:
                for b in f.bodies:
                    walk(b, bnd)
            return
        raise TypeError(f"not a formula: {f!r}")

    walk(formula, binding)
    return deps


def forward_sample(
    model: Model,
    dataset: DataSet,
    n: int,
    seed: int = 0,
    params: Mapping[str, float] | None = None,
    numeric_values: Mapping[tuple, float] | None = None,
    sample_atoms: Sequence[tuple[str, tuple[int, ...]]] | None = None,
) -> DataSet:
    """Draw `n` independent joint instantiations of the probabilistic atoms
    by ancestral sampling, returning a dataset with `n` observation samples.

    By default every ground atom of every probabilistic relation is sampled;
    `sample_atoms` restricts the universe.  Numeric input values come from
    the dataset unless overridden in `numeric_values`.
    """
    if n <= 0:
        raise DataError(f"sample count must be positive, got {n}")
    if sample_atoms is None:
        sample_atoms = []
        for decl in model.relations.values():
            if decl.kind != PROBABILISTIC:
                continue
            for args in itertools.product(range(dataset.n_objects), repeat=decl.arity):
                sample_atoms.append((decl.name, args))
    atoms = [(rel, tuple(args)) for rel, args in sample_atoms]

    deps = {atom: _prob_dependencies(model, dataset, *atom) for atom in atoms}
    atom_set = set(atoms)
    order: list = []
    state: dict = {}

    def visit(atom):
        if state.get(atom) == 2:
            return
        if state.get(atom) == 1:
            raise GraphError(
                f"cyclic dependency among probabilistic atoms at {atom[0]}{atom[1]}"
            )
        state[atom] = 1
        for d in sorted(deps.get(atom, ())):
            if d not in atom_set:
                deps[d] = _prob_dependencies(model, dataset, *d)
                atom_set.add(d)
                atoms.append(d)
            visit(d)
        state[atom] = 2
        order.append(atom)

    for atom in list(atoms):
        visit(atom)

    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        assigned: dict = {}
        ctx = _SamplingContext(model, dataset, params, numeric_values, assigned)
        obs: dict = {}
        for rel, args in order:
            p = evaluate_probability(model, rel, args, ctx)
            bit = bool(rng.random() < p)
            assigned[(rel, args)] = 1.0 if bit else 0.0
            obs[(rel, args)] = bit
        samples.append(obs)
    return dataset.with_samples(samples)


# ---------------------------------------------------------------------------
# Alternation driver for incomplete data (continuous fit + MAP reassignment)


def alternate_fit_map(
    graph: LikelihoodGraph, cfg: FitConfig, rounds: int = 3
) -> FitResult:
    """Simple alternation: fit continuous leaves, then MAP-update indicators,
    repeated `rounds` times.  The first round uses the standard random
    indicator initialisation; later rounds keep the MAP assignment."""
    result = fit(graph, cfg)
    if not len(graph.indicator_slots) or rounds <= 1:
        return result
    bits = result.bits_best
    for r in range(1, rounds):
        buffer = graph.new_buffer()
        buffer.set_indicator_vector(bits)
        apply_leaf_values(buffer, result.x_best)
        _, _ = map_inference(graph, buffer=buffer, seed=cfg.seed + 1000 + r)
        bits = buffer.values[graph.indicator_slots].copy()
        cfg_round = FitConfig(
            restarts=cfg.restarts,
            max_iter=cfg.max_iter,
            tol=cfg.tol,
            patience=cfg.patience,
            step_init=cfg.step_init,
            step_grow=cfg.step_grow,
            step_shrink=cfg.step_shrink,
            seed=cfg.seed + r,
            init_indicators="keep",
            workers=cfg.workers,
        )
        new_result = fit(graph, cfg_round, keep_bits=bits)
        if new_result.best_ll > result.best_ll:
            result = new_result
        bits = result.bits_best
    return result
