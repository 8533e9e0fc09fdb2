"""Relational datasets: object domains, input valuations, observation samples.

Ground atoms are stored with integer object ids (dense 0..n-1); labels are
kept for I/O.  Probabilistic relations are three-valued per sample: an atom
can be observed true, observed false, explicitly unknown (a latent target),
or absent, in which case it contributes nothing to a likelihood.

Two file formats are supported: a native JSON layout and a plain edge list
for pure link data.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DataError
from .formula import BOOLEAN_INPUT, NUMERIC_INPUT, PROBABILISTIC

INF = float("inf")


class _Unknown:
    """Singleton marker for an explicitly-unknown observation."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNKNOWN"


UNKNOWN = _Unknown()

ObsValue = Union[bool, _Unknown]
AtomKey = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class DataRelation:
    """Schema entry for one relation as stored in a dataset."""

    name: str
    arity: int
    kind: str  # boolean-input | numeric-input | probabilistic
    lo: float = -INF
    hi: float = INF
    directed: bool = True
    closed_world: bool = True

    def __post_init__(self):
        if self.kind not in (BOOLEAN_INPUT, NUMERIC_INPUT, PROBABILISTIC):
            raise DataError(f"relation {self.name}: unknown kind {self.kind!r}")
        if self.arity < 0:
            raise DataError(f"relation {self.name}: negative arity")
        if self.lo > self.hi:
            raise DataError(f"relation {self.name}: empty range")


@dataclass
class DataSet:
    """Immutable-by-convention bundle of domain, inputs, and observation samples."""

    objects: list[str]
    relations: dict[str, DataRelation]
    inputs: dict[AtomKey, float]
    samples: list[dict[AtomKey, ObsValue]]
    _ids: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.objects:
            raise DataError("empty object list")
        if len(set(self.objects)) != len(self.objects):
            raise DataError("object labels are not unique")
        if not self.samples:
            raise DataError("dataset needs at least one observation sample")
        self._ids = {label: i for i, label in enumerate(self.objects)}
        self._validate()

    # -- identity -----------------------------------------------------------

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def id_of(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise DataError(f"unknown object label {label!r}") from None

    def label_of(self, oid: int) -> str:
        return self.objects[oid]

    # -- validation -----------------------------------------------------------

    def _validate(self) -> None:
        n = len(self.objects)
        for (rel, args), value in self.inputs.items():
            decl = self.relations.get(rel)
            if decl is None:
                raise DataError(f"input atom references undeclared relation {rel}")
            if decl.kind == PROBABILISTIC:
                raise DataError(f"input atom for probabilistic relation {rel}")
            if len(args) != decl.arity:
                raise DataError(f"atom {rel}{args}: arity mismatch")
            if any(a < 0 or a >= n for a in args):
                raise DataError(f"atom {rel}{args}: dangling object reference")
            if decl.kind == NUMERIC_INPUT:
                if not (decl.lo <= value <= decl.hi):
                    raise DataError(
                        f"atom {rel}{args}: value {value} outside [{decl.lo}, {decl.hi}]"
                    )
        for sample in self.samples:
            for (rel, args), value in sample.items():
                decl = self.relations.get(rel)
                if decl is None:
                    raise DataError(f"observed atom references undeclared relation {rel}")
                if decl.kind != PROBABILISTIC:
                    raise DataError(f"observation of non-probabilistic relation {rel}")
                if len(args) != decl.arity:
                    raise DataError(f"atom {rel}{args}: arity mismatch")
                if any(a < 0 or a >= n for a in args):
                    raise DataError(f"atom {rel}{args}: dangling object reference")
                if value is not UNKNOWN and not isinstance(value, bool):
                    raise DataError(f"atom {rel}{args}: bad observation value {value!r}")

    # -- queries ----------------------------------------------------------------

    def relation(self, name: str) -> DataRelation:
        try:
            return self.relations[name]
        except KeyError:
            raise DataError(f"unknown relation {name!r}") from None

    def input_value(self, rel: str, args: tuple[int, ...]) -> float:
        decl = self.relation(rel)
        key = (rel, tuple(args))
        if key in self.inputs:
            return float(self.inputs[key])
        if decl.kind == BOOLEAN_INPUT and decl.closed_world:
            return 0.0
        raise DataError(f"no value for input atom {rel}{tuple(args)}")

    def sample_status(self, sample_index: int, rel: str, args: tuple[int, ...]):
        """True / False / UNKNOWN for listed atoms, None for absent ones."""
        return self.samples[sample_index].get((rel, tuple(args)))

    def get_value(self, atom: AtomKey, sample_index: int = 0):
        """Point query: observed value, UNKNOWN, or the closed-world default."""
        rel, args = atom[0], tuple(atom[1])
        decl = self.relation(rel)
        if decl.kind == PROBABILISTIC:
            status = self.samples[sample_index].get((rel, args))
            if status is None:
                return False if decl.closed_world else UNKNOWN
            return status
        if decl.kind == BOOLEAN_INPUT:
            return bool(self.input_value(rel, args))
        return self.input_value(rel, args)

    def true_false_counts(self, rel: str) -> tuple[int, int]:
        """Observed true/false counts for one relation, totalled over samples."""
        n1 = n0 = 0
        for sample in self.samples:
            for (r, _), v in sample.items():
                if r != rel or v is UNKNOWN:
                    continue
                if v:
                    n1 += 1
                else:
                    n0 += 1
        return n1, n0

    # -- derived datasets ---------------------------------------------------------

    def with_samples(self, samples: list[dict[AtomKey, ObsValue]]) -> "DataSet":
        return DataSet(list(self.objects), dict(self.relations), dict(self.inputs), samples)

    def extended(
        self,
        new_objects: Sequence[str] = (),
        new_relations: Mapping[str, DataRelation] | None = None,
        new_inputs: Mapping[AtomKey, float] | None = None,
    ) -> "DataSet":
        """Copy with extra objects / relation declarations / input values."""
        relations = dict(self.relations)
        relations.update(new_relations or {})
        inputs = dict(self.inputs)
        inputs.update(new_inputs or {})
        return DataSet(
            list(self.objects) + list(new_objects), relations, inputs,
            [dict(s) for s in self.samples],
        )


# ---------------------------------------------------------------------------
# Subsampling


def subsample_false_links(
    dataset: DataSet, relations: Sequence[str], q: float, seed: int
) -> DataSet:
    """Keep every true atom and a uniform ceil(q%) subset of the false atoms.

    Non-retained false atoms are dropped from the observation samples, so
    they no longer contribute likelihood factors.  Deterministic in `seed`.
    """
    if not (0 < q <= 100):
        raise DataError(f"subsample percentage {q} outside (0, 100]")
    for rel in relations:
        decl = dataset.relation(rel)
        if decl.kind != PROBABILISTIC:
            raise DataError(f"cannot subsample non-probabilistic relation {rel}")
    if q == 100:
        return dataset.with_samples([dict(s) for s in dataset.samples])

    rng = np.random.default_rng(seed)
    listed = set(relations)
    new_samples = []
    for sample in dataset.samples:
        out = dict(sample)
        for rel in relations:
            false_atoms = sorted(
                key for key, v in sample.items() if key[0] == rel and v is False
            )
            keep = math.ceil(len(false_atoms) * q / 100.0)
            chosen = rng.choice(len(false_atoms), size=keep, replace=False) if false_atoms else []
            kept = {false_atoms[i] for i in np.sort(np.asarray(chosen, dtype=int))}
            for key in false_atoms:
                if key not in kept:
                    del out[key]
        new_samples.append(out)
    return dataset.with_samples(new_samples)


# ---------------------------------------------------------------------------
# Native JSON format


_KIND_ALIASES = {
    "boolean-input": BOOLEAN_INPUT,
    "numeric-input": NUMERIC_INPUT,
    "probabilistic": PROBABILISTIC,
}


def _dataset_from_json(doc: dict) -> DataSet:
    try:
        labels = list(doc["objects"])
        rel_docs = doc["relations"]
    except KeyError as e:
        raise DataError(f"native-json dataset missing key {e}") from None
    if not labels:
        raise DataError("empty object list")
    ids = {label: i for i, label in enumerate(labels)}
    if len(ids) != len(labels):
        raise DataError("object labels are not unique")

    relations: dict[str, DataRelation] = {}
    for rd in rel_docs:
        kind = _KIND_ALIASES.get(rd.get("kind"))
        if kind is None:
            raise DataError(f"relation {rd.get('name')}: unknown kind {rd.get('kind')!r}")
        lo, hi = -INF, INF
        if rd.get("range") is not None:
            lo, hi = (_parse_bound(b) for b in rd["range"])
        relations[rd["name"]] = DataRelation(
            name=rd["name"],
            arity=int(rd["arity"]),
            kind=kind,
            lo=lo,
            hi=hi,
            directed=bool(rd.get("directed", True)),
            closed_world=bool(rd.get("closed_world", kind != PROBABILISTIC)),
        )

    def to_ids(arg_labels) -> tuple[int, ...]:
        try:
            return tuple(ids[a] for a in arg_labels)
        except KeyError as e:
            raise DataError(f"dangling object reference {e}") from None

    inputs: dict[AtomKey, float] = {}
    for entry in doc.get("input", ()):
        rel = entry["rel"]
        args = to_ids(entry["args"])
        value = entry["value"]
        inputs[(rel, args)] = float(value)

    samples: list[dict[AtomKey, ObsValue]] = []
    for sample_doc in doc.get("samples", ()):
        sample: dict[AtomKey, ObsValue] = {}
        for entry in sample_doc:
            rel = entry["rel"]
            args = to_ids(entry["args"])
            raw = entry["value"]
            if raw == "unknown":
                sample[(rel, args)] = UNKNOWN
            elif isinstance(raw, bool):
                sample[(rel, args)] = raw
            else:
                raise DataError(f"bad observation value {raw!r} for {rel}")
        samples.append(sample)
    if not samples:
        raise DataError("native-json dataset has no samples")

    _apply_symmetry(relations, inputs, samples)
    _apply_closed_world(labels, relations, samples)
    return DataSet(labels, relations, inputs, samples)


def _parse_bound(b) -> float:
    if b == "inf":
        return INF
    if b == "-inf":
        return -INF
    return float(b)


def _bound_to_json(x: float):
    if x == INF:
        return "inf"
    if x == -INF:
        return "-inf"
    return x


def _apply_symmetry(relations, inputs, samples) -> None:
    """Store undirected arity-2 relations as their symmetric closure."""
    undirected = {r.name for r in relations.values() if not r.directed and r.arity == 2}
    if not undirected:
        return
    for (rel, args), value in list(inputs.items()):
        if rel in undirected:
            mirror = (rel, (args[1], args[0]))
            if mirror in inputs and inputs[mirror] != value:
                raise DataError(f"conflicting values for undirected atom {rel}{args}")
            inputs[mirror] = value
    for sample in samples:
        for (rel, args), value in list(sample.items()):
            if rel in undirected:
                mirror = (rel, (args[1], args[0]))
                if mirror in sample and sample[mirror] is not value:
                    raise DataError(f"conflicting values for undirected atom {rel}{args}")
                sample[mirror] = value


def _apply_closed_world(labels, relations, samples) -> None:
    """Materialise false observations for unlisted atoms of closed-world
    probabilistic relations.  For arity 2 all ordered pairs of distinct
    objects are covered; self-pairs stay absent unless listed explicitly."""
    n = len(labels)
    for decl in relations.values():
        if decl.kind != PROBABILISTIC or not decl.closed_world:
            continue
        if decl.arity == 1:
            universe = [(i,) for i in range(n)]
        elif decl.arity == 2:
            universe = [(i, j) for i in range(n) for j in range(n) if i != j]
        elif decl.arity == 0:
            universe = [()]
        else:
            universe = None  # too generic to enumerate implicitly
        if universe is None:
            continue
        for sample in samples:
            for args in universe:
                sample.setdefault((decl.name, args), False)


def _dataset_to_json(dataset: DataSet) -> dict:
    rel_docs = []
    for decl in dataset.relations.values():
        rd = {"name": decl.name, "arity": decl.arity, "kind": decl.kind}
        if decl.kind == NUMERIC_INPUT and (decl.lo, decl.hi) != (-INF, INF):
            rd["range"] = [_bound_to_json(decl.lo), _bound_to_json(decl.hi)]
        if not decl.directed:
            rd["directed"] = False
        rd["closed_world"] = decl.closed_world
        rel_docs.append(rd)
    input_docs = [
        {"rel": rel, "args": [dataset.label_of(a) for a in args], "value": value}
        for (rel, args), value in dataset.inputs.items()
    ]
    sample_docs = []
    for sample in dataset.samples:
        sample_docs.append(
            [
                {
                    "rel": rel,
                    "args": [dataset.label_of(a) for a in args],
                    "value": "unknown" if value is UNKNOWN else value,
                }
                for (rel, args), value in sample.items()
            ]
        )
    return {
        "objects": list(dataset.objects),
        "relations": rel_docs,
        "input": input_docs,
        "samples": sample_docs,
    }


# ---------------------------------------------------------------------------
# Edge-list format


def _dataset_from_edge_list(text: str, path: str = "<edge-list>") -> DataSet:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"{path}: empty edge-list file")
    header = lines[0]
    m_hdr = re.match(
        r"#nodes\s+(\d+)\s+#relations\s+(\d+)\s+directed:([01](?:,[01])*)\s*$", header
    )
    if m_hdr is None:
        raise DataError(f"{path}: bad edge-list header {header!r}")
    n = int(m_hdr.group(1))
    k = int(m_hdr.group(2))
    directed_flags = [c == "1" for c in m_hdr.group(3).split(",")]
    if len(directed_flags) != k:
        raise DataError(f"{path}: {k} relations but {len(directed_flags)} directed flags")
    if n <= 0:
        raise DataError(f"{path}: empty object list")

    labels = [str(i) for i in range(1, n + 1)]
    rel_names = ["link"] if k == 1 else [f"link{i}" for i in range(1, k + 1)]
    relations = {
        name: DataRelation(name, 2, PROBABILISTIC, directed=directed_flags[i], closed_world=True)
        for i, name in enumerate(rel_names)
    }

    sample: dict[AtomKey, ObsValue] = {}
    for ln in lines[1:]:
        if ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise DataError(f"{path}: bad edge line {ln!r}")
        try:
            rel_idx = int(parts[0])
            src = int(parts[1])
            dst = int(parts[2])
        except ValueError:
            raise DataError(f"{path}: bad edge line {ln!r}") from None
        if not (1 <= rel_idx <= k):
            raise DataError(f"{path}: relation index {rel_idx} out of range")
        if not (1 <= src <= n and 1 <= dst <= n):
            raise DataError(f"{path}: dangling object reference in {ln!r}")
        name = rel_names[rel_idx - 1]
        sample[(name, (src - 1, dst - 1))] = True
        if not directed_flags[rel_idx - 1]:
            sample[(name, (dst - 1, src - 1))] = True

    samples = [sample]
    _apply_closed_world(labels, relations, samples)
    return DataSet(labels, relations, {}, samples)


# ---------------------------------------------------------------------------
# Entry points


def load_dataset(path, format: str | None = None) -> DataSet:
    """Load a dataset file.  `format` is 'native-json' or 'edge-list';
    inferred from the extension (.json vs anything else) when omitted."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    if format is None:
        format = "native-json" if p.suffix == ".json" else "edge-list"
    text = p.read_text()
    if format == "native-json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"{p}: invalid JSON: {e}") from None
        return _dataset_from_json(doc)
    if format == "edge-list":
        return _dataset_from_edge_list(text, str(p))
    raise DataError(f"unknown dataset format {format!r}")


def loads_dataset(text: str, format: str = "native-json") -> DataSet:
    if format == "native-json":
        return _dataset_from_json(json.loads(text))
    if format == "edge-list":
        return _dataset_from_edge_list(text)
    raise DataError(f"unknown dataset format {format!r}")


def save_dataset(dataset: DataSet, path) -> None:
    Path(path).write_text(json.dumps(_dataset_to_json(dataset), indent=1))


def dumps_dataset(dataset: DataSet) -> str:
    return json.dumps(_dataset_to_json(dataset), indent=1)
