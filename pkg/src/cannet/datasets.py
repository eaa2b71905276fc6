"""Categorical data handling and synthetic oracle generators."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, ParseError, SchemaMismatch
from .scm import CausalGraph, topological_order


@dataclass(frozen=True)
class VariableSchema:
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.names) != len(self.cardinalities):
            raise ContractViolation("names and cardinalities differ in length")
        if len(set(self.names)) != len(self.names):
            raise ContractViolation("variable names must be unique")
        if any(c < 2 for c in self.cardinalities):
            raise ContractViolation("every variable needs cardinality >= 2")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        """Width of the one-hot encoding."""
        return sum(self.cardinalities)

    @property
    def offsets(self) -> list[int]:
        return [0] + list(np.cumsum(self.cardinalities)[:-1])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ContractViolation(f"unknown variable {name!r}") from None

    def to_dict(self) -> dict:
        return {"names": list(self.names), "cardinalities": list(self.cardinalities)}

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSchema":
        return cls(tuple(d["names"]), tuple(d["cardinalities"]))

    @classmethod
    def binary(cls, names: Sequence[str]) -> "VariableSchema":
        return cls(tuple(names), (2,) * len(names))


@dataclass
class CategoricalDataset:
    schema: VariableSchema
    values: np.ndarray
    truth: CausalGraph | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64).reshape(-1, len(self.schema))
        card = np.asarray(self.schema.cardinalities)
        if self.values.size and ((self.values < 0) | (self.values >= card)).any():
            raise SchemaMismatch("dataset value outside its variable's cardinality")

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, idx) -> "CategoricalDataset":
        return CategoricalDataset(self.schema, self.values[idx], self.truth)


# --------------------------------------------------------------------------- CSV


def load_categorical_csv(path, schema: VariableSchema | None = None, one_based: bool = False
                         ) -> CategoricalDataset:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if schema is not None and tuple(header) != schema.names:
        raise ParseError(f"header {header} does not match schema {list(schema.names)}", row=1)
    values = np.zeros((len(rows) - 1, len(header)), dtype=np.int64)
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r + 2)
        for c, cell in enumerate(row):
            try:
                v = int(cell.strip())
            except ValueError:
                raise ParseError(f"non-integer cell {cell!r}", row=r + 2, column=header[c]) from None
            if one_based:
                v -= 1
            if v < 0 or (schema is not None and v >= schema.cardinalities[c]):
                hi = schema.cardinalities[c] - 1 if schema is not None else "inf"
                raise ParseError(f"value {cell.strip()} outside valid indices 0..{hi}",
                                 row=r + 2, column=header[c])
            values[r, c] = v
    if schema is None:
        card = values.max(axis=0) + 1 if len(values) else np.full(len(header), 2)
        schema = VariableSchema(tuple(header), tuple(max(2, int(k)) for k in card))
    return CategoricalDataset(schema, values)


def save_categorical_csv(path, schema: VariableSchema, values: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names)
        w.writerows(np.asarray(values, dtype=np.int64).tolist())


# --------------------------------------------------------------------------- encoding


def one_hot_encode(data: CategoricalDataset | np.ndarray, schema: VariableSchema | None = None) -> np.ndarray:
    if isinstance(data, CategoricalDataset):
        schema, values = data.schema, data.values
    else:
        values = np.asarray(data, dtype=np.int64).reshape(-1, len(schema))
    out = np.zeros((values.shape[0], schema.width), dtype=np.float64)
    rows = np.arange(values.shape[0])
    for off, col in zip(schema.offsets, values.T):
        out[rows, off + col] = 1.0
    return out


def one_hot_decode(matrix, schema: VariableSchema) -> np.ndarray:
    """Per-block argmax; ties resolve to the lowest category."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != schema.width:
        raise SchemaMismatch(f"expected width {schema.width}, got shape {matrix.shape}")
    cols = [matrix[:, off:off + k].argmax(axis=1) for off, k in zip(schema.offsets, schema.cardinalities)]
    return np.stack(cols, axis=1).astype(np.int64) if cols else np.zeros((len(matrix), 0), np.int64)


def train_test_split(dataset: CategoricalDataset, fraction: float = 0.9, seed: int = 0):
    if not 0 < fraction < 1:
        raise ContractViolation("fraction must lie in (0, 1)")
    m = len(dataset)
    perm = np.random.default_rng(seed).permutation(m)
    k = int(round(m * fraction))
    return dataset.subset(np.sort(perm[:k])), dataset.subset(np.sort(perm[k:]))


# --------------------------------------------------------------------------- synthetic SCM data


@dataclass
class SyntheticScmSpec:
    """Categorical SCM with softmax links.

    ``P(x_j = c | parents) = softmax_c(score_c / noise_scale_j)`` where
    ``score_c = bias_j[c] + sum_i weight_ij * [c == x_i mod card_j]``: each
    parent pulls its child towards the category matching its own.
    """

    schema: VariableSchema
    graph: CausalGraph
    weights: dict[tuple[int, int], float]
    noise_scale: tuple[float, ...] | None = None
    bias: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        n = len(self.schema)
        if self.graph.n != n:
            raise ContractViolation("graph size does not match schema")
        if set(self.weights) != set(self.graph.edges):
            raise ContractViolation("weights must be given for exactly the graph's edges")
        if any(not math.isfinite(w) for w in self.weights.values()):
            raise ContractViolation("weights must be finite")
        if self.noise_scale is None:
            self.noise_scale = (1.0,) * n
        if self.bias is None:
            self.bias = tuple((0.0,) * k for k in self.schema.cardinalities)
        if any(s <= 0 for s in self.noise_scale):
            raise ContractViolation("noise scales must be positive")

    def conditional(self, j: int, parent_values: dict[int, int]) -> np.ndarray:
        """Exact ``P(x_j | parents)`` as a probability vector."""
        k = self.schema.cardinalities[j]
        score = np.array(self.bias[j], dtype=np.float64)
        for i in self.graph.parents(j):
            score[parent_values[i] % k] += self.weights[(i, j)]
        z = score / self.noise_scale[j]
        z = np.exp(z - z.max())
        return z / z.sum()

    def joint(self) -> dict[tuple[int, ...], float]:
        """Brute-force enumeration of the factorised joint (small schemas only)."""
        out = {}
        for combo in np.ndindex(*self.schema.cardinalities):
            p = 1.0
            for j in range(len(self.schema)):
                p *= self.conditional(j, {i: combo[i] for i in self.graph.parents(j)})[combo[j]]
            out[tuple(int(c) for c in combo)] = p
        return out

    def to_dict(self) -> dict:
        names = self.schema.names
        return {
            "nodes": [
                {"name": nm, "cardinality": k, "noise_scale": s, "bias": list(b)}
                for nm, k, s, b in zip(names, self.schema.cardinalities, self.noise_scale, self.bias)
            ],
            "edges": [{"src": names[i], "dst": names[j], "weight": w}
                      for (i, j), w in sorted(self.weights.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScmSpec":
        nodes = d["nodes"]
        names = tuple(nd["name"] for nd in nodes)
        schema = VariableSchema(names, tuple(nd.get("cardinality", 2) for nd in nodes))
        idx = {nm: k for k, nm in enumerate(names)}
        weights = {}
        for e in d.get("edges", []):
            key = (idx[e["src"]], idx[e["dst"]])
            if key in weights:
                raise ContractViolation(f"duplicate edge {e['src']} -> {e['dst']}")
            weights[key] = float(e["weight"])
        if not _acyclic(weights.keys(), len(names)):
            raise ContractViolation("synthetic SCM spec is cyclic")
        graph = CausalGraph(len(names), frozenset(weights), names)
        noise = tuple(float(nd.get("noise_scale", 1.0)) for nd in nodes)
        bias = tuple(tuple(float(b) for b in nd.get("bias", [0.0] * schema.cardinalities[k]))
                     for k, nd in enumerate(nodes))
        return cls(schema, graph, weights, noise, bias)

    @classmethod
    def from_json(cls, path) -> "SyntheticScmSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _acyclic(edges, n) -> bool:
    from .scm import is_dag
    return is_dag(list(edges), n)


def synth_scm_dataset(spec: SyntheticScmSpec, m: int, seed: int = 0) -> CategoricalDataset:
    """Ancestral sampling from ``spec``; the true graph travels with the dataset."""
    if m < 1:
        raise ContractViolation("m must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(spec.schema)
    values = np.zeros((m, n), dtype=np.int64)
    for j in topological_order(spec.graph):
        k = spec.schema.cardinalities[j]
        score = np.tile(np.asarray(spec.bias[j], dtype=np.float64), (m, 1))
        for i in spec.graph.parents(j):
            score[np.arange(m), values[:, i] % k] += spec.weights[(i, j)]
        z = score / spec.noise_scale[j]
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(m)
        values[:, j] = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), k - 1)
    return CategoricalDataset(spec.schema, values, spec.graph)


def random_scm_spec(n: int, edge_prob: float = 0.4, weight: tuple[float, float] = (2.0, 3.0),
                    seed: int = 0) -> SyntheticScmSpec:
    """Random binary SCM over a random DAG (edges follow a random node order)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    weights = {}
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < edge_prob:
                weights[(int(order[a]), int(order[b]))] = float(rng.uniform(*weight))
    names = tuple(f"x{i}" for i in range(n))
    schema = VariableSchema.binary(names)
    graph = CausalGraph(n, frozenset(weights), names)
    return SyntheticScmSpec(schema, graph, weights)


# --------------------------------------------------------------------------- synthetic images


@dataclass
class RendererParams:
    """Each label owns one square block; label 1 lifts the block by ``intensity``."""

    block: int = 5
    background: float = -0.6
    intensity: float = 1.2
    noise: float = 0.05

    def to_dict(self) -> dict:
        return {"block": self.block, "background": self.background,
                "intensity": self.intensity, "noise": self.noise}


def label_blocks(k: int, image_shape: tuple[int, int, int], block: int) -> list[tuple[int, int]]:
    """Top-left corners of the label blocks, laid out on a grid with one-pixel gaps."""
    h, w = image_shape[:2]
    per_row = max(1, (w - 1) // (block + 1))
    corners = []
    for i in range(k):
        r, c = divmod(i, per_row)
        top, left = 1 + r * (block + 1), 1 + c * (block + 1)
        if top + block > h or left + block > w:
            raise ContractViolation(f"{k} blocks of size {block} do not fit in {h}x{w}")
        corners.append((top, left))
    return corners


def render_images(labels: np.ndarray, image_shape=(16, 16, 1), params: RendererParams | None = None,
                  seed: int = 0) -> np.ndarray:
    params = params or RendererParams()
    labels = np.asarray(labels, dtype=np.int64)
    m, k = labels.shape
    h, w, ch = image_shape
    rng = np.random.default_rng(seed)
    imgs = np.full((m, h, w, ch), params.background, dtype=np.float64)
    for j, (top, left) in enumerate(label_blocks(k, image_shape, params.block)):
        on = labels[:, j] == 1
        imgs[on, top:top + params.block, left:left + params.block, :] += params.intensity
    imgs += params.noise * rng.standard_normal(imgs.shape)
    return np.clip(imgs, -1.0, 1.0)


def synth_image_dataset(label_spec: SyntheticScmSpec, params: RendererParams | None = None, m: int = 1000,
                        image_shape=(16, 16, 1), seed: int = 0) -> tuple[np.ndarray, CategoricalDataset]:
    """Labels from ``label_spec`` rendered to images; returns ``(images, labels)``."""
    if any(c != 2 for c in label_spec.schema.cardinalities):
        raise ContractViolation("image labels must be binary")
    labels = synth_scm_dataset(label_spec, m, seed)
    images = render_images(labels.values, image_shape, params, seed=seed + 1)
    return images, labels


def shapes_label_spec() -> SyntheticScmSpec:
    """Three binary labels on the DAG ``shape -> fill``, ``shape -> band``, ``fill -> band``."""
    names = ("shape", "fill", "band")
    schema = VariableSchema.binary(names)
    weights = {(0, 1): 2.0, (0, 2): 1.5, (1, 2): 1.0}
    graph = CausalGraph(3, frozenset(weights), names)
    return SyntheticScmSpec(schema, graph, weights)


def chain_spec(weight: float = 3.0) -> SyntheticScmSpec:
    """Binary chain ``a -> b`` with ``P(a=1) = 0.5``; ``weight`` sets the coupling."""
    return SyntheticScmSpec.from_dict({"nodes": [{"name": "a"}, {"name": "b"}],
                                       "edges": [{"src": "a", "dst": "b", "weight": weight}]})


def collider_spec(weight: float = 3.0) -> SyntheticScmSpec:
    """Five binary nodes: ``a -> c <- b`` feeding ``c -> d`` and ``c -> e``.

    The unshielded collider at ``c`` makes every edge orientation
    identifiable from the observational distribution.
    """
    edges = [("a", "c"), ("b", "c"), ("c", "d"), ("c", "e")]
    return SyntheticScmSpec.from_dict({"nodes": [{"name": nm} for nm in "abcde"],
                                       "edges": [{"src": s, "dst": d, "weight": weight} for s, d in edges]})


def bipartite_spec(weight: float = 3.0) -> SyntheticScmSpec:
    """Five binary nodes, three sources feeding two sinks: ``a -> d <- b -> e <- c``.

    Both sinks are unshielded colliders, so every edge is oriented by the
    observational distribution.
    """
    edges = [("a", "d"), ("b", "d"), ("b", "e"), ("c", "e")]
    return SyntheticScmSpec.from_dict({"nodes": [{"name": nm} for nm in "abcde"],
                                       "edges": [{"src": s, "dst": d, "weight": weight} for s, d in edges]})


PRESETS = {"chain": chain_spec, "collider": collider_spec, "bipartite": bipartite_spec,
           "shapes": shapes_label_spec}


def preset_spec(name: str) -> SyntheticScmSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ContractViolation(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
