"""Linear SCM layer: weighted adjacency, masked intervention solve, acyclicity
penalty, and the small graph toolkit used around it.

Convention: ``A[i, j]`` is the weight of edge ``i -> j``.  Intervention masks
follow the formula semantics: ``alpha[i] == 1`` keeps node ``i``'s structural
equation, ``alpha[i] == 0`` replaces it with ``C[i]``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .engine import DTYPE
from .errors import ContractViolation, CyclicAfterThreshold, SchemaMismatch, SingularSystem

DEFAULT_BETA = 1.0
DEFAULT_TAU = 0.3


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# --------------------------------------------------------------------------- acyclicity


def acyclicity_penalty(A, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """``tr[(I + beta * A∘A)^n] - n``; differentiable in ``A``."""
    if beta <= 0:
        raise ContractViolation("beta must be > 0")
    A = _as_tensor(A)
    n = A.shape[0]
    M = torch.eye(n, dtype=DTYPE) + beta * A * A
    return torch.trace(torch.linalg.matrix_power(M, n)) - n


def acyclicity_gradient(A, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """Closed-form gradient ``2*beta*n * [(I + beta*A∘A)^(n-1)]^T ∘ A``."""
    if beta <= 0:
        raise ContractViolation("beta must be > 0")
    A = _as_tensor(A).detach()
    n = A.shape[0]
    M = torch.eye(n, dtype=DTYPE) + beta * A * A
    return 2.0 * beta * n * torch.linalg.matrix_power(M, n - 1).T * A


# --------------------------------------------------------------------------- interventions


@dataclass(frozen=True)
class InterventionSpec:
    """Node index -> interventional value.  Built from a mapping or from pairs;
    pairs are checked for duplicate nodes."""

    assignments: tuple[tuple[int, float], ...] = ()

    @classmethod
    def of(cls, spec: "InterventionSpec | Mapping[int, float] | Iterable[tuple[int, float]] | None"
           ) -> "InterventionSpec":
        if spec is None:
            return cls()
        if isinstance(spec, InterventionSpec):
            return spec
        items = spec.items() if isinstance(spec, Mapping) else spec
        return cls(tuple((int(i), float(v)) for i, v in items))

    def nodes(self) -> list[int]:
        return [i for i, _ in self.assignments]

    def __len__(self) -> int:
        return len(self.assignments)


def compile_intervention(spec, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Turn an intervention into the ``(alpha, C)`` vectors of the masked transform."""
    spec = InterventionSpec.of(spec)
    alpha = torch.ones(n, dtype=DTYPE)
    C = torch.zeros(n, dtype=DTYPE)
    seen = set()
    for i, v in spec.assignments:
        if not 0 <= i < n:
            raise ContractViolation(f"intervened node {i} out of range for n={n}")
        if i in seen:
            raise ContractViolation(f"node {i} intervened more than once")
        seen.add(i)
        alpha[i] = 0.0
        C[i] = v
    return alpha, C


def _support_order(mask: np.ndarray) -> list[int] | None:
    """Topological order of the directed support ``mask[i, j] -> edge i->j``, or None if cyclic."""
    n = mask.shape[0]
    indeg = mask.sum(axis=0).astype(int)
    queue = deque(i for i in range(n) if indeg[i] == 0)
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in np.flatnonzero(mask[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    return order if len(order) == n else None


class _MaskedSolve(torch.autograd.Function):
    """``X = M^{-1} B``.  Forward uses substitution in topological order when the
    off-diagonal support of ``M`` is acyclic, dense LU otherwise; the backward
    pass is the full dense adjoint, so every entry of ``M`` gets its true
    gradient even where the current support is zero."""

    @staticmethod
    def forward(ctx, M, B):
        n = M.shape[0]
        support = (M != 0).numpy().T.copy()
        np.fill_diagonal(support, False)
        order = _support_order(support)
        if order is not None and bool(torch.all(torch.diagonal(M) == 1)):
            perm = torch.tensor(order)
            L = M[perm][:, perm]
            Xp = torch.linalg.solve_triangular(L, B[perm], upper=False, unitriangular=True)
            X = Xp[torch.argsort(perm)]
        else:
            X, info = torch.linalg.solve_ex(M, B)
            if int(info) != 0 or not bool(torch.isfinite(X).all()):
                raise SingularSystem("masked SCM system is singular", float(torch.linalg.cond(M)))
        ctx.save_for_backward(M, X)
        return X

    @staticmethod
    def backward(ctx, grad_x):
        M, X = ctx.saved_tensors
        G = torch.linalg.solve(M.T, grad_x)
        return -G @ X.T, G


def scm_transform(A, Z, alpha=None, C=None) -> torch.Tensor:
    """Solve ``(I - alpha∘A^T) X = alpha∘Z + (1-alpha)∘C`` row-wise for a batch ``Z`` of shape (m, n).

    When the support of the masked system is acyclic it is solved by
    substitution in topological order, so each node only ever reads its
    ancestors (intervention locality holds bit for bit).  A cyclic support,
    common mid-training, falls back to dense LU with partial pivoting.
    Intervened coordinates equal ``C`` exactly.
    """
    A = _as_tensor(A)
    Z = _as_tensor(Z)
    n = A.shape[0]
    if Z.dim() == 1:
        Z = Z.unsqueeze(0)
    alpha = torch.ones(n, dtype=DTYPE) if alpha is None else _as_tensor(alpha)
    C = torch.zeros(n, dtype=DTYPE) if C is None else _as_tensor(C)
    if Z.shape[1] != n:
        raise SchemaMismatch(f"noise width {Z.shape[1]} does not match {n} nodes")
    # alpha broadcast down the rows of A^T: row i of the system loses node i's parents
    M = torch.eye(n, dtype=DTYPE) - alpha.unsqueeze(1) * A.T
    rhs = alpha * Z + (1.0 - alpha) * C
    X = _MaskedSolve.apply(M, rhs.T).T
    return torch.where(alpha != 0, X, C.expand_as(X))


def ancestral_sample(A, Z) -> np.ndarray:
    """Reference sampler: visit nodes in topological order, ``x_i = sum_j A[j,i] x_j + z_i``."""
    A = np.asarray(A, dtype=np.float64)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    order = _support_order(A != 0)
    if order is None:
        raise ContractViolation("ancestral sampling needs an acyclic A")
    X = np.zeros_like(Z)
    for i in order:
        acc = Z[:, i].copy()
        for j in np.flatnonzero(A[:, i]):
            acc += A[j, i] * X[:, j]
        X[:, i] = acc
    return X


# --------------------------------------------------------------------------- graphs


def is_dag(edges: Iterable[tuple[int, int]], n: int | None = None) -> bool:
    edges = list(edges)
    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    mask = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        if i == j:
            return False
        mask[i, j] = True
    return _support_order(mask) is not None


@dataclass(frozen=True)
class CausalGraph:
    """Binary DAG over ``n`` nodes; construction fails on cycles."""

    n: int
    edges: frozenset = field(default_factory=frozenset)
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        for i, j in edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ContractViolation(f"edge {i}->{j} out of range for n={self.n}")
        if not is_dag(edges, self.n):
            raise ContractViolation("graph contains a directed cycle")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
            if len(self.names) != self.n:
                raise ContractViolation("names must match node count")

    @classmethod
    def from_adjacency(cls, adj, names=None) -> "CausalGraph":
        adj = np.asarray(adj)
        return cls(adj.shape[0], frozenset(zip(*map(list, np.nonzero(adj)))), names)

    def adjacency(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=int)
        for i, j in self.edges:
            out[i, j] = 1
        return out

    def node_names(self) -> tuple[str, ...]:
        return self.names if self.names is not None else tuple(f"x{i}" for i in range(self.n))

    def parents(self, j: int) -> list[int]:
        return sorted(i for i, k in self.edges if k == j)

    def children(self, i: int) -> list[int]:
        return sorted(k for j, k in self.edges if j == i)


def topological_order(graph) -> list[int]:
    if isinstance(graph, CausalGraph):
        mask = graph.adjacency().astype(bool)
    else:
        mask = np.asarray(graph) != 0
    order = _support_order(mask)
    if order is None:
        raise ContractViolation("topological order requested for a cyclic graph")
    return order


def descendants(graph, i: int) -> set[int]:
    """Nodes reachable from ``i`` (excluding ``i``); accepts a graph or an adjacency/support matrix."""
    mask = graph.adjacency().astype(bool) if isinstance(graph, CausalGraph) else (np.asarray(graph) != 0)
    seen: set[int] = set()
    stack = [i]
    while stack:
        k = stack.pop()
        for j in np.flatnonzero(mask[k]):
            j = int(j)
            if j not in seen and j != i:
                seen.add(j)
                stack.append(j)
    return seen


def extract_graph(A, tau: float = DEFAULT_TAU, names=None) -> CausalGraph:
    """Edges where ``|A[i, j]| > tau``."""
    if tau <= 0:
        raise ContractViolation("tau must be > 0")
    A = _as_tensor(A).detach().numpy()
    mask = np.abs(A) > tau
    np.fill_diagonal(mask, False)
    if _support_order(mask) is None:
        raise CyclicAfterThreshold(f"thresholded support at tau={tau} contains a cycle")
    return CausalGraph.from_adjacency(mask, names)


# --------------------------------------------------------------------------- export


def graph_to_edges(graph: CausalGraph) -> str:
    """One ``src -> dst`` line per edge after a ``# nodes:`` line, so isolated nodes survive."""
    names = graph.node_names()
    head = "# nodes: " + " ".join(names) + "\n"
    return head + "".join(f"{names[i]} -> {names[j]}\n" for i, j in sorted(graph.edges))


def graph_from_edges(text: str, names: Sequence[str] | None = None) -> CausalGraph:
    """Parse ``src -> dst`` lines.

    Without ``names`` the node list comes from a ``# nodes:`` line if present,
    otherwise nodes are numbered in order of appearance.
    """
    pairs = []
    declared = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# nodes:"):
            declared = line[len("# nodes:"):].split()
            continue
        if not line or line.startswith("#"):
            continue
        if "->" not in line:
            raise ContractViolation(f"bad edge line {line!r}")
        src, dst = (s.strip() for s in line.split("->", 1))
        pairs.append((src, dst))
    if names is None and declared is not None:
        names = declared
    if names is None:
        order: list[str] = []
        for src, dst in pairs:
            for s in (src, dst):
                if s not in order:
                    order.append(s)
        names = order
    index = {nm: k for k, nm in enumerate(names)}
    try:
        edges = frozenset((index[s], index[d]) for s, d in pairs)
    except KeyError as exc:
        raise ContractViolation(f"unknown node {exc.args[0]!r}") from None
    return CausalGraph(len(names), edges, tuple(names))


def graph_to_dot(graph: CausalGraph) -> str:
    names = graph.node_names()
    lines = ["digraph G {"]
    lines += [f'  "{nm}";' for nm in names]
    lines += [f'  "{names[i]}" -> "{names[j]}";' for i, j in sorted(graph.edges)]
    lines.append("}")
    return "\n".join(lines) + "\n"


def adjacency_to_csv(A, names: Sequence[str]) -> str:
    A = _as_tensor(A).detach().numpy()
    rows = [",".join(names)]
    rows += [",".join(repr(float(v)) for v in row) for row in A]
    return "\n".join(rows) + "\n"


def adjacency_from_csv(text: str) -> tuple[np.ndarray, list[str]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    names = [s.strip() for s in lines[0].split(",")]
    A = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64)
    if A.shape != (len(names), len(names)):
        raise ContractViolation("adjacency CSV is not square with its header")
    return A, names
