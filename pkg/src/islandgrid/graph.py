"""Communication topology among DGs.

The graph is a weighted digraph: ``adjacency[i, j] > 0`` means DG ``i``
receives information from DG ``j``.  ``pinning[i] > 0`` means DG ``i`` sees
the voltage reference directly.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class GraphError(ValueError):
    """Raised when a communication graph violates a structural invariant."""


@dataclass(frozen=True)
class CommGraph:
    adjacency: np.ndarray
    pinning: np.ndarray

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=float)
        b = np.array(self.pinning, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise GraphError(
                f"pinning has {b.shape[0]} entries but adjacency has {a.shape[0]} nodes"
            )
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
            raise GraphError("adjacency and pinning must be finite")
        if np.any(np.diag(a) != 0.0):
            i = int(np.flatnonzero(np.diag(a))[0])
            raise GraphError(f"self-loop a_{i}{i} = {a[i, i]} (a_ii must be 0)")
        if np.any(a < 0):
            i, j = np.argwhere(a < 0)[0]
            raise GraphError(f"negative weight a_{i}{j} = {a[i, j]}")
        if np.any(b < 0):
            i = int(np.flatnonzero(b < 0)[0])
            raise GraphError(f"negative pinning gain b_{i} = {b[i]}")
        if not np.any(b > 0):
            raise GraphError("no pinned node: at least one b_i must be > 0")
        unreachable = _unreachable_from_pins(a, b)
        if unreachable:
            raise GraphError(f"nodes {unreachable} are not reachable from any pinned node")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "pinning", b)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def in_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        """Nodes that DG ``i`` receives from."""
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    @classmethod
    def from_edges(cls, n, edges, pinned, undirected=True):
        """Build from an edge list.

        ``edges`` holds ``(i, j)`` or ``(i, j, weight)`` tuples with 0-based
        node ids; weights default to 1.  ``pinned`` maps node id to gain, or is
        a plain iterable of node ids (gain 1).
        """
        a = np.zeros((n, n))
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) references a node outside 0..{n - 1}")
            a[i, j] = w
            if undirected:
                a[j, i] = w
        b = np.zeros(n)
        items = pinned.items() if isinstance(pinned, dict) else ((k, 1.0) for k in pinned)
        for k, g in items:
            k = int(k)
            if not 0 <= k < n:
                raise GraphError(f"pinned node {k} outside 0..{n - 1}")
            b[k] = float(g)
        return cls(a, b)

    @classmethod
    def chain(cls, n, pinned=(0,)):
        return cls.from_edges(n, [(i, i + 1) for i in range(n - 1)], pinned)


def _unreachable_from_pins(a, b):
    # information flows j -> i whenever a_ij > 0
    n = a.shape[0]
    seen = np.zeros(n, dtype=bool)
    queue = deque(int(i) for i in np.flatnonzero(b > 0))
    seen[list(queue)] = True
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(a[:, j] > 0):
            if not seen[i]:
                seen[i] = True
                queue.append(int(i))
    return [int(i) for i in np.flatnonzero(~seen)]


def build_laplacian(graph: CommGraph) -> np.ndarray:
    """L = D - A with D the in-degree matrix."""
    a = graph.adjacency
    return np.diag(a.sum(axis=1)) - a


def augmented_laplacian(graph: CommGraph) -> np.ndarray:
    """L + diag(b); nonsingular for any valid graph."""
    return build_laplacian(graph) + np.diag(graph.pinning)


def masked_augmented_laplacian(graph: CommGraph, active) -> np.ndarray:
    """Augmented Laplacian with inactive nodes' links dropped.

    Rows and columns of inactive nodes are replaced by identity rows so the
    matrix keeps its shape; active nodes see inactive neighbours as absent.
    """
    active = np.asarray(active, dtype=bool)
    a = graph.adjacency * np.outer(active, active)
    lb = np.diag(a.sum(axis=1) + graph.pinning) - a
    idle = ~active
    lb[idle, :] = 0.0
    lb[:, idle] = 0.0
    lb[idle, idle] = 1.0
    return lb


def pinned_components(graph: CommGraph, active) -> np.ndarray:
    """Mask of active nodes that still reach a pinned active node."""
    active = np.asarray(active, dtype=bool)
    a = graph.adjacency * np.outer(active, active)
    b = np.where(active, graph.pinning, 0.0)
    ok = np.zeros(graph.n, dtype=bool)
    if np.any(b > 0):
        unreachable = set(_unreachable_from_pins(a, b))
        ok = np.array([active[i] and i not in unreachable for i in range(graph.n)])
    return ok


class TradeoffMode(str, Enum):
    VOLTAGE_ONLY = "voltage-only"
    SHARING_ONLY = "sharing-only"
    SHARING_TIGHT = "sharing-with-tight-regulation"


@dataclass(frozen=True)
class TradeoffGraphSplit:
    laplacian_v: np.ndarray
    pinning_v: np.ndarray
    laplacian_q: np.ndarray
    mode: TradeoffMode = field(default=TradeoffMode.VOLTAGE_ONLY)

    def __post_init__(self):
        for name in ("laplacian_v", "laplacian_q"):
            m = getattr(self, name)
            if not np.allclose(m.sum(axis=1), 0.0, atol=1e-12):
                raise GraphError(f"{name} must have zero row sums")
        bv = self.pinning_v
        if np.any(bv - np.diag(np.diag(bv))) or np.any(np.diag(bv) < 0):
            raise GraphError("pinning_v must be diagonal and nonnegative")
        lv_zero = not np.any(self.laplacian_v)
        lq_zero = not np.any(self.laplacian_q)
        bv_zero = not np.any(bv)
        if self.mode is TradeoffMode.VOLTAGE_ONLY and not lq_zero:
            raise GraphError("voltage-only mode requires L_Q = 0")
        if self.mode is TradeoffMode.SHARING_ONLY and not (lv_zero and bv_zero and not lq_zero):
            raise GraphError("sharing-only mode requires L_V = 0, B_V = 0, L_Q != 0")
        if self.mode is TradeoffMode.SHARING_TIGHT and not (lv_zero and not lq_zero and not bv_zero):
            raise GraphError("sharing-with-tight-regulation requires L_V = 0, B_V != 0, L_Q != 0")

    @property
    def augmented_v(self) -> np.ndarray:
        return self.laplacian_v + self.pinning_v


def split_for_tradeoff(graph: CommGraph, mode, pinning_v=None) -> TradeoffGraphSplit:
    """Split the graph into voltage and reactive-sharing Laplacians.

    ``pinning_v`` overrides the voltage pinning gains in the sharing modes that
    keep a pinning term; by default the graph's own ``pinning`` is used.
    """
    try:
        mode = TradeoffMode(mode)
    except ValueError:
        raise GraphError(
            f"unknown trade-off mode {mode!r}; expected one of {[m.value for m in TradeoffMode]}"
        ) from None
    lap = build_laplacian(graph)
    zero = np.zeros_like(lap)
    bv = np.diag(graph.pinning if pinning_v is None else np.asarray(pinning_v, dtype=float))
    if mode is TradeoffMode.VOLTAGE_ONLY:
        return TradeoffGraphSplit(lap, bv, zero, mode)
    if mode is TradeoffMode.SHARING_ONLY:
        return TradeoffGraphSplit(zero, zero.copy(), lap, mode)
    return TradeoffGraphSplit(zero, bv, lap, mode)
