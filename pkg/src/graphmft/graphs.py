"""Two-modality conversation graphs (V-A, V-T, A-T).

Node layout for a conversation of ``m`` utterances: ids ``0..m-1`` are the
first modality of the pair (utterance ``i`` at id ``i``), ids ``m..2m-1`` the
second modality (utterance ``i`` at id ``m + i``).  Edges are directed
``(src, dst)`` pairs meaning ``dst`` belongs to the neighbourhood of ``src``:
attention at node ``src`` normalises over all of its ``dst`` entries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

PAIRS = {"VA": ("V", "A"), "VT": ("V", "T"), "AT": ("A", "T")}
INTRA, INTER, SELF = "intra", "inter", "self"


@dataclass(eq=False)
class PairGraph:
    pair: str
    m: int
    edges: list[tuple[int, int, str]]
    window: tuple[int, int] = (0, 0)
    self_loops: bool = True
    _arrays: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def modalities(self) -> tuple[str, str]:
        return PAIRS[self.pair]

    @property
    def num_nodes(self) -> int:
        return 2 * self.m

    @property
    def nodes(self) -> list[tuple[int, str]]:
        """(utterance_index, modality) per node id."""
        first, second = self.modalities
        return [(i, first) for i in range(self.m)] + [(i, second) for i in range(self.m)]

    def node_id(self, modality: str, index: int) -> int:
        first, second = self.modalities
        if modality == first:
            return index
        if modality == second:
            return self.m + index
        raise ValueError(f"modality {modality!r} not in graph {self.pair}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) index arrays in canonical edge order."""
        if self._arrays is None:
            src = np.array([e[0] for e in self.edges], dtype=np.intp)
            dst = np.array([e[1] for e in self.edges], dtype=np.intp)
            self._arrays = (src, dst)
        return self._arrays

    def count(self, kind: str) -> int:
        return sum(1 for e in self.edges if e[2] == kind)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairGraph):
            return NotImplemented
        return (self.pair, self.m, self.edges) == (other.pair, other.m, other.edges)


def _check_pair(pair: str) -> str:
    key = pair.upper()
    if key not in PAIRS:
        raise ValueError(f"unknown pair {pair!r}; expected one of va, vt, at")
    return key


def build_pair_graph(m: int, pair: str, P: int, F: int, self_loops: bool = True) -> PairGraph:
    if m < 1:
        raise ValueError(f"a conversation needs m >= 1 utterances, got {m}")
    if P < 0 or F < 0:
        raise ValueError(f"window sizes must be non-negative, got P={P}, F={F}")
    pair = _check_pair(pair)
    edges = []
    for offset in (0, m):
        for i in range(m):
            node = offset + i
            for j in range(max(0, i - P), min(m, i + F + 1)):
                if j != i:
                    edges.append((node, offset + j, INTRA))
            if self_loops:
                edges.append((node, node, SELF))
    for i in range(m):
        edges.append((i, m + i, INTER))
        edges.append((m + i, i, INTER))
    edges.sort(key=lambda e: (e[0], e[1]))
    return PairGraph(pair, m, edges, (P, F), self_loops)


def build_all_graphs(m: int, P: int, F: int, self_loops: bool = True) -> tuple[PairGraph, PairGraph, PairGraph]:
    return tuple(build_pair_graph(m, p, P, F, self_loops) for p in ("VA", "VT", "AT"))


def edge_count(m: int, P: int, F: int, self_loops: bool) -> dict[str, int]:
    """Closed-form directed edge counts for one pair graph."""
    intra = sum(min(P, i - 1) + min(F, m - i) for i in range(1, m + 1))
    return {INTRA: 2 * intra, INTER: 2 * m, SELF: 2 * m * int(self_loops)}


def format_graph(g: PairGraph) -> str:
    """Edge list text, one ``src_mod src_idx dst_mod dst_idx kind`` line per edge."""
    nodes = g.nodes
    lines = []
    for src, dst, kind in g.edges:
        si, sm = nodes[src]
        di, dm = nodes[dst]
        lines.append(f"{sm} {si} {dm} {di} {kind}\n")
    return "".join(lines)


def dump_graph(g: PairGraph, path) -> None:
    if not path:
        raise OSError("dump_graph: empty output path")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_graph(g))
    os.replace(tmp, path)


def parse_graph(path) -> PairGraph:
    """Read an edge list written by :func:`dump_graph`.

    The window is recovered as the largest observed past/future offset, so a
    window larger than ``m - 1`` comes back clipped.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5 or parts[4] not in (INTRA, INTER, SELF):
                raise ValueError(f"line {lineno}: expected 'src_mod src_idx dst_mod dst_idx kind'")
            rows.append((parts[0], int(parts[1]), parts[2], int(parts[3]), parts[4]))
    if not rows:
        raise ValueError(f"{path}: empty edge list")
    mods = sorted({r[0] for r in rows} | {r[2] for r in rows}, key="VAT".index)
    pair = _check_pair("".join(mods))
    m = max(max(r[1], r[3]) for r in rows) + 1
    g = PairGraph(pair, m, [])
    past = future = 0
    edges = []
    for sm, si, dm, di, kind in rows:
        edges.append((g.node_id(sm, si), g.node_id(dm, di), kind))
        if kind == INTRA:
            if di < si:
                past = max(past, si - di)
            else:
                future = max(future, di - si)
    edges.sort(key=lambda e: (e[0], e[1]))
    g.edges = edges
    g.window = (past, future)
    g.self_loops = any(e[2] == SELF for e in edges)
    return g


@dataclass
class BatchGraph:
    """Disjoint union of one pair graph per conversation.

    Node rows follow the stacked feature layout ``[first modality of every
    conversation; second modality of every conversation]``, so splitting the
    node matrix in half recovers the per-modality blocks.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray


def batch_graph(graphs: list[PairGraph]) -> BatchGraph:
    total = sum(g.m for g in graphs)
    srcs, dsts = [], []
    offset = 0
    for g in graphs:
        s, d = g.arrays()

        def remap(ids, m=g.m, off=offset):
            return np.where(ids < m, off + ids, total + off + ids - m)

        srcs.append(remap(s))
        dsts.append(remap(d))
        offset += g.m
    return BatchGraph(2 * total, np.concatenate(srcs), np.concatenate(dsts))


def as_batch(g: PairGraph | BatchGraph) -> BatchGraph:
    if isinstance(g, BatchGraph):
        return g
    s, d = g.arrays()
    return BatchGraph(g.num_nodes, s, d)
