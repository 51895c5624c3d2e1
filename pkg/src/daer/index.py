"""Multi-level spherical k-means tree over unit-norm item embeddings.

The index file holds the tree only (centroids and leaf id lists); item vectors
live in the embedding file and are attached as an `ItemStore`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import DecodeError, ShapeError

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


# ---------------------------------------------------------------- items


@dataclass
class ItemStore:
    """Caller-assigned u64 ids and their unit embeddings (rows aligned)."""

    ids: np.ndarray          # (n,) uint64
    emb: np.ndarray          # (n, d) float64

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.emb = np.asarray(self.emb, dtype=np.float64)
        if self.emb.ndim != 2 or self.emb.shape[0] != self.ids.shape[0]:
            raise ShapeError(f"ids {self.ids.shape} and embeddings {self.emb.shape} do not align")
        if self.ids.size and np.unique(self.ids).size != self.ids.size:
            raise ValueError("item ids must be unique")
        norms = np.linalg.norm(self.emb, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise ValueError(f"{bad.size} embeddings are not unit norm (first id {int(self.ids[bad[0]])}, "
                             f"norm {norms[bad[0]]:.6g})")
        self._row: Optional[Dict[int, int]] = None

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.emb.shape[1])

    def rows_of(self, ids) -> np.ndarray:
        if self._row is None:
            self._row = {int(i): r for r, i in enumerate(self.ids)}
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"id {exc.args[0]} not in item store") from None


EMB_MAGIC = b"DAEREMB1"


def encode_embeddings(store: ItemStore) -> bytes:
    n, d = store.emb.shape
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (d,))])
    arr = np.empty(n, dtype=rec)
    arr["id"] = store.ids
    arr["v"] = store.emb
    return EMB_MAGIC + struct.pack("<IQ", d, n) + arr.tobytes()


def decode_embeddings(data: bytes) -> ItemStore:
    if len(data) < 20 or data[:8] != EMB_MAGIC:
        raise DecodeError("not an embedding file (bad magic or short header)")
    d, n = struct.unpack_from("<IQ", data, 8)
    if d == 0:
        raise DecodeError("embedding dim is 0")
    need = 20 + n * (8 + 4 * d)
    if len(data) != need:
        raise DecodeError(f"embedding file size {len(data)} does not match header ({need} expected)")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (d,))])
    arr = np.frombuffer(data, dtype=rec, offset=20, count=n)
    emb = arr["v"].astype(np.float64)
    # f32 storage: renormalize in f64 after checking the stored norms
    norms = np.linalg.norm(emb, axis=1) if n else np.zeros(0)
    if n and np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise DecodeError("embedding file contains non-unit vectors")
    return ItemStore(arr["id"].copy(), emb / norms[:, None] if n else emb.reshape(0, d))


def quantize_unit(emb: np.ndarray) -> np.ndarray:
    """Round-trip through f32 and renormalize: what an embedding file stores."""
    e = np.asarray(emb, dtype=np.float32).astype(np.float64)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def save_embeddings(path: str, store: ItemStore) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_embeddings(store))


def load_embeddings(path: str) -> ItemStore:
    with open(path, "rb") as fh:
        return decode_embeddings(fh.read())


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    k: int
    clamped: bool = False
    iterations: int = 0


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    # cosine distance 1 - sim, clipped at 0 against rounding
    dist = np.maximum(1.0 - points @ points[idx[0]], 0.0)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            # all remaining points coincide with a chosen centre
            rest = np.setdiff1d(np.arange(n), idx)
            idx.append(int(rest[0]))
        else:
            idx.append(int(rng.choice(n, p=dist / total)))
        dist = np.minimum(dist, np.maximum(1.0 - points @ points[idx[-1]], 0.0))
    return points[idx].copy()


def kmeans(points: np.ndarray, k: int, iters: int = 25, seed=0) -> KMeansResult:
    """Spherical Lloyd iterations with k-means++ seeding."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = pts.shape[0]
    clamped = k > n
    if clamped:
        log.info("kmeans: k=%d clamped to %d points", k, n)
        k = n
    rng = np.random.default_rng(seed)
    cent = _normalize_rows(_kmeans_pp(pts, k, rng))
    assign = np.full(n, -1, dtype=np.int64)
    it = 0
    for it in range(1, max(iters, 1) + 1):
        sims = pts @ cent.T
        new = np.argmax(sims, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # re-seed with the point worst served by its current centroid
            own = sims[np.arange(n), new]
            far = int(np.argmin(own))
            new[far] = j
            sims[far, j] = np.inf
            counts = np.bincount(new, minlength=k)
        sums = np.zeros_like(cent)
        np.add.at(sums, new, pts)
        cent = _normalize_rows(sums)
        converged = np.array_equal(new, assign)
        assign = new
        if converged:
            break
    return KMeansResult(cent, assign, k, clamped, it)


# ---------------------------------------------------------------- tree


@dataclass
class BuildConfig:
    levels: int = 3
    branching: int = 8
    leaf_capacity: int = 32
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.branching < 2:
            raise ValueError("branching must be >= 2")
        if self.leaf_capacity < 1 or self.kmeans_iters < 1:
            raise ValueError("leaf_capacity and kmeans_iters must be >= 1")


@dataclass
class IndexNode:
    centroid: np.ndarray
    level: int
    children: List["IndexNode"] = field(default_factory=list)
    item_ids: Optional[np.ndarray] = None   # uint64, leaves only
    node_id: int = -1                       # pre-order position
    rows: Optional[np.ndarray] = None       # store rows for item_ids, filled on attach

    @property
    def is_leaf(self) -> bool:
        return self.item_ids is not None


@dataclass
class HierIndex:
    root: IndexNode
    dim: int
    n_items: int
    store: Optional[ItemStore] = None
    nodes: List[IndexNode] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.nodes = list(iter_preorder(self.root))
        for i, node in enumerate(self.nodes):
            node.node_id = i
        if self.store is not None:
            self.attach(self.store)

    def attach(self, store: ItemStore) -> "HierIndex":
        if store.dim != self.dim:
            raise ShapeError(f"item dim {store.dim} does not match index dim {self.dim}")
        for node in self.nodes:
            if node.is_leaf:
                node.rows = store.rows_of(node.item_ids)
        self.store = store
        return self

    @property
    def leaves(self) -> List[IndexNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.level for n in self.nodes)

    @property
    def max_leaf_size(self) -> int:
        return max(len(n.item_ids) for n in self.leaves)

    def leaf_ids(self) -> np.ndarray:
        parts = [n.item_ids for n in self.leaves]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint64)


def iter_preorder(root: IndexNode) -> Iterator[IndexNode]:
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def _subtree_centroid(emb: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    m = emb.sum(axis=0)
    nrm = np.linalg.norm(m)
    if nrm <= 1e-12:
        log.warning("subtree mean is ~0; using fallback centroid")
        return fallback / np.linalg.norm(fallback)
    return m / nrm


def build_index(store: ItemStore, cfg: BuildConfig = BuildConfig()) -> HierIndex:
    if len(store) == 0:
        raise ValueError("cannot build an index over zero items")
    ss = np.random.SeedSequence(cfg.seed)

    def build(rows: np.ndarray, level: int, seq: np.random.SeedSequence) -> IndexNode:
        emb = store.emb[rows]
        cent = _subtree_centroid(emb, emb[0])
        if len(rows) <= cfg.leaf_capacity or level >= cfg.levels:
            return IndexNode(cent, level, item_ids=store.ids[rows].copy())
        km = kmeans(emb, cfg.branching, cfg.kmeans_iters, seed=seq)
        groups = [rows[km.assignments == j] for j in range(km.k)]
        groups = [g for g in groups if g.size]
        if len(groups) < 2:
            return IndexNode(cent, level, item_ids=store.ids[rows].copy())
        child_seqs = seq.spawn(len(groups))
        kids = [build(g, level + 1, s) for g, s in zip(groups, child_seqs)]
        return IndexNode(cent, level, children=kids)

    root = build(np.arange(len(store)), 0, ss)
    return HierIndex(root, store.dim, len(store), store)


# ---------------------------------------------------------------- index file

IDX_MAGIC = b"DAERIDX1"
IDX_VERSION = 1
_TAG_INTERNAL = 0
_TAG_LEAF = 1
_MAX_DEPTH = 64


def serialize_index(index: HierIndex) -> bytes:
    d = index.dim
    parts = [IDX_MAGIC, struct.pack("<IIQQ", IDX_VERSION, d, index.n_items, len(index.nodes))]
    for node in index.nodes:
        c = np.ascontiguousarray(node.centroid, dtype="<f8")
        if node.is_leaf:
            ids = np.ascontiguousarray(node.item_ids, dtype="<u8")
            parts.append(struct.pack("<BI", _TAG_LEAF, node.level) + c.tobytes()
                         + struct.pack("<I", ids.size) + ids.tobytes())
        else:
            parts.append(struct.pack("<BI", _TAG_INTERNAL, node.level) + c.tobytes()
                         + struct.pack("<I", len(node.children)))
    return b"".join(parts)


def deserialize_index(data: bytes, store: Optional[ItemStore] = None) -> HierIndex:
    mv = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise DecodeError(f"truncated index: need {n} bytes at offset {pos}, have {len(mv) - pos}")
        out = mv[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != IDX_MAGIC:
        raise DecodeError("not an index file (bad magic)")
    version, d, n_items, n_nodes = struct.unpack("<IIQQ", take(24))
    if version != IDX_VERSION:
        raise DecodeError(f"unsupported index version {version}")
    if d == 0 or n_nodes == 0:
        raise DecodeError("index header has zero dim or zero nodes")

    def read_node() -> Tuple[IndexNode, int]:
        tag, level = struct.unpack("<BI", take(5))
        cent = np.frombuffer(take(8 * d), dtype="<f8").astype(np.float64)
        (count,) = struct.unpack("<I", take(4))
        if tag == _TAG_LEAF:
            ids = np.frombuffer(take(8 * count), dtype="<u8").astype(np.uint64)
            return IndexNode(cent, level, item_ids=ids), 0
        if tag == _TAG_INTERNAL:
            if count == 0:
                raise DecodeError("internal node with no children")
            return IndexNode(cent, level), count
        raise DecodeError(f"unknown node tag {tag}")

    root, pending = read_node()
    read = 1
    stack: List[Tuple[IndexNode, int]] = [(root, pending)] if pending else []
    while stack:
        parent, remaining = stack[-1]
        if remaining == 0:
            stack.pop()
            continue
        stack[-1] = (parent, remaining - 1)
        if len(stack) > _MAX_DEPTH:
            raise DecodeError("index tree deeper than supported")
        node, count = read_node()
        read += 1
        if read > n_nodes:
            raise DecodeError("more node records than the header declares")
        parent.children.append(node)
        if count:
            stack.append((node, count))
    if read != n_nodes:
        raise DecodeError(f"header declares {n_nodes} nodes, found {read}")
    if pos != len(mv):
        raise DecodeError(f"{len(mv) - pos} trailing bytes after index")
    index = HierIndex(root, d, int(n_items))
    got = sum(len(n.item_ids) for n in index.leaves)
    if got != n_items:
        raise DecodeError(f"item count field {n_items} disagrees with leaves ({got})")
    if store is not None:
        index.attach(store)
    return index


def save_index(path: str, index: HierIndex) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_index(index))


def load_index(path: str, store: Optional[ItemStore] = None) -> HierIndex:
    with open(path, "rb") as fh:
        return deserialize_index(fh.read(), store)
