"""Approximate top-k retrieval over concatenated sketches (HNSW graph).

Vectors are the per-timestep sketches of one sample concatenated in plan
order; similarity is the raw inner product, which matches the influence
sum because every sketch comes from an L2-normalized gradient (norms are
nearly constant, so inner-product and cosine orderings agree).  The graph
is a standard hierarchical navigable small world: each node gets a
geometric random level, links to at most M neighbors per upper level (2M
on the ground level), and queries descend greedily before running a
best-first beam of width ef on the ground level.

Build is deterministic for a fixed seed and insertion order; a built index
is immutable and safe for concurrent queries.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from heapq import heapify, heappop, heappush
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, IncompatibleCacheError

INDEX_MAGIC = b"DMIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class IndexParams:
    """HNSW knobs: graph degree, build beam width, query beam width."""

    M: int = 16
    ef_construction: int = 200
    ef: int = 200

    def __post_init__(self):
        if self.M < 1 or self.ef_construction < 1 or self.ef < 1:
            raise ConfigError("M, ef_construction and ef must all be >= 1")


class HnswIndex:
    def __init__(self, params: IndexParams, dim: int, seed: int,
                 manifest_hash: str | None = None):
        self.params = params
        self.dim = dim
        self.seed = seed
        self.manifest_hash = manifest_hash
        self._ml = 1.0 / math.log(max(params.M, 2))
        self._rng = np.random.default_rng(seed)
        self._buf = np.empty((16, dim), dtype=np.float32)
        self._vectors = self._buf[:0]
        self._ids: list[int] = []
        self._levels: list[int] = []
        # _graph[level][node] -> list of neighbor node indices
        self._graph: list[dict[int, list[int]]] = []
        self._entry = -1
        self._max_level = -1

    def __len__(self) -> int:
        return len(self._ids)

    # -- similarity ---------------------------------------------------------

    def _sims(self, nodes: Sequence[int], q: np.ndarray) -> np.ndarray:
        return self._vectors[np.asarray(nodes)] @ q

    def _search_layer(self, q: np.ndarray, entries: list[tuple[float, int]],
                      ef: int, level: int) -> list[tuple[float, int]]:
        """Best-first beam search; returns up to ef (sim, node) pairs."""
        graph = self._graph[level]
        visited = {node for _, node in entries}
        candidates = [(-sim, node) for sim, node in entries]
        heapify(candidates)
        results = list(entries)
        heapify(results)
        while candidates:
            neg_sim, node = heappop(candidates)
            if len(results) >= ef and -neg_sim < results[0][0]:
                break
            fresh = [n for n in graph.get(node, ()) if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            sims = self._sims(fresh, q)
            for n, s in zip(fresh, sims):
                s = float(s)
                if len(results) < ef or s > results[0][0]:
                    heappush(candidates, (-s, n))
                    heappush(results, (s, n))
                    if len(results) > ef:
                        heappop(results)
        return results

    def _select_neighbors(self, q: np.ndarray, candidates: list[tuple[float, int]],
                          m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is more similar
        to the query point than to every neighbor already kept; fill from
        the rejects when that leaves fewer than m links."""
        ordered = sorted(candidates, key=lambda p: (-p[0], p[1]))
        if len(ordered) <= m and len(ordered) <= 1:
            return [n for _, n in ordered]
        nodes = [n for _, n in ordered]
        vecs = self._vectors[np.asarray(nodes)]
        # max similarity of each candidate to the selected set, kept current
        max_to_selected = np.full(len(nodes), -np.inf)
        selected: list[int] = []
        rejected: list[int] = []
        for i, (sim, node) in enumerate(ordered):
            if len(selected) >= m:
                break
            if selected and max_to_selected[i] >= sim:
                rejected.append(node)
                continue
            selected.append(node)
            np.maximum(max_to_selected, vecs @ vecs[i], out=max_to_selected)
        for node in rejected:
            if len(selected) >= m:
                break
            selected.append(node)
        return selected

    def _shrink(self, node: int, level: int, m: int) -> None:
        links = self._graph[level][node]
        if len(links) <= m:
            return
        sims = self._sims(links, self._vectors[node])
        cands = [(float(s), n) for s, n in zip(sims, links)]
        self._graph[level][node] = self._select_neighbors(
            self._vectors[node], cands, m
        )

    # -- construction -------------------------------------------------------

    def _draw_level(self) -> int:
        u = float(self._rng.random())
        return int(-math.log(max(u, 1e-300)) * self._ml)

    def add(self, sample_id: int, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape != (self.dim,):
            raise DimensionError(f"expected vectors of dim {self.dim}, got {vec.shape}")
        node = len(self._ids)
        if node >= self._buf.shape[0]:
            grown = np.empty((max(2 * self._buf.shape[0], 16), self.dim), np.float32)
            grown[:node] = self._buf[:node]
            self._buf = grown
        self._buf[node] = vec
        self._vectors = self._buf[: node + 1]

        level = self._draw_level()
        self._ids.append(int(sample_id))
        self._levels.append(level)
        while len(self._graph) <= level:
            self._graph.append({})
        for lev in range(level + 1):
            self._graph[lev][node] = []
        if self._entry < 0:
            self._entry = node
            self._max_level = level
            return

        q = self._buf[node]
        ep = [(float(self._vectors[self._entry] @ q), self._entry)]
        for lev in range(self._max_level, level, -1):
            ep = [max(self._search_layer(q, ep, 1, lev))]
        m = self.params.M
        for lev in range(min(level, self._max_level), -1, -1):
            res = self._search_layer(q, ep, self.params.ef_construction, lev)
            m_max = 2 * m if lev == 0 else m
            neighbors = self._select_neighbors(q, res, m)
            self._graph[lev][node] = list(neighbors)
            for n in neighbors:
                self._graph[lev][n].append(node)
                self._shrink(n, lev, m_max)
            ep = res
        if level > self._max_level:
            self._entry = node
            self._max_level = level

    @classmethod
    def build(cls, records: Iterable[tuple[int, np.ndarray]], params: IndexParams,
              seed: int, manifest_hash: str | None = None) -> "HnswIndex":
        """Build from (sample_id, sketches) records; sketches are flattened."""
        index: HnswIndex | None = None
        for sid, vec in records:
            flat = np.asarray(vec, dtype=np.float32).reshape(-1)
            if index is None:
                index = cls(params, flat.shape[0], seed, manifest_hash)
            index.add(sid, flat)
        if index is None:
            raise ConfigError("cannot build an index from an empty cache")
        return index

    # -- queries ------------------------------------------------------------

    def query(self, q: np.ndarray, k: int, ef: int | None = None
              ) -> list[tuple[int, float]]:
        """Approximate top-k (sample_id, inner product), descending.

        Scores are raw inner products; the epochs*lr scale never changes
        the ordering so it is left to the caller.
        """
        if not self._ids:
            raise ConfigError("index is empty")
        ef = self.params.ef if ef is None else ef
        if k < 1:
            raise ConfigError("k must be >= 1")
        if ef < k:
            raise ConfigError(f"ef ({ef}) must be >= k ({k})")
        q = np.asarray(q, dtype=np.float32).reshape(-1)
        if q.shape != (self.dim,):
            raise DimensionError(f"query dim {q.shape[0]} != index dim {self.dim}")
        ep = [(float(self._vectors[self._entry] @ q), self._entry)]
        for lev in range(self._max_level, 0, -1):
            ep = [max(self._search_layer(q, ep, 1, lev))]
        res = self._search_layer(q, ep, ef, 0)
        ranked = sorted(
            ((sim, self._ids[node]) for sim, node in res),
            key=lambda p: (-p[0], p[1]),
        )
        return [(sid, sim) for sim, sid in ranked[:k]]

    # -- persistence --------------------------------------------------------

    def save(self, path: Path) -> None:
        path = Path(path)
        n = len(self._ids)
        digest = bytes.fromhex(self.manifest_hash) if self.manifest_hash else b"\x00" * 32
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack(
                "<HIIIQQQqi",
                INDEX_VERSION, self.params.M, self.params.ef_construction,
                self.params.ef, self.seed, self.dim, n,
                self._entry, self._max_level,
            ))
            f.write(digest)
            np.save(f, np.asarray(self._ids, dtype="<u8"))
            np.save(f, np.ascontiguousarray(self._vectors, dtype="<f4"))
            np.save(f, np.asarray(self._levels, dtype="<i4"))
            for lev in range(self._max_level + 1):
                nodes = sorted(self._graph[lev])
                indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
                flat: list[int] = []
                for i, node in enumerate(nodes):
                    links = self._graph[lev][node]
                    indptr[i + 1] = indptr[i] + len(links)
                    flat.extend(links)
                np.save(f, np.asarray(nodes, dtype="<i8"))
                np.save(f, indptr.astype("<i8"))
                np.save(f, np.asarray(flat, dtype="<i8"))

    @classmethod
    def load(cls, path: Path, expect_manifest_hash: str | None = None) -> "HnswIndex":
        path = Path(path)
        try:
            with open(path, "rb") as f:
                magic = f.read(4)
                if magic != INDEX_MAGIC:
                    raise FormatError(f"{path}: bad index magic {magic!r}", offset=0)
                header = f.read(struct.calcsize("<HIIIQQQqi"))
                (version, M, efc, ef, seed, dim, n, entry, max_level) = (
                    struct.unpack("<HIIIQQQqi", header)
                )
                if version != INDEX_VERSION:
                    raise FormatError(f"{path}: unsupported index version {version}")
                digest = f.read(32)
                ids = np.load(f, allow_pickle=False)
                vectors = np.load(f, allow_pickle=False)
                levels = np.load(f, allow_pickle=False)
                graph: list[dict[int, list[int]]] = []
                for _ in range(max_level + 1):
                    nodes = np.load(f, allow_pickle=False)
                    indptr = np.load(f, allow_pickle=False)
                    flat = np.load(f, allow_pickle=False)
                    layer = {
                        int(node): flat[indptr[i]: indptr[i + 1]].tolist()
                        for i, node in enumerate(nodes)
                    }
                    graph.append(layer)
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"{path}: corrupt index file ({exc})") from exc
        if len(ids) != n or vectors.shape != (n, dim):
            raise FormatError(f"{path}: index payload does not match header")
        stored_hash = digest.hex() if digest != b"\x00" * 32 else None
        if expect_manifest_hash is not None and stored_hash != expect_manifest_hash:
            raise IncompatibleCacheError(
                "index was built for a different cache manifest"
            )
        index = cls(IndexParams(M, efc, ef), int(dim), int(seed), stored_hash)
        index._buf = vectors.astype(np.float32)
        index._vectors = index._buf[:n]
        index._ids = [int(i) for i in ids]
        index._levels = [int(lv) for lv in levels]
        index._graph = graph
        index._entry = int(entry)
        index._max_level = int(max_level)
        return index


def build_index(records: Iterable[tuple[int, np.ndarray]], params: IndexParams,
                seed: int, manifest_hash: str | None = None) -> HnswIndex:
    """Build an HNSW index over cache records (see :meth:`HnswIndex.build`)."""
    return HnswIndex.build(records, params, seed, manifest_hash)


def exact_search(records: Iterable[tuple[int, np.ndarray]], q: np.ndarray,
                 k: int) -> list[tuple[int, float]]:
    """Brute-force top-k by inner product: the recall ground truth.

    Uses the same float64 per-record reduction as the compressed scoring
    scan, so rankings agree with it exactly.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    q = np.asarray(q).reshape(-1).astype(np.float64)
    scored: list[tuple[float, int]] = []
    expected = q.shape[0]
    for sid, vec in records:
        flat = np.asarray(vec).reshape(-1)
        if flat.shape[0] != expected:
            raise DimensionError(
                f"record dim {flat.shape[0]} != query dim {expected}"
            )
        scored.append((float(np.dot(flat.astype(np.float64), q)), int(sid)))
    scored.sort(key=lambda p: (-p[0], p[1]))
    return [(sid, score) for score, sid in scored[:k]]
