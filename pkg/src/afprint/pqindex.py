"""Inverted-file index with product-quantised residuals and ADC search.

Vectors are first assigned to the nearest of ``K`` coarse centroids; the
residual (vector minus centroid) is split into ``m`` sub-vectors and each one
is replaced by the index of its nearest sub-centroid.  At query time only the
``nprobe`` closest cells are visited and distances are summed from an
``m x k*`` lookup table.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsp import SegmentRef

log = logging.getLogger(__name__)

INDEX_MAGIC = b"AFPI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sHIIBII")
_CELL_HEADER = struct.Struct("<IQ")


class IndexStateError(RuntimeError):
    """Misuse of an index: untrained, empty, or wrong dimensionality."""


# ---------------------------------------------------------------- k-means

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, ((x - centers[i]) ** 2).sum(1))
    return centers


def kmeans(points: np.ndarray, k: int, iters: int = 25, seed: int = 0,
           return_history: bool = False):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are re-seeded with the point of the largest cluster that is
    farthest from its centroid.  The mean squared distortion is recorded after
    every assignment step and must never increase.
    """
    x = np.asarray(points, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"k-means needs at least {k} points, got {len(x)}")
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"k-means needs at least {k} distinct points")
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng)
    history: List[float] = []
    assign = None
    for _ in range(iters):
        d = _sq_dists(x, c)
        new_assign = d.argmin(1)
        dist = float(((x - c[new_assign]) ** 2).sum(1).mean())
        if history and dist > history[-1] * (1 + 1e-9) + 1e-15:
            raise RuntimeError(f"k-means distortion increased: {history[-1]} -> {dist}")
        history.append(dist)
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        for e in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[np.argmax(((x[members] - c[big]) ** 2).sum(1))]
            c[e] = x[far]
            assign[far] = e
            counts[big] -= 1
            counts[e] = 1
    return (c, history) if return_history else c


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class IndexConfig:
    dim: int = 64
    m: int = 32
    code_bits: int = 8
    coarse_cells: int = 64
    nprobe: int = 4
    seed: int = 0
    kmeans_iters: int = 25
    max_train: int = 200_000
    unit_norm: bool = True

    def __post_init__(self):
        if self.dim % self.m:
            raise ValueError(f"m={self.m} must divide D={self.dim}")
        if not 4 <= self.code_bits <= 8:
            raise ValueError("code_bits must lie in [4, 8]")
        if not 1 <= self.nprobe <= self.coarse_cells:
            raise ValueError(f"nprobe={self.nprobe} must lie in [1, K={self.coarse_cells}]")

    @property
    def ksub(self) -> int:
        return 1 << self.code_bits

    @property
    def sub_dim(self) -> int:
        return self.dim // self.m

    @property
    def code_length_bits(self) -> int:
        return self.m * self.code_bits


@dataclass(eq=False)
class Codebooks:
    coarse: np.ndarray   # (K, D)
    sub: np.ndarray      # (m, k*, D/m)


def _f32(a: np.ndarray) -> np.ndarray:
    # codebooks live on disk as float32; keep the in-memory copy identical
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def train(embeddings: np.ndarray, config: IndexConfig) -> Codebooks:
    """Coarse centroids on raw vectors, then one sub-codebook per residual subspace."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.dim:
        raise ValueError(f"expected (n, {config.dim}) training vectors, got {x.shape}")
    need = 4 * max(config.coarse_cells, config.ksub)
    if len(x) < need:
        raise ValueError(f"training sample of {len(x)} vectors is too small; need >= {need}")
    if len(x) > config.max_train:
        rng = np.random.default_rng([config.seed, 1])
        x = x[np.sort(rng.choice(len(x), config.max_train, replace=False))]
    coarse = _f32(kmeans(x, config.coarse_cells, config.kmeans_iters, config.seed))
    resid = x - coarse[_sq_dists(x, coarse).argmin(1)]
    ds = config.sub_dim
    sub = np.empty((config.m, config.ksub, ds))
    for j in range(config.m):
        sub[j] = kmeans(resid[:, j * ds:(j + 1) * ds], config.ksub, config.kmeans_iters,
                        seed=config.seed * 1000 + j + 1)
    return Codebooks(coarse, _f32(sub))


# ---------------------------------------------------------------- index

_ENTRY_DTYPES: Dict[int, np.dtype] = {}


def _entry_dtype(m: int) -> np.dtype:
    if m not in _ENTRY_DTYPES:
        _ENTRY_DTYPES[m] = np.dtype([("song_id", "<u4"), ("segment_index", "<u4"), ("code", "u1", (m,))])
    return _ENTRY_DTYPES[m]


class FingerprintIndex:
    """Searchable database of PQ-coded segment fingerprints."""

    def __init__(self, config: IndexConfig, codebooks: Optional[Codebooks] = None):
        self.config = config
        self.codebooks = codebooks
        K, m = config.coarse_cells, config.m
        self._pending: List[List[np.ndarray]] = [[] for _ in range(K)]
        self._cells = [np.zeros(0, dtype=_entry_dtype(m)) for _ in range(K)]
        self._dirty = False

    # -- building ------------------------------------------------------

    @classmethod
    def build(cls, embeddings: np.ndarray, refs: Sequence[SegmentRef], config: IndexConfig,
              train_sample: Optional[np.ndarray] = None) -> "FingerprintIndex":
        index = cls(config, train(embeddings if train_sample is None else train_sample, config))
        index.add_batch(refs, embeddings)
        return index

    @property
    def is_trained(self) -> bool:
        return self.codebooks is not None

    def _check_vectors(self, x: np.ndarray) -> np.ndarray:
        if not self.is_trained:
            raise IndexStateError("index has no trained codebooks")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.dim:
            raise ValueError(f"vector dimension {x.shape[1]} != index dimension {self.config.dim}")
        if self.config.unit_norm:
            norms = np.linalg.norm(x, axis=1)
            off = np.abs(norms - 1.0)
            if np.any(off > 1e-3):
                raise ValueError(f"vector norm {norms[np.argmax(off)]:.4f} is not unit within 1e-3")
            if np.any(off > 1e-6):
                warnings.warn("renormalising slightly non-unit vectors", RuntimeWarning, stacklevel=3)
                x = x / norms[:, None]
        return x

    def assign(self, x: np.ndarray) -> np.ndarray:
        return _sq_dists(x, self.codebooks.coarse).argmin(1)

    def encode(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(cell ids, codes)`` for a batch of vectors."""
        x = self._check_vectors(x)
        cells = self.assign(x)
        resid = x - self.codebooks.coarse[cells]
        ds = self.config.sub_dim
        codes = np.empty((len(x), self.config.m), dtype=np.uint8)
        for j in range(self.config.m):
            codes[:, j] = _sq_dists(resid[:, j * ds:(j + 1) * ds], self.codebooks.sub[j]).argmin(1)
        return cells, codes

    def decode(self, cells: np.ndarray, codes: np.ndarray) -> np.ndarray:
        m = self.config.m
        parts = self.codebooks.sub[np.arange(m)[None, :], codes.astype(np.int64)]  # n, m, ds
        return self.codebooks.coarse[cells] + parts.reshape(len(codes), -1)

    def add(self, ref: SegmentRef, embedding: np.ndarray) -> None:
        self.add_batch([ref], np.asarray(embedding)[None])

    def add_batch(self, refs: Sequence[SegmentRef], embeddings: np.ndarray) -> None:
        if len(refs) == 0:
            return
        cells, codes = self.encode(embeddings)
        rec = np.zeros(len(refs), dtype=_entry_dtype(self.config.m))
        rec["song_id"] = [r.song_id for r in refs]
        rec["segment_index"] = [r.segment_index for r in refs]
        rec["code"] = codes
        order = np.argsort(cells, kind="stable")
        bounds = np.searchsorted(cells[order], np.arange(self.config.coarse_cells + 1))
        for c in range(self.config.coarse_cells):
            if bounds[c] < bounds[c + 1]:
                self._pending[c].append(rec[order[bounds[c]:bounds[c + 1]]])
        self._dirty = True

    def freeze(self) -> "FingerprintIndex":
        """Merge pending entries and sort every cell by ``(song_id, segment_index)``."""
        if not self._dirty:
            return self
        for c, chunks in enumerate(self._pending):
            if chunks:
                merged = np.concatenate([self._cells[c]] + chunks)
                self._cells[c] = merged[np.lexsort((merged["segment_index"], merged["song_id"]))]
                self._pending[c] = []
        self._dirty = False
        return self

    # -- inspection ----------------------------------------------------

    def __len__(self) -> int:
        self.freeze()
        return int(sum(len(c) for c in self._cells))

    def cell(self, c: int) -> np.ndarray:
        self.freeze()
        return self._cells[c]

    def entries(self):
        """All ``(cell, SegmentRef, code)`` triples in storage order."""
        self.freeze()
        for c, arr in enumerate(self._cells):
            for e in arr:
                yield c, SegmentRef(int(e["song_id"]), int(e["segment_index"])), e["code"].copy()

    def size_report(self) -> Tuple[float, int]:
        """``(code bytes, serialized bytes)``; the first is ``entries * m * code_bits / 8``."""
        n = len(self)
        code_bytes = n * self.config.m * self.config.code_bits / 8
        if float(code_bytes).is_integer():
            code_bytes = int(code_bytes)
        return code_bytes, len(self.to_bytes())

    # -- search --------------------------------------------------------

    def adc_table(self, query_residual: np.ndarray) -> np.ndarray:
        """``m x k*`` squared distances from residual sub-vectors to sub-centroids."""
        q = query_residual.reshape(self.config.m, 1, self.config.sub_dim)
        return ((self.codebooks.sub - q) ** 2).sum(-1)

    def search(self, query: np.ndarray, top_k: int = 4,
               nprobe: Optional[int] = None) -> List[Tuple[SegmentRef, float]]:
        return self.search_batch(np.asarray(query)[None], top_k, nprobe)[0]

    def search_batch(self, queries: np.ndarray, top_k: int = 4,
                     nprobe: Optional[int] = None) -> List[List[Tuple[SegmentRef, float]]]:
        """Approximate nearest neighbours, ascending by distance, ties by segment ref."""
        self.freeze()
        if len(self) == 0:
            raise IndexStateError("cannot search an empty index")
        q = self._check_vectors(queries)
        nprobe = self.config.nprobe if nprobe is None else nprobe
        nprobe = min(nprobe, self.config.coarse_cells)
        coarse_d = _sq_dists(q, self.codebooks.coarse)
        probe = np.argsort(coarse_d, axis=1, kind="stable")[:, :nprobe]
        m_idx = np.arange(self.config.m)
        out = []
        for qi in range(len(q)):
            dists, songs, segs = [], [], []
            for c in probe[qi]:
                cell = self._cells[c]
                if len(cell) == 0:
                    continue
                table = self.adc_table(q[qi] - self.codebooks.coarse[c])
                dists.append(table[m_idx, cell["code"].astype(np.intp)].sum(1))
                songs.append(cell["song_id"])
                segs.append(cell["segment_index"])
            if not dists:
                out.append([])
                continue
            d = np.concatenate(dists)
            s = np.concatenate(songs)
            g = np.concatenate(segs)
            if len(d) > top_k:
                # keep everything tied with the k-th distance so tie-breaks stay exact
                kth = np.partition(d, top_k - 1)[top_k - 1]
                keep = d <= kth
                d, s, g = d[keep], s[keep], g[keep]
            order = np.lexsort((g, s, d))[:top_k]
            out.append([(SegmentRef(int(s[i]), int(g[i])), float(d[i])) for i in order])
        return out

    # -- persistence ---------------------------------------------------

    def to_bytes(self) -> bytes:
        self.freeze()
        if not self.is_trained:
            raise IndexStateError("cannot serialise an untrained index")
        cfg = self.config
        buf = io.BytesIO()
        buf.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, cfg.dim, cfg.m, cfg.code_bits,
                               cfg.coarse_cells, cfg.nprobe))
        buf.write(self.codebooks.coarse.astype("<f4").tobytes())
        buf.write(self.codebooks.sub.astype("<f4").tobytes())
        for c, cell in enumerate(self._cells):
            buf.write(_CELL_HEADER.pack(c, len(cell)))
            buf.write(cell.tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, seed: int = 0) -> "FingerprintIndex":
        if len(data) < _HEADER.size:
            raise ValueError("truncated index header")
        magic, version, dim, m, bits, K, nprobe = _HEADER.unpack_from(data, 0)
        if magic != INDEX_MAGIC:
            raise ValueError(f"bad index magic {magic!r}")
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        cfg = IndexConfig(dim=dim, m=m, code_bits=bits, coarse_cells=K, nprobe=nprobe, seed=seed)
        pos = _HEADER.size
        nc = K * dim
        coarse = np.frombuffer(data, "<f4", nc, pos).astype(np.float64).reshape(K, dim)
        pos += 4 * nc
        ns = m * cfg.ksub * cfg.sub_dim
        sub = np.frombuffer(data, "<f4", ns, pos).astype(np.float64).reshape(m, cfg.ksub, cfg.sub_dim)
        pos += 4 * ns
        index = cls(cfg, Codebooks(coarse, sub))
        dt = _entry_dtype(m)
        for _ in range(K):
            c, count = _CELL_HEADER.unpack_from(data, pos)
            pos += _CELL_HEADER.size
            index._cells[c] = np.frombuffer(data, dt, count, pos).copy()
            pos += count * dt.itemsize
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing bytes after index payload")
        return index

    @classmethod
    def load(cls, path) -> "FingerprintIndex":
        return cls.from_bytes(Path(path).read_bytes())


def expected_serialized_size(config: IndexConfig, n_entries: int) -> int:
    """Header + codebooks + per-cell headers + entries, in bytes."""
    return (_HEADER.size
            + 4 * config.coarse_cells * config.dim
            + 4 * config.m * config.ksub * config.sub_dim
            + _CELL_HEADER.size * config.coarse_cells
            + n_entries * (8 + config.m))


def code_bytes(n_vectors: int, m: int, code_bits: int = 8) -> float:
    return n_vectors * m * code_bits / 8


def exhaustive_search(database: np.ndarray, query: np.ndarray, top_k: int = 1) -> np.ndarray:
    """Exact squared-L2 nearest neighbours (indices), the oracle for recall checks."""
    d = ((database - query[None, :]) ** 2).sum(1)
    return np.lexsort((np.arange(len(d)), d))[:top_k]


def save_song_metadata(path, songs: Dict[int, dict]) -> None:
    """Sidecar ``{song_id: {title, source, duration_s}}``."""
    Path(path).write_text(json.dumps({str(k): v for k, v in sorted(songs.items())}, indent=1))


def load_song_metadata(path) -> Dict[int, dict]:
    return {int(k): v for k, v in json.loads(Path(path).read_text()).items()}
