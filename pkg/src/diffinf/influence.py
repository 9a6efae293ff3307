"""Influence scoring: normalized per-timestep gradients, compression, scans.

A sample's influence on a query is ``epochs * avg_lr * sum_t <u_q(t), u_i(t)>``
where ``u(t)`` is the L2-normalized loss gradient at timestep t, computed
with a Gaussian noise vector that is a deterministic function of
``(noise_seed, t)`` and therefore shared by every sample and every query at
that timestep.  Cached gradients are compressed through a sketch context;
the exact path keeps them uncompressed and serves as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import rng
from .diffusion import DataPoint, Dataset, DenoiserModel, Schedule, grad_loss_many
from .errors import ConfigError, IncompatibleCacheError
from .sketch import SketchContext, compress

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly increasing timesteps in [1, T] at which gradients are taken."""

    steps: tuple[int, ...]
    T: int

    def __post_init__(self):
        if not self.steps:
            raise ConfigError("timestep plan is empty")
        if list(self.steps) != sorted(set(self.steps)):
            raise ConfigError("timestep plan must be strictly increasing")
        if self.steps[0] < 1 or self.steps[-1] > self.T:
            raise ConfigError(f"plan steps must lie in [1, {self.T}]")

    def __len__(self) -> int:
        return len(self.steps)


def plan_timesteps(T: int, S: int) -> TimestepPlan:
    """S evenly spaced steps, endpoint-inclusive: step i is round(i*T/S)."""
    if not 1 <= S <= T:
        raise ConfigError(f"need 1 <= S <= T, got S={S}, T={T}")
    # round-half-up keeps the sequence strictly increasing for any S <= T
    steps = tuple(int(i * T / S + 0.5) for i in range(1, S + 1))
    return TimestepPlan(steps, T)


class InfluenceRecord(NamedTuple):
    sample_id: int
    score: float


@dataclass(frozen=True)
class ScaleConstants:
    """Training constants that scale raw gradient inner products."""

    epochs: float = 1.0
    avg_lr: float = 1.0

    def __post_init__(self):
        if self.epochs <= 0 or self.avg_lr <= 0:
            raise ConfigError("epochs and avg_lr must be > 0")

    @property
    def value(self) -> float:
        return self.epochs * self.avg_lr


def noise_for(noise_seed: int, t: int, dim: int) -> np.ndarray:
    """The shared Gaussian noise for timestep t, identical for all callers.

    Derived from child stream t of ``noise_seed``, so a cache and any later
    query reproduce the same vector without storing it.
    """
    if t < 1:
        raise ConfigError("timestep must be >= 1")
    return rng.standard_normals(rng.substream_seed(noise_seed, t), dim)


def noise_for_sample(noise_seed: int, t: int, dim: int, sample_id: int) -> np.ndarray:
    """Per-sample noise variant (ablation mode): one extra stream split."""
    if t < 1:
        raise ConfigError("timestep must be >= 1")
    child = rng.substream_seed(rng.substream_seed(noise_seed, t), sample_id + 1)
    return rng.standard_normals(child, dim)


def normalize_rows(G: np.ndarray, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows to float32; near-zero rows become zero and flagged.

    Returns (unit_rows, degenerate_mask).  Norms accumulate in float64.
    With ``normalize=False`` (the ablation mode recorded in manifests) rows
    pass through unscaled, but degenerate rows are still flagged.
    """
    G = np.atleast_2d(G)
    norms = np.sqrt((G.astype(np.float64) ** 2).sum(axis=1))
    degenerate = norms < DEGENERATE_NORM
    if not normalize:
        return G.astype(np.float32), degenerate
    safe = np.where(degenerate, 1.0, norms)
    unit = (G / safe[:, np.newaxis]).astype(np.float32)
    unit[degenerate] = 0.0
    return unit, degenerate


def unit_gradient(
    model: DenoiserModel,
    point: DataPoint,
    t: int,
    sched: Schedule,
    noise_seed: int,
    scaled_noise: bool = True,
) -> np.ndarray:
    """gradient / ||gradient||, float32; the zero vector if degenerate."""
    eps = noise_for(noise_seed, t, model.data_dim)
    labels = [point.label] if model.conditional else None
    G = grad_loss_many(model, point.x[np.newaxis, :], labels, t, eps, sched, scaled_noise)
    unit, _ = normalize_rows(G)
    return unit[0]


def cache_sample(
    ctx: SketchContext,
    model: DenoiserModel,
    point: DataPoint,
    plan: TimestepPlan,
    sched: Schedule,
    noise_seed: int,
    scaled_noise: bool = True,
    normalize: bool = True,
) -> np.ndarray:
    """Compressed unit gradients of one sample, shape (S, target_dim) f32.

    Queries are compressed through this exact path too; there is nothing
    sample-specific about it beyond the data point.
    """
    if ctx.config.param_count != model.n_params:
        raise IncompatibleCacheError(
            f"context is for {ctx.config.param_count} parameters, "
            f"model has {model.n_params}"
        )
    out = np.empty((len(plan), ctx.config.target_dim), dtype=np.float32)
    labels = [point.label] if model.conditional else None
    for row, t in enumerate(plan.steps):
        eps = noise_for(noise_seed, t, model.data_dim)
        G = grad_loss_many(model, point.x[np.newaxis, :], labels, t, eps, sched, scaled_noise)
        u, _ = normalize_rows(G, normalize)
        out[row] = compress(ctx, u[0])
    return out


class CacheChunk(NamedTuple):
    sample_ids: np.ndarray           # (B,) uint64
    sketches: np.ndarray             # (B, S, v) float32
    degenerate: list[tuple[int, int]]  # (sample_id, t) pairs flagged zero


def cache_dataset(
    ctx: SketchContext,
    model: DenoiserModel,
    dataset: Dataset,
    plan: TimestepPlan,
    sched: Schedule,
    noise_seed: int,
    scaled_noise: bool = True,
    normalize: bool = True,
    noise_mode: str = "shared",
    chunk: int = 128,
    threads: int = 1,
) -> Iterator[CacheChunk]:
    """Stream compressed gradients for a whole dataset, chunk by chunk.

    Chunk boundaries are fixed by ``chunk`` alone, so results do not depend
    on ``threads``; worker outputs are reassembled in sample order.
    """
    if ctx.config.param_count != model.n_params:
        raise IncompatibleCacheError(
            f"context is for {ctx.config.param_count} parameters, "
            f"model has {model.n_params}"
        )
    if noise_mode not in ("shared", "per-sample"):
        raise ConfigError(f"unknown noise mode {noise_mode!r}")
    n = len(dataset)
    spans = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]

    def build(span: tuple[int, int]) -> CacheChunk:
        lo, hi = span
        ids = np.arange(lo, hi, dtype=np.uint64)
        xs = dataset.xs[lo:hi]
        labels = dataset.labels[lo:hi] if model.conditional else None
        sk = np.empty((hi - lo, len(plan), ctx.config.target_dim), dtype=np.float32)
        flagged: list[tuple[int, int]] = []
        for row, t in enumerate(plan.steps):
            if noise_mode == "shared":
                eps = noise_for(noise_seed, t, model.data_dim)
                G = grad_loss_many(model, xs, labels, t, eps, sched, scaled_noise)
            else:
                G = np.stack([
                    grad_loss_many(
                        model, xs[b : b + 1],
                        None if labels is None else labels[b : b + 1],
                        t,
                        noise_for_sample(noise_seed, t, model.data_dim, lo + b),
                        sched, scaled_noise,
                    )[0]
                    for b in range(hi - lo)
                ])
            unit, degenerate = normalize_rows(G, normalize)
            sk[:, row, :] = compress(ctx, unit)
            for b in np.flatnonzero(degenerate):
                flagged.append((lo + int(b), t))
        return CacheChunk(ids, sk, flagged)

    if threads <= 1 or len(spans) <= 1:
        for span in spans:
            yield build(span)
        return
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(build, spans)


def score_compressed(
    query_sketches: np.ndarray,
    records: Iterable[tuple[int, np.ndarray]],
    scale: ScaleConstants = ScaleConstants(),
) -> list[InfluenceRecord]:
    """Exact scan over a compressed cache: one inner product per record.

    ``records`` yields (sample_id, sketches) pairs; memory stays bounded by
    one record.  The per-record reduction runs over timesteps in plan order
    then sketch components, so repeated runs agree bitwise.
    """
    q = np.asarray(query_sketches, dtype=np.float32)
    if q.ndim != 2:
        raise IncompatibleCacheError("query sketches must have shape (S, v)")
    qflat = q.reshape(-1).astype(np.float64)
    out: list[InfluenceRecord] = []
    for sample_id, sk in records:
        sk = np.asarray(sk)
        if sk.shape != q.shape:
            raise IncompatibleCacheError(
                f"record shape {sk.shape} does not match query {q.shape}"
            )
        raw = float(np.dot(sk.reshape(-1).astype(np.float64), qflat))
        out.append(InfluenceRecord(int(sample_id), scale.value * raw))
    return out


def exact_scores(
    model: DenoiserModel,
    queries: Sequence[DataPoint],
    dataset: Dataset,
    plan: TimestepPlan,
    sched: Schedule,
    noise_seed: int,
    scale: ScaleConstants = ScaleConstants(),
    scaled_noise: bool = True,
    normalize: bool = True,
    chunk: int = 128,
) -> np.ndarray:
    """Uncompressed influence scores, shape (n_queries, n_samples).

    The oracle path: unit gradients dotted directly, no sketching.  Walks
    timesteps in the outer loop so each sample gradient is computed once
    however many queries there are.
    """
    nq, n = len(queries), len(dataset)
    qx = np.stack([np.asarray(p.x, dtype=np.float32) for p in queries])
    qlabels = [p.label for p in queries] if model.conditional else None
    scores = np.zeros((nq, n), dtype=np.float64)
    for t in plan.steps:
        eps = noise_for(noise_seed, t, model.data_dim)
        QG = grad_loss_many(model, qx, qlabels, t, eps, sched, scaled_noise)
        qunit, _ = normalize_rows(QG, normalize)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            labels = dataset.labels[lo:hi] if model.conditional else None
            G = grad_loss_many(model, dataset.xs[lo:hi], labels, t, eps, sched, scaled_noise)
            unit, _ = normalize_rows(G, normalize)
            scores[:, lo:hi] += qunit.astype(np.float64) @ unit.astype(np.float64).T
    return scale.value * scores


def score_exact(
    model: DenoiserModel,
    query_point: DataPoint,
    dataset: Dataset,
    plan: TimestepPlan,
    sched: Schedule,
    noise_seed: int,
    scale: ScaleConstants = ScaleConstants(),
    scaled_noise: bool = True,
    normalize: bool = True,
) -> list[InfluenceRecord]:
    """Influence of every training sample on one query, uncompressed."""
    row = exact_scores(
        model, [query_point], dataset, plan, sched, noise_seed, scale,
        scaled_noise, normalize,
    )[0]
    return [InfluenceRecord(i, float(s)) for i, s in enumerate(row)]


def topk(records: Iterable[InfluenceRecord], k: int) -> list[InfluenceRecord]:
    """Top k by descending score; ties broken by ascending sample id."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ranked = sorted(records, key=lambda r: (-r.score, r.sample_id))
    return ranked[:k]
