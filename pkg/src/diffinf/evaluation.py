"""Evaluation protocol at desk scale: detection rate, fidelity, recall, cost.

The end-to-end experiment generates clustered data, trains the toy
denoiser, caches compressed gradients, builds the retrieval index, then
scores two kinds of queries per cluster -- fresh held-out points and
model-generated samples -- through three paths: exact (uncompressed
oracle), compressed scan, and KNN.  Detection rate is the fraction of a
query's top-k that shares the query's cluster; the random baseline for it
is the cluster's share of the training data.

Reports are split into a deterministic part (metrics; byte-identical
across reruns of the same config) and wall-clock timings, which are
written separately precisely because they can never be deterministic.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import knn, store
from .diffusion import (
    ClusterSpec, DataPoint, Dataset, gen_clusters, init_model,
    make_cluster_means, make_schedule, sample_ddpm_batch, train,
)
from .errors import ConfigError, DiffinfError, InputError, NumericError


class PhaseError(DiffinfError):
    """An experiment phase aborted; the message names the phase."""
from .influence import (
    ScaleConstants, cache_dataset, cache_sample, plan_timesteps,
    score_compressed, exact_scores, topk, InfluenceRecord,
)
from .sketch import derive_context


# ---------------------------------------------------------------------------
# metrics


def detection_rate(topk_ids: Sequence[int], train_labels: np.ndarray,
                   query_label: int, k: int) -> float:
    """Fraction of the first k ids whose training label equals the query's."""
    if k < 1 or k > len(topk_ids):
        raise ConfigError(f"k={k} outside [1, {len(topk_ids)}]")
    train_labels = np.asarray(train_labels)
    hits = 0
    for sid in list(topk_ids)[:k]:
        if not 0 <= sid < len(train_labels):
            raise InputError(f"unknown sample id {sid}")
        hits += int(train_labels[sid] == query_label)
    return hits / k


def recall_at_k(approx_ids: Sequence[int], exact_ids: Sequence[int], k: int) -> float:
    """|approx[:k] intersect exact[:k]| / k."""
    if len(approx_ids) < k or len(exact_ids) < k:
        raise ConfigError(f"both rankings must have at least k={k} entries")
    return len(set(list(approx_ids)[:k]) & set(list(exact_ids)[:k])) / k


def rank_correlation(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ConfigError("need two equal-length score vectors of length >= 2")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise NumericError("rank correlation undefined for constant scores")
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def top_overlap(records_a: Sequence[InfluenceRecord],
                records_b: Sequence[InfluenceRecord], k: int) -> float:
    ids_a = [r.sample_id for r in topk(records_a, k)]
    ids_b = [r.sample_id for r in topk(records_b, k)]
    return len(set(ids_a) & set(ids_b)) / k


# ---------------------------------------------------------------------------
# storage report


@dataclass(frozen=True)
class StorageReport:
    sample_count: int
    timesteps: int
    uncompressed_per_sample: int   # L * 4 * S bytes, the no-compression cost
    payload_per_sample: int        # S * v * 4 bytes actually cached
    shard_file_bytes: int          # on-disk shards incl. headers and ids
    perm_file_bytes: int
    sign_file_bytes: int
    compression_ratio: float       # payload / uncompressed

    def lines(self) -> list[str]:
        def human(n: float) -> str:
            for unit in ("B", "KB", "MB", "GB", "TB"):
                if abs(n) < 1024 or unit == "TB":
                    return f"{n:.2f} {unit}" if unit != "B" else f"{n:.0f} B"
                n /= 1024
            return f"{n:.2f} TB"

        return [
            f"samples cached              {self.sample_count}",
            f"timesteps per sample        {self.timesteps}",
            f"uncompressed per sample     {human(self.uncompressed_per_sample)}",
            f"compressed per sample       {human(self.payload_per_sample)}",
            f"shard files on disk         {human(self.shard_file_bytes)}",
            f"permutation context         {human(self.perm_file_bytes)}",
            f"sign context                {human(self.sign_file_bytes)}",
            f"compression ratio           {100.0 * self.compression_ratio:.5f}%",
        ]


def storage_report(manifest: store.Manifest, directory: Path | None = None) -> StorageReport:
    """Byte accounting for a cache; file sizes are measured when a directory
    is given and derived from the formulas otherwise."""
    S = len(manifest.plan_steps)
    v = manifest.target_dim
    if directory is not None:
        shard_file_bytes = sum(p.stat().st_size for p in store.shard_paths(directory))
        perm_bytes = (Path(directory) / store.PERM_NAME).stat().st_size
        sign_bytes = (Path(directory) / store.SIGN_NAME).stat().st_size
    else:
        shard_file_bytes = store.shard_bytes(manifest.sample_count, S, v)
        perm_bytes = store.perm_file_bytes(manifest.padded_len)
        sign_bytes = store.sign_file_bytes(manifest.padded_len)
    uncompressed = manifest.param_count * 4 * S
    payload = S * v * 4
    return StorageReport(
        sample_count=manifest.sample_count,
        timesteps=S,
        uncompressed_per_sample=uncompressed,
        payload_per_sample=payload,
        shard_file_bytes=shard_file_bytes,
        perm_file_bytes=perm_bytes,
        sign_file_bytes=sign_bytes,
        compression_ratio=payload / uncompressed,
    )


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    n_clusters: int = 3
    per_cluster: int = 300
    conditional: bool = True
    dim: int = 16
    stddev: float = 0.25
    cluster_radius: float = 3.0
    hidden_dim: int = 144
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 150
    lr: float = 0.05
    batch: int = 64
    timesteps: int = 10                 # S
    target_dim: int = 4096              # v
    k_list: tuple[int, ...] = (5, 10, 50)
    M: int = 16
    ef_construction: int = 200
    ef: int = 200
    queries_per_cluster: int = 10
    query_generated: bool = True
    query_heldout: bool = True
    data_seed: int = 101
    heldout_seed: int = 102
    model_seed: int = 103
    train_seed: int = 104
    sketch_seed: int = 105
    noise_seed: int = 106
    sample_seed: int = 107
    index_seed: int = 108
    threads: int = 1

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kv = store.parse_keyvalues(text)
        base = cls()
        kwargs = {}
        for key, raw in kv.items():
            if not hasattr(base, key):
                raise ConfigError(f"unknown experiment config key {key!r}")
            current = getattr(base, key)
            if isinstance(current, bool):
                kwargs[key] = raw == "true"
            elif isinstance(current, tuple):
                kwargs[key] = tuple(int(x) for x in raw.split(",") if x)
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return replace(base, **kwargs)


@dataclass
class EvalReport:
    config_text: str
    metrics: dict[str, float]
    storage: StorageReport
    timings: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        out = ["# evaluation report", "", "[config]"]
        out.extend(self.config_text.strip().splitlines())
        out += ["", "[metrics]"]
        for key in sorted(self.metrics):
            out.append(f"{key} = {self.metrics[key]:.6f}")
        out += ["", "[storage]"]
        out.extend(self.storage.lines())
        return "\n".join(out) + "\n"

    def summary_dict(self) -> dict:
        return {
            "config": store.parse_keyvalues(self.config_text),
            "metrics": {k: round(v, 10) for k, v in sorted(self.metrics.items())},
            "storage": asdict(self.storage),
        }

    def save(self, directory: Path) -> None:
        """report.txt + summary.json are deterministic; timings.json is not."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.to_text(), encoding="utf-8")
        with open(directory / "summary.json", "w", encoding="utf-8") as f:
            json.dump(self.summary_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        with open(directory / "timings.json", "w", encoding="utf-8") as f:
            json.dump({k: round(v, 6) for k, v in sorted(self.timings.items())},
                      f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# the end-to-end experiment


def run_experiment(config: ExperimentConfig, workdir: Path) -> EvalReport:
    """Generate, train, cache, index, query, and measure; see module docs."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    metrics: dict[str, float] = {}

    def phase(name: str):
        return _PhaseTimer(name, timings)

    with phase("gen_data"):
        means = make_cluster_means(
            config.n_clusters, config.dim, config.cluster_radius, config.data_seed
        )
        train_ds = gen_clusters(ClusterSpec(
            config.n_clusters, config.per_cluster, config.dim,
            means, config.stddev, config.data_seed,
        ))
        heldout_ds = gen_clusters(ClusterSpec(
            config.n_clusters, max(config.queries_per_cluster, 1), config.dim,
            means, config.stddev, config.heldout_seed,
        ))

    with phase("train"):
        sched = make_schedule(config.T, config.beta_start, config.beta_end)
        n_classes = config.n_clusters if config.conditional else 0
        model0 = init_model(
            config.dim, config.hidden_dim, n_classes, config.model_seed
        )
        result = train(
            model0, train_ds, config.epochs, config.lr, config.batch,
            sched, config.train_seed,
        )
        model = result.model
    scale = ScaleConstants(result.epochs, result.avg_lr)

    with phase("cache_gradients"):
        plan = plan_timesteps(config.T, config.timesteps)
        ctx = derive_context(model.n_params, config.target_dim, config.sketch_seed)
        cache_dir = workdir / "cache"
        manifest = store.Manifest(
            model_hash=store.model_hash(model),
            param_count=model.n_params,
            padded_len=ctx.config.padded_len,
            target_dim=config.target_dim,
            plan_steps=plan.steps,
            T=config.T,
            sketch_seed=config.sketch_seed,
            noise_seed=config.noise_seed,
            sample_count=0,
            epochs=result.epochs,
            avg_lr=result.avg_lr,
        )
        writer = store.CacheWriter(cache_dir, manifest, ctx)
        for chunk in cache_dataset(ctx, model, train_ds, plan, sched,
                                   config.noise_seed, threads=config.threads):
            writer.add(zip(chunk.sample_ids.tolist(), chunk.sketches))
        manifest = writer.finish()
        records = list(store.scan_cache(cache_dir, manifest))

    with phase("build_index"):
        params = knn.IndexParams(config.M, config.ef_construction, config.ef)
        index = knn.build_index(
            records, params, config.index_seed, store.manifest_hash(cache_dir)
        )
        index.save(workdir / "index.dmix")

    with phase("make_queries"):
        # (tag, point handed to scoring, cluster label used for metrics)
        queries: list[tuple[str, DataPoint, int]] = []
        if config.query_heldout:
            for i in range(len(heldout_ds)):
                point = heldout_ds.point(i)
                eval_label = int(point.label)
                if not config.conditional:
                    point = DataPoint(point.x, None)
                queries.append(("heldout", point, eval_label))
        if config.query_generated:
            labels = np.repeat(np.arange(config.n_clusters),
                               config.queries_per_cluster)
            if config.conditional:
                gen = sample_ddpm_batch(model, sched, labels, config.sample_seed)
                for x, lab in zip(gen, labels):
                    queries.append(("generated", DataPoint(x, int(lab)), int(lab)))
            else:
                gen = sample_ddpm_batch(model, sched, None, config.sample_seed,
                                        n=len(labels))
                near = np.argmin(
                    np.linalg.norm(gen[:, None, :] - means[None], axis=2), axis=1)
                for x, lab in zip(gen, near):
                    queries.append(("generated", DataPoint(x, None), int(lab)))

    with phase("score_exact"):
        points = [q for _, q, _ in queries]
        exact_mat = exact_scores(
            model, points, train_ds, plan, sched, config.noise_seed, scale
        )

    with phase("score_compressed_and_knn"):
        k_max = max(config.k_list)
        per_query: list[dict] = []
        latencies: list[float] = []
        for (tag, point, eval_label), exact_row in zip(queries, exact_mat):
            qsk = cache_sample(ctx, model, point, plan, sched, config.noise_seed)
            comp = score_compressed(qsk, records, scale)
            exact_recs = [InfluenceRecord(i, float(s)) for i, s in enumerate(exact_row)]
            reps = [_timed_query(index, qsk.reshape(-1), k_max) for _ in range(5)]
            latencies.append(float(np.median([t for t, _ in reps])))
            knn_ids = [sid for sid, _ in reps[0][1]]
            exact_sketch_ids = [sid for sid, _ in
                                knn.exact_search(records, qsk.reshape(-1), k_max)]
            per_query.append({
                "tag": tag,
                "label": eval_label,
                "exact": exact_recs,
                "compressed": comp,
                "knn_ids": knn_ids,
                "exact_sketch_ids": exact_sketch_ids,
            })

    with phase("metrics"):
        _fill_metrics(metrics, per_query, train_ds, config)
        timings["knn_query_median_ms"] = 1000.0 * float(np.median(latencies))

    report = EvalReport(
        config_text=config.to_text(),
        metrics=metrics,
        storage=storage_report(manifest, cache_dir),
        timings=timings,
    )
    report.save(workdir)
    return report


class _PhaseTimer:
    def __init__(self, name: str, sink: dict[str, float]):
        self.name = name
        self.sink = sink

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.sink[f"phase_{self.name}_s"] = time.perf_counter() - self.start
        if exc is not None:
            raise PhaseError(f"experiment phase {self.name!r} failed: {exc}") from exc


def _timed_query(index: knn.HnswIndex, q: np.ndarray, k: int):
    t0 = time.perf_counter()
    res = index.query(q, k)
    return time.perf_counter() - t0, res


def _fill_metrics(metrics: dict[str, float], per_query: list[dict],
                  train_ds: Dataset, config: ExperimentConfig) -> None:
    labels = train_ds.labels
    n = len(train_ds)
    share = {
        c: float(np.sum(labels == c)) / n for c in range(config.n_clusters)
    }
    tags = sorted({q["tag"] for q in per_query})
    rng_rand = np.random.default_rng(config.index_seed + 1)

    rho_vals, overlap_vals = [], []
    for q in per_query:
        a = [r.score for r in q["exact"]]
        b = [r.score for r in q["compressed"]]
        rho_vals.append(rank_correlation(a, b))
        overlap_vals.append(top_overlap(q["exact"], q["compressed"], 10))
    metrics["fidelity/spearman_mean"] = float(np.mean(rho_vals))
    metrics["fidelity/spearman_min"] = float(np.min(rho_vals))
    metrics["fidelity/top10_overlap_mean"] = float(np.mean(overlap_vals))

    for k in config.k_list:
        for method in ("exact", "compressed", "knn", "exact_sketch", "random"):
            for scope in ["all"] + tags:
                rates = []
                for q in per_query:
                    if scope != "all" and q["tag"] != scope:
                        continue
                    if method == "exact":
                        ids = [r.sample_id for r in topk(q["exact"], k)]
                    elif method == "compressed":
                        ids = [r.sample_id for r in topk(q["compressed"], k)]
                    elif method == "knn":
                        ids = q["knn_ids"][:k]
                    elif method == "exact_sketch":
                        ids = q["exact_sketch_ids"][:k]
                    else:
                        ids = rng_rand.permutation(n)[:k].tolist()
                    rates.append(detection_rate(ids, labels, q["label"], k))
                metrics[f"detection/{method}/{scope}/k={k}"] = float(np.mean(rates))
        recalls = [recall_at_k(q["knn_ids"], q["exact_sketch_ids"], k)
                   for q in per_query]
        metrics[f"knn/recall/k={k}"] = float(np.mean(recalls))

    metrics["detection/random_expected"] = float(np.mean([
        share[q["label"]] for q in per_query
    ]))


# ---------------------------------------------------------------------------
# index parameter sweep (stability across build settings)


def sweep_index_params(
    records: list[tuple[int, np.ndarray]],
    query_vecs: np.ndarray,
    train_labels: np.ndarray,
    query_labels: Sequence[int],
    k: int,
    M_values: Sequence[int],
    efc_values: Sequence[int],
    ef: int,
    seed: int,
) -> dict[tuple[int, int], float]:
    """Mean detection rate for each (M, ef_construction) build setting."""
    out: dict[tuple[int, int], float] = {}
    for M in M_values:
        for efc in efc_values:
            index = knn.build_index(records, knn.IndexParams(M, efc, ef), seed)
            rates = []
            for qv, lab in zip(query_vecs, query_labels):
                ids = [sid for sid, _ in index.query(qv.reshape(-1), k, ef=ef)]
                rates.append(detection_rate(ids, train_labels, lab, k))
            out[(M, efc)] = float(np.mean(rates))
    return out
