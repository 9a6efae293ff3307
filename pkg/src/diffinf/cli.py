"""Command-line pipeline: gen-data, train, cache-grads, build-index,
score, query, eval, report, validate.

Flag resolution order: built-in default, then a ``--config`` file
(``key = value`` lines, keys named like the long flags), then explicit
flags.  ``DMIN_THREADS`` seeds the ``--threads`` default.  Exit codes:
0 success, 1 usage error, 2 data/format error, 3 numeric error; all
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, knn, store
from .diffusion import (
    ClusterSpec, DataPoint, gen_clusters, init_model, make_cluster_means,
    make_schedule, train,
)
from .errors import (
    ConfigError, DiffinfError, DimensionError, FormatError,
    IncompatibleCacheError, InputError, NumericError,
)
from .evaluation import ExperimentConfig, PhaseError, run_experiment, storage_report
from .influence import (
    ScaleConstants, TimestepPlan, cache_dataset, cache_sample, plan_timesteps,
    score_compressed, score_exact, topk,
)
from .sketch import derive_context


class UsageError(DiffinfError):
    """Bad flags or flag combinations."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


_DEFAULTS = {
    "clusters": 3, "per-cluster": 300, "dim": 16, "stddev": 0.25, "radius": 3.0,
    "heldout-per-cluster": 10,
    "hidden": 144, "epochs": 150, "lr": 0.05, "batch": 64,
    "T": 1000, "beta-start": 1e-4, "beta-end": 0.02,
    "v": 4096, "S": 10, "k": 10,
    "M": 16, "ef-construction": 200, "ef": 200,
    "seed": 0, "data-seed": 101, "heldout-seed": 102, "model-seed": 103,
    "train-seed": 104, "sketch-seed": 105, "noise-seed": 106, "index-seed": 108,
    "mode": "compressed", "cond": "conditional", "forward-noise": "scaled",
    "query-index": 0, "chunk": 128,
}


def _opt(parser, name, cast=int, help_text=""):
    default = _DEFAULTS.get(name)
    suffix = f" (default: {default})" if default is not None else ""
    parser.add_argument(f"--{name}", type=cast, default=None, help=help_text + suffix)


def _flag(parser, name, help_text=""):
    parser.add_argument(f"--{name}", action="store_true", help=help_text)


class _Resolver:
    """Layered flag lookup: CLI value, else --config file, else default."""

    def __init__(self, args):
        self.args = args
        self.config: dict[str, str] = {}
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise UsageError(f"config file not found: {path}")
            self.config = store.parse_keyvalues(path.read_text(encoding="utf-8"))

    def get(self, name: str, cast=int, default=_DEFAULTS):
        attr = name.replace("-", "_")
        val = getattr(self.args, attr, None)
        if val is not None:
            return val
        if name in self.config:
            return cast(self.config[name])
        if default is _DEFAULTS:
            default = _DEFAULTS.get(name)
        return default

    def require(self, name: str, cast=str):
        val = self.get(name, cast, default=None)
        if val is None:
            raise UsageError(f"--{name} is required")
        return val


def _fresh(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")
    return path


def _write_records_tsv(path_or_none, rows) -> None:
    lines = [f"{rank}\t{sid}\t{score!r}" for rank, sid, score in rows]
    text = "\n".join(lines) + "\n"
    if path_or_none is None:
        sys.stdout.write(text)
    else:
        Path(path_or_none).write_text(text, encoding="utf-8")


def _load_query(r: _Resolver, conditional: bool) -> DataPoint:
    qds = store.load_dataset(Path(r.require("query-data")))
    qi = r.get("query-index")
    if not 0 <= qi < len(qds):
        raise UsageError(f"--query-index {qi} outside dataset of {len(qds)}")
    point = qds.point(qi)
    override = r.get("query-label", int, default=None)
    if override is not None:
        point = DataPoint(point.x, override)
    if conditional and point.label is None:
        raise UsageError("conditional model: query needs a label "
                         "(labelled dataset or --query-label)")
    if not conditional:
        point = DataPoint(point.x, None)
    return point


def _open_cache(r: _Resolver):
    cache_dir = Path(r.require("cache"))
    manifest = store.read_manifest(cache_dir)
    manifest.check()
    ck = store.load_checkpoint(Path(r.require("model")))
    if store.model_hash(ck.model) != manifest.model_hash:
        raise IncompatibleCacheError(
            "model checkpoint hash does not match the cache manifest"
        )
    sched = make_schedule(ck.T, ck.beta_start, ck.beta_end)
    plan = TimestepPlan(manifest.plan_steps, manifest.T)
    return cache_dir, manifest, ck, sched, plan


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(r: _Resolver) -> int:
    out = _fresh(r.require("out"), r.args.force)
    clusters = r.get("clusters")
    dim = r.get("dim")
    radius = r.get("radius", float)
    stddev = r.get("stddev", float)
    data_seed = r.get("data-seed")
    means = make_cluster_means(clusters, dim, radius, data_seed)
    ds = gen_clusters(ClusterSpec(
        clusters, r.get("per-cluster"), dim, means, stddev, data_seed))
    store.save_dataset(ds, out)
    print(f"wrote {len(ds)} points -> {out}", file=sys.stderr)
    heldout_out = r.get("heldout-out", str, default=None)
    if heldout_out:
        hout = _fresh(heldout_out, r.args.force)
        held = gen_clusters(ClusterSpec(
            clusters, r.get("heldout-per-cluster"), dim, means,
            stddev, r.get("heldout-seed")))
        store.save_dataset(held, hout)
        print(f"wrote {len(held)} held-out points -> {hout}", file=sys.stderr)
    return 0


def cmd_train(r: _Resolver) -> int:
    out = _fresh(r.require("out"), r.args.force)
    ds = store.load_dataset(Path(r.require("data")))
    conditional = r.get("cond", str) == "conditional"
    if conditional and ds.labels is None:
        raise UsageError("dataset is unlabelled; use --cond unconditional")
    n_classes = int(ds.labels.max()) + 1 if conditional else 0
    T = r.get("T")
    sched = make_schedule(T, r.get("beta-start", float), r.get("beta-end", float))
    model = init_model(ds.xs.shape[1], r.get("hidden"), n_classes, r.get("model-seed"))
    result = train(
        model, ds, r.get("epochs"), r.get("lr", float), r.get("batch"),
        sched, r.get("train-seed"),
        scaled_noise=r.get("forward-noise", str) == "scaled",
    )
    store.save_checkpoint(store.Checkpoint(
        result.model, T, r.get("beta-start", float), r.get("beta-end", float),
        result.epochs, result.avg_lr), out)
    print(f"trained {result.epochs} epochs, loss {result.initial_loss:.4f} -> "
          f"{result.final_loss:.4f}, wrote {out}", file=sys.stderr)
    return 0


def cmd_cache_grads(r: _Resolver) -> int:
    cache_dir = Path(r.require("cache"))
    if cache_dir.exists() and any(cache_dir.iterdir()) and not r.args.force:
        raise UsageError(f"{cache_dir} is not empty; pass --force to overwrite")
    ck = store.load_checkpoint(Path(r.require("model")))
    ds = store.load_dataset(Path(r.require("data")))
    model = ck.model
    v = r.get("v")
    S = r.get("S")
    sched = make_schedule(ck.T, ck.beta_start, ck.beta_end)
    plan = plan_timesteps(ck.T, S)
    ctx = derive_context(model.n_params, v, r.get("sketch-seed"))
    normalize = not r.args.no_normalize
    manifest = store.Manifest(
        model_hash=store.model_hash(model),
        param_count=model.n_params,
        padded_len=ctx.config.padded_len,
        target_dim=v,
        plan_steps=plan.steps,
        T=ck.T,
        sketch_seed=r.get("sketch-seed"),
        noise_seed=r.get("noise-seed"),
        sample_count=0,
        epochs=ck.epochs,
        avg_lr=ck.avg_lr,
        normalize=normalize,
        forward_noise=r.get("forward-noise", str),
    )
    writer = store.CacheWriter(cache_dir, manifest, ctx)
    flagged = 0
    for chunk in cache_dataset(
        ctx, model, ds, plan, sched, r.get("noise-seed"),
        scaled_noise=manifest.forward_noise == "scaled",
        normalize=normalize,
        chunk=r.get("chunk"), threads=r.get("threads"),
    ):
        writer.add(zip(chunk.sample_ids.tolist(), chunk.sketches))
        flagged += len(chunk.degenerate)
    manifest = writer.finish()
    if flagged:
        print(f"warning: {flagged} degenerate (zero) gradients flagged",
              file=sys.stderr)
    print(f"cached {manifest.sample_count} samples x {S} timesteps -> {cache_dir}",
          file=sys.stderr)
    return 0


def cmd_build_index(r: _Resolver) -> int:
    cache_dir = Path(r.require("cache"))
    out = _fresh(r.require("out"), r.args.force)
    manifest = store.read_manifest(cache_dir)
    params = knn.IndexParams(r.get("M"), r.get("ef-construction"), r.get("ef"))
    t0 = time.perf_counter()
    index = knn.build_index(
        store.scan_cache(cache_dir, manifest), params, r.get("index-seed"),
        store.manifest_hash(cache_dir))
    index.save(out)
    print(f"indexed {len(index)} vectors (dim {index.dim}) in "
          f"{time.perf_counter() - t0:.1f} s -> {out}", file=sys.stderr)
    return 0


def _scale_from(r: _Resolver, manifest: store.Manifest) -> ScaleConstants:
    return ScaleConstants(
        r.get("scale-epochs", float, default=float(manifest.epochs)),
        r.get("scale-lr", float, default=manifest.avg_lr),
    )


def cmd_score(r: _Resolver) -> int:
    cache_dir, manifest, ck, sched, plan = _open_cache(r)
    point = _load_query(r, ck.model.conditional)
    scale = _scale_from(r, manifest)
    scaled = manifest.forward_noise == "scaled"
    mode = r.get("mode", str)
    if mode == "exact":
        ds = store.load_dataset(Path(r.require("data")))
        records = score_exact(
            ck.model, point, ds, plan, sched, manifest.noise_seed, scale,
            scaled_noise=scaled, normalize=manifest.normalize)
    elif mode == "compressed":
        ctx = store.read_context(cache_dir, manifest)
        qsk = cache_sample(ctx, ck.model, point, plan, sched, manifest.noise_seed,
                           scaled_noise=scaled, normalize=manifest.normalize)
        records = score_compressed(qsk, store.scan_cache(cache_dir, manifest), scale)
    else:
        raise UsageError(f"--mode must be exact or compressed, got {mode!r}")
    ranked = topk(records, len(records))
    out = r.get("out", str, default=None)
    _write_records_tsv(out, ((i + 1, rec.sample_id, rec.score)
                             for i, rec in enumerate(ranked)))
    return 0


def cmd_query(r: _Resolver) -> int:
    cache_dir, manifest, ck, sched, plan = _open_cache(r)
    index = knn.HnswIndex.load(
        Path(r.require("index")), expect_manifest_hash=store.manifest_hash(cache_dir))
    point = _load_query(r, ck.model.conditional)
    ctx = store.read_context(cache_dir, manifest)
    qsk = cache_sample(ctx, ck.model, point, plan, sched, manifest.noise_seed,
                       scaled_noise=manifest.forward_noise == "scaled",
                       normalize=manifest.normalize)
    k = r.get("k")
    t0 = time.perf_counter()
    results = index.query(qsk.reshape(-1), k, ef=r.get("ef"))
    wall = time.perf_counter() - t0
    out = r.get("out", str, default=None)
    _write_records_tsv(out, ((i + 1, sid, score)
                             for i, (sid, score) in enumerate(results)))
    print(f"wall time: {wall * 1000:.2f} ms", file=sys.stderr)
    return 0


def cmd_eval(r: _Resolver) -> int:
    out_dir = Path(r.require("out"))
    if (out_dir / "report.txt").exists() and not r.args.force:
        raise UsageError(f"{out_dir} already holds a report; pass --force")
    if getattr(r.args, "config", None):
        config = ExperimentConfig.from_text(
            Path(r.args.config).read_text(encoding="utf-8"))
    else:
        config = ExperimentConfig()
    threads = r.get("threads")
    if threads != config.threads:
        from dataclasses import replace
        config = replace(config, threads=threads)
    report = run_experiment(config, out_dir)
    sys.stdout.write(report.to_text())
    print(f"report written to {out_dir}", file=sys.stderr)
    return 0


def cmd_report(r: _Resolver) -> int:
    cache_dir = Path(r.require("cache"))
    manifest = store.read_manifest(cache_dir)
    rep = storage_report(manifest, cache_dir)
    text = "\n".join(rep.lines()) + "\n"
    out = r.get("out", str, default=None)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_validate(r: _Resolver) -> int:
    cache_dir = Path(r.require("cache"))
    report = store.validate(cache_dir)
    print(str(report))
    return 0 if report.ok else 2


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="diffinf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file supplying flag defaults")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        _opt(p, "threads", int, "worker threads for cache builds")

    p = sub.add_parser("gen-data", help="generate clustered synthetic datasets")
    common(p)
    p.add_argument("--out", help="output dataset file (.dmds)")
    p.add_argument("--heldout-out", help="optional held-out dataset file")
    _opt(p, "clusters"); _opt(p, "per-cluster"); _opt(p, "heldout-per-cluster")
    _opt(p, "dim"); _opt(p, "stddev", float); _opt(p, "radius", float)
    _opt(p, "data-seed"); _opt(p, "heldout-seed")

    p = sub.add_parser("train", help="train the toy denoiser")
    common(p)
    p.add_argument("--data"); p.add_argument("--out")
    _opt(p, "hidden"); _opt(p, "epochs"); _opt(p, "lr", float); _opt(p, "batch")
    _opt(p, "T"); _opt(p, "beta-start", float); _opt(p, "beta-end", float)
    _opt(p, "model-seed"); _opt(p, "train-seed")
    _opt(p, "cond", str, "conditional|unconditional")
    _opt(p, "forward-noise", str, "scaled|unscaled forward noising")

    p = sub.add_parser("cache-grads", help="cache compressed gradients")
    common(p)
    p.add_argument("--model"); p.add_argument("--data"); p.add_argument("--cache")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip L2 normalization before compression")
    _opt(p, "v"); _opt(p, "S"); _opt(p, "chunk")
    _opt(p, "sketch-seed"); _opt(p, "noise-seed")
    _opt(p, "forward-noise", str, "scaled|unscaled forward noising")

    p = sub.add_parser("build-index", help="build the HNSW retrieval index")
    common(p)
    p.add_argument("--cache"); p.add_argument("--out")
    _opt(p, "M"); _opt(p, "ef-construction"); _opt(p, "ef"); _opt(p, "index-seed")

    p = sub.add_parser("score", help="score every training sample for a query")
    common(p)
    p.add_argument("--cache"); p.add_argument("--model"); p.add_argument("--data")
    p.add_argument("--query-data"); p.add_argument("--out")
    _opt(p, "query-index"); _opt(p, "query-label")
    _opt(p, "mode", str, "exact|compressed")
    _opt(p, "scale-epochs", float); _opt(p, "scale-lr", float)

    p = sub.add_parser("query", help="top-k retrieval through the index")
    common(p)
    p.add_argument("--cache"); p.add_argument("--model"); p.add_argument("--index")
    p.add_argument("--query-data"); p.add_argument("--out")
    _opt(p, "query-index"); _opt(p, "query-label"); _opt(p, "k"); _opt(p, "ef")

    p = sub.add_parser("eval", help="run the full evaluation experiment")
    common(p)
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("report", help="storage report for a cache")
    common(p)
    p.add_argument("--cache"); p.add_argument("--out")

    p = sub.add_parser("validate", help="integrity-check a cache directory")
    common(p)
    p.add_argument("--cache")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cache-grads": cmd_cache_grads,
    "build-index": cmd_build_index,
    "score": cmd_score,
    "query": cmd_query,
    "eval": cmd_eval,
    "report": cmd_report,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", None) is None:
            env = os.environ.get("DMIN_THREADS")
            if env is not None:
                try:
                    args.threads = int(env)
                except ValueError:
                    raise UsageError(f"DMIN_THREADS is not an integer: {env!r}")
            else:
                args.threads = 1
        return _HANDLERS[args.command](_Resolver(args))
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, IncompatibleCacheError, DimensionError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc.__cause__, NumericError) else 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
