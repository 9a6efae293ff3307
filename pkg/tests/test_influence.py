import numpy as np
import pytest
from scipy import stats

from diffinf import influence as inf
from diffinf import store
from diffinf.diffusion import DataPoint
from diffinf.errors import ConfigError, IncompatibleCacheError
from diffinf.sketch import compress, derive_context


# ---------------------------------------------------------------------------
# timestep plans


def test_plan_evenly_spaced():
    plan = inf.plan_timesteps(1000, 10)
    assert plan.steps == tuple(range(100, 1001, 100))


def test_plan_full_and_single():
    assert inf.plan_timesteps(7, 7).steps == (1, 2, 3, 4, 5, 6, 7)
    assert inf.plan_timesteps(1000, 1).steps == (1000,)


def test_plan_strictly_increasing_for_awkward_ratios():
    for T in (3, 5, 10, 17, 999):
        for S in (1, 2, 3, min(T, 7), T):
            steps = inf.plan_timesteps(T, S).steps
            assert len(steps) == S
            assert all(a < b for a, b in zip(steps, steps[1:]))
            assert steps[-1] == T and steps[0] >= 1


def test_plan_validation():
    with pytest.raises(ConfigError):
        inf.plan_timesteps(5, 6)
    with pytest.raises(ConfigError):
        inf.plan_timesteps(5, 0)
    with pytest.raises(ConfigError):
        inf.TimestepPlan((3, 2), 5)
    with pytest.raises(ConfigError):
        inf.TimestepPlan((0, 2), 5)


# ---------------------------------------------------------------------------
# shared noise


def test_noise_for_deterministic_and_distinct():
    a = inf.noise_for(9, 5, 64)
    b = inf.noise_for(9, 5, 64)
    c = inf.noise_for(9, 6, 64)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_for_moments():
    pooled = np.concatenate([inf.noise_for(3, t, 100) for t in range(1, 101)])
    assert abs(pooled.mean()) < 0.05
    assert abs(pooled.var() - 1.0) < 0.05


def test_per_sample_noise_differs_by_sample():
    a = inf.noise_for_sample(3, 5, 32, sample_id=0)
    b = inf.noise_for_sample(3, 5, 32, sample_id=1)
    shared = inf.noise_for(3, 5, 32)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, shared)


# ---------------------------------------------------------------------------
# normalization


def test_unit_gradient_has_unit_norm(tiny):
    u = inf.unit_gradient(tiny.model, tiny.dataset.point(0), 50, tiny.sched, 99)
    assert abs(np.linalg.norm(u.astype(np.float64)) - 1.0) < 1e-6


def test_normalization_is_scale_invariant():
    g = np.random.default_rng(0).normal(size=(1, 400))
    a, _ = inf.normalize_rows(g)
    b, _ = inf.normalize_rows(1000.0 * g)
    assert np.max(np.abs(a - b)) < 1e-6


def test_degenerate_gradient_becomes_zero_and_flagged():
    rows = np.vstack([np.zeros(10), np.ones(10)])
    unit, flags = inf.normalize_rows(rows)
    assert flags.tolist() == [True, False]
    assert np.array_equal(unit[0], np.zeros(10, np.float32))


def test_normalize_off_passes_rows_through():
    rows = np.random.default_rng(1).normal(size=(3, 16)).astype(np.float32)
    out, flags = inf.normalize_rows(rows, normalize=False)
    assert np.array_equal(out, rows)
    assert not flags.any()


# ---------------------------------------------------------------------------
# caching


def test_cache_sample_shape_and_payload(tiny):
    ctx = derive_context(tiny.model.n_params, 64, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 5)
    sk = inf.cache_sample(ctx, tiny.model, tiny.dataset.point(3), plan, tiny.sched, 99)
    assert sk.shape == (5, 64) and sk.dtype == np.float32
    # paper-scale payload arithmetic lives in the store formulas
    assert store.record_bytes(10, 4096) == 8 + 163840
    assert store.record_bytes(5, 4096) == 8 + 81920


def test_cache_sample_deterministic(tiny):
    ctx = derive_context(tiny.model.n_params, 64, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 5)
    point = tiny.dataset.point(7)
    a = inf.cache_sample(ctx, tiny.model, point, plan, tiny.sched, 99)
    b = inf.cache_sample(ctx, tiny.model, point, plan, tiny.sched, 99)
    assert a.tobytes() == b.tobytes()


def test_cache_sample_param_count_mismatch(tiny):
    ctx = derive_context(tiny.model.n_params + 1, 64, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 2)
    with pytest.raises(IncompatibleCacheError):
        inf.cache_sample(ctx, tiny.model, tiny.dataset.point(0), plan, tiny.sched, 99)


def test_cache_dataset_matches_cache_sample(tiny):
    ctx = derive_context(tiny.model.n_params, 64, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 3)
    chunks = list(inf.cache_dataset(ctx, tiny.model, tiny.dataset, plan,
                                    tiny.sched, 99, chunk=50))
    ids = np.concatenate([c.sample_ids for c in chunks])
    assert ids.tolist() == list(range(len(tiny.dataset)))
    sk0 = inf.cache_sample(ctx, tiny.model, tiny.dataset.point(0), plan, tiny.sched, 99)
    got = chunks[0].sketches[0]
    assert np.max(np.abs(got - sk0)) < 1e-5 * max(np.abs(sk0).max(), 1e-6)


def test_cache_dataset_threads_do_not_change_bytes(tiny):
    ctx = derive_context(tiny.model.n_params, 32, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 2)
    one = np.concatenate([c.sketches for c in inf.cache_dataset(
        ctx, tiny.model, tiny.dataset, plan, tiny.sched, 99, chunk=32, threads=1)])
    two = np.concatenate([c.sketches for c in inf.cache_dataset(
        ctx, tiny.model, tiny.dataset, plan, tiny.sched, 99, chunk=32, threads=2)])
    assert one.tobytes() == two.tobytes()


# ---------------------------------------------------------------------------
# compressed scoring


def _synthetic_records(n, S, v, seed):
    g = np.random.default_rng(seed)
    return [(i, g.normal(size=(S, v)).astype(np.float32)) for i in range(n)]


def test_score_compressed_against_bruteforce_oracle():
    records = _synthetic_records(10, 4, 32, seed=0)
    q = records[3][1]
    scale = inf.ScaleConstants(7, 0.5)
    got = inf.score_compressed(q, records, scale)
    for rec, (sid, sk) in zip(got, records):
        expected = 7 * 0.5 * float(
            np.sum(sk.astype(np.float64) * q.astype(np.float64))
        )
        assert rec.sample_id == sid
        assert rec.score == pytest.approx(expected, rel=1e-12)
    # self-score dominates a cache of independent random vectors
    assert max(got, key=lambda r: r.score).sample_id == 3


def test_score_compressed_zero_query():
    records = _synthetic_records(5, 2, 8, seed=1)
    got = inf.score_compressed(np.zeros((2, 8), np.float32), records)
    assert all(r.score == 0.0 for r in got)


def test_score_compressed_scaling_preserves_ranking():
    records = _synthetic_records(20, 2, 16, seed=2)
    q = records[0][1]
    base = inf.score_compressed(q, records, inf.ScaleConstants(1, 1))
    double = inf.score_compressed(q, records, inf.ScaleConstants(2, 1))
    assert [r.score * 2 for r in base] == pytest.approx([r.score for r in double])
    order = lambda rs: [r.sample_id for r in inf.topk(rs, len(rs))]
    assert order(base) == order(double)


def test_score_compressed_shape_mismatch():
    records = _synthetic_records(3, 2, 8, seed=3)
    with pytest.raises(IncompatibleCacheError):
        inf.score_compressed(np.zeros((2, 9), np.float32), records)


def test_streaming_scan_equals_in_memory(tiny, tmp_path):
    ctx = derive_context(tiny.model.n_params, 32, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 2)
    in_memory = []
    manifest = store.Manifest(
        model_hash=store.model_hash(tiny.model),
        param_count=tiny.model.n_params,
        padded_len=ctx.config.padded_len,
        target_dim=32, plan_steps=plan.steps, T=tiny.sched.T,
        sketch_seed=31, noise_seed=99, sample_count=0,
        epochs=tiny.epochs, avg_lr=tiny.avg_lr,
    )
    writer = store.CacheWriter(tmp_path / "cache", manifest, ctx)
    for chunk in inf.cache_dataset(ctx, tiny.model, tiny.dataset, plan, tiny.sched, 99):
        pairs = list(zip(chunk.sample_ids.tolist(), chunk.sketches))
        in_memory.extend(pairs)
        writer.add(pairs)
    writer.finish()

    q = inf.cache_sample(ctx, tiny.model, tiny.heldout.point(0), plan, tiny.sched, 99)
    scale = inf.ScaleConstants(tiny.epochs, tiny.avg_lr)
    streamed = inf.score_compressed(q, store.scan_cache(tmp_path / "cache"), scale)
    direct = inf.score_compressed(q, in_memory, scale)
    assert streamed == direct  # bitwise: same ids, same float scores


# ---------------------------------------------------------------------------
# exact scoring


def test_self_query_scores_epochs_lr_times_steps(tiny):
    plan = inf.plan_timesteps(tiny.sched.T, 4)
    scale = inf.ScaleConstants(3, 0.25)
    records = inf.score_exact(
        tiny.model, tiny.dataset.point(5), tiny.dataset, plan, tiny.sched, 99, scale
    )
    self_score = records[5].score
    assert self_score == pytest.approx(3 * 0.25 * 4, rel=1e-5)


def test_exact_terms_bounded_by_one(tiny):
    # single-timestep plans expose each term; unit vectors bound it by 1
    for t in (20, 120, 200):
        plan = inf.TimestepPlan((t,), tiny.sched.T)
        mat = inf.exact_scores(
            tiny.model, [tiny.heldout.point(1)], tiny.dataset, plan, tiny.sched, 99
        )
        assert np.all(mat <= 1.0 + 1e-6) and np.all(mat >= -1.0 - 1e-6)


def test_cached_and_queried_self_influence_consistent(tiny):
    # no drift between cache-time and query-time gradients under one seed
    ctx = derive_context(tiny.model.n_params, 256, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 3)
    point = tiny.dataset.point(11)
    cached = inf.cache_sample(ctx, tiny.model, point, plan, tiny.sched, 99)
    queried = inf.cache_sample(ctx, tiny.model, point, plan, tiny.sched, 99)
    via_scan = inf.score_compressed(queried, [(11, cached)])[0].score
    one_pass = float(np.sum(cached.astype(np.float64) ** 2))
    assert via_scan == pytest.approx(one_pass, rel=1e-6)


def test_compressed_tracks_exact_ranking(tiny):
    ctx = derive_context(tiny.model.n_params, 512, seed=31)
    plan = inf.plan_timesteps(tiny.sched.T, 5)
    queries = [tiny.heldout.point(i) for i in range(6)]
    exact = inf.exact_scores(tiny.model, queries, tiny.dataset, plan, tiny.sched, 99)
    records = []
    for chunk in inf.cache_dataset(ctx, tiny.model, tiny.dataset, plan, tiny.sched, 99):
        records.extend(zip(chunk.sample_ids.tolist(), chunk.sketches))
    for qi, q in enumerate(queries):
        qsk = inf.cache_sample(ctx, tiny.model, q, plan, tiny.sched, 99)
        comp = np.array([r.score for r in inf.score_compressed(qsk, records)])
        rho = stats.spearmanr(exact[qi], comp).statistic
        assert rho >= 0.9


# ---------------------------------------------------------------------------
# topk


def test_topk_basic():
    recs = [inf.InfluenceRecord(0, 3.0), inf.InfluenceRecord(1, 1.0),
            inf.InfluenceRecord(2, 2.0)]
    assert [r.sample_id for r in inf.topk(recs, 2)] == [0, 2]


def test_topk_tie_breaks_by_id():
    recs = [inf.InfluenceRecord(1, 1.0), inf.InfluenceRecord(0, 1.0)]
    assert [r.sample_id for r in inf.topk(recs, 1)] == [0]


def test_topk_clips_to_length():
    recs = [inf.InfluenceRecord(0, 1.0)]
    assert len(inf.topk(recs, 10)) == 1
    with pytest.raises(ConfigError):
        inf.topk(recs, 0)


def test_ranking_invariant_under_positive_scaling():
    records = _synthetic_records(50, 2, 16, seed=5)
    g = np.random.default_rng(6)
    for _ in range(10):
        q = g.normal(size=(2, 16)).astype(np.float32)
        base = [r.sample_id for r in inf.topk(
            inf.score_compressed(q, records, inf.ScaleConstants(1, 1)), 50)]
        for c in (0.5, 3.0, 1000.0):
            scaled = [r.sample_id for r in inf.topk(
                inf.score_compressed(q, records, inf.ScaleConstants(c, 1)), 50)]
            assert scaled == base
