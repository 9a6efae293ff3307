import numpy as np
import pytest

from diffinf import knn
from diffinf.errors import ConfigError, DimensionError, FormatError, IncompatibleCacheError


def _clustered_records(n, dim, n_centers, seed, noise=0.3):
    g = np.random.default_rng(seed)
    centers = g.normal(size=(n_centers, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    X = centers[g.integers(0, n_centers, n)] + noise * g.normal(size=(n, dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return [(i, X[i].astype(np.float32)) for i in range(n)], centers


def _probes(centers, count, seed, noise=0.3):
    g = np.random.default_rng(seed)
    idx = g.integers(0, len(centers), count)
    P = centers[idx] + noise * g.normal(size=(count, centers.shape[1]))
    return P.astype(np.float32)


def _recall(index, records, probes, k, ef=None):
    hits = 0
    for p in probes:
        approx = {i for i, _ in index.query(p, k, ef=ef)}
        exact = {i for i, _ in knn.exact_search(records, p, k)}
        hits += len(approx & exact)
    return hits / (k * len(probes))


def test_orthonormal_self_query():
    records = [(i, np.eye(10, dtype=np.float32)[i]) for i in range(10)]
    index = knn.build_index(records, knn.IndexParams(4, 50, 50), seed=1)
    for i in range(10):
        top = index.query(np.eye(10, dtype=np.float32)[i], 1)
        assert top[0][0] == i
        assert top[0][1] == pytest.approx(1.0)


def test_build_deterministic_given_seed():
    records, centers = _clustered_records(400, 32, 10, seed=2)
    probes = _probes(centers, 20, seed=3)
    a = knn.build_index(records, knn.IndexParams(), seed=5)
    b = knn.build_index(records, knn.IndexParams(), seed=5)
    for p in probes:
        assert a.query(p, 10) == b.query(p, 10)


def test_recall_against_exact_oracle():
    records, centers = _clustered_records(1000, 64, 20, seed=4)
    index = knn.build_index(records, knn.IndexParams(16, 200, 200), seed=6)
    probes = _probes(centers, 50, seed=7)
    assert _recall(index, records, probes, 10) >= 0.9


def test_full_beam_matches_exact_search():
    records, centers = _clustered_records(100, 16, 5, seed=8)
    index = knn.build_index(records, knn.IndexParams(16, 100, 100), seed=9)
    for p in _probes(centers, 20, seed=10):
        approx = [i for i, _ in index.query(p, 10, ef=100)]
        exact = [i for i, _ in knn.exact_search(records, p, 10)]
        assert approx == exact


def test_results_subset_of_exact_top_ef():
    records, centers = _clustered_records(1000, 32, 15, seed=11)
    index = knn.build_index(records, knn.IndexParams(16, 200, 200), seed=12)
    for p in _probes(centers, 50, seed=13):
        approx = {i for i, _ in index.query(p, 10, ef=200)}
        top_ef = {i for i, _ in knn.exact_search(records, p, 200)}
        assert approx <= top_ef


def test_recall_monotone_in_ef():
    records, centers = _clustered_records(1000, 32, 15, seed=14)
    index = knn.build_index(records, knn.IndexParams(8, 60, 200), seed=15)
    probes = _probes(centers, 100, seed=16)
    recalls = [_recall(index, records, probes, 10, ef=ef) for ef in (10, 50, 200)]
    assert recalls[0] <= recalls[1] <= recalls[2]


def test_inner_product_and_cosine_orderings_agree():
    # sketches of normalized gradients have nearly equal norms, so the two
    # orderings should be statistically indistinguishable
    from scipy import stats
    g = np.random.default_rng(17)
    S, v = 5, 64
    base = g.normal(size=(300, S * v))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    norms = np.sqrt(S) * (1 + 0.02 * g.normal(size=(300, 1)))
    X = (base * norms).astype(np.float32)
    for _ in range(10):
        q = g.normal(size=S * v).astype(np.float32)
        ip = X.astype(np.float64) @ q.astype(np.float64)
        cos = ip / np.linalg.norm(X.astype(np.float64), axis=1)
        assert stats.spearmanr(ip, cos).statistic >= 0.99


def test_save_load_roundtrip(tmp_path):
    records, centers = _clustered_records(300, 24, 8, seed=18)
    index = knn.build_index(records, knn.IndexParams(), seed=19,
                            manifest_hash="cd" * 32)
    path = tmp_path / "index.dmix"
    index.save(path)
    back = knn.HnswIndex.load(path, expect_manifest_hash="cd" * 32)
    for p in _probes(centers, 100, seed=20):
        assert index.query(p, 10) == back.query(p, 10)


def test_load_rejects_wrong_manifest_hash(tmp_path):
    records, _ = _clustered_records(50, 8, 3, seed=21)
    index = knn.build_index(records, knn.IndexParams(), seed=22,
                            manifest_hash="cd" * 32)
    index.save(tmp_path / "index.dmix")
    with pytest.raises(IncompatibleCacheError):
        knn.HnswIndex.load(tmp_path / "index.dmix", expect_manifest_hash="ef" * 32)


def test_load_rejects_corruption(tmp_path):
    records, _ = _clustered_records(50, 8, 3, seed=23)
    index = knn.build_index(records, knn.IndexParams(), seed=24)
    path = tmp_path / "index.dmix"
    index.save(path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.dmix").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        knn.HnswIndex.load(tmp_path / "bad_magic.dmix")
    (tmp_path / "truncated.dmix").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        knn.HnswIndex.load(tmp_path / "truncated.dmix")


def test_empty_build_rejected():
    with pytest.raises(ConfigError):
        knn.build_index([], knn.IndexParams(), seed=1)


def test_query_validation():
    records, _ = _clustered_records(50, 8, 3, seed=25)
    index = knn.build_index(records, knn.IndexParams(), seed=26)
    with pytest.raises(DimensionError):
        index.query(np.zeros(9, np.float32), 5)
    with pytest.raises(ConfigError):
        index.query(np.zeros(8, np.float32), 5, ef=3)  # ef < k
    with pytest.raises(ConfigError):
        knn.IndexParams(M=0)


def test_exact_search_hand_ranked():
    records = [(0, np.array([1.0, 0.0])), (1, np.array([0.0, 2.0])),
               (2, np.array([0.5, 0.5]))]
    got = knn.exact_search(records, np.array([1.0, 1.0]), 3)
    # scores: id1 -> 2.0; id0 -> 1.0; id2 -> 1.0; tie broken by id
    assert got[0] == (1, 2.0)
    assert got[1] == (0, 1.0)
    assert got[2] == (2, 1.0)
