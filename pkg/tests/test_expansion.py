import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eclm.expansion import (
    SeedList, brute_force_query, build_partition_index, check_threshold, expand_threshold,
    expand_top_n, read_seed_list, score_candidates,
)


def polar(deg):
    return np.array([math.cos(math.radians(deg)), math.sin(math.radians(deg))])


def test_equal_vector_scores_one_in_max_sim():
    emb = {"s1": np.array([1.0, 2.0]), "s2": np.array([-1.0, 0.5]), "c": np.array([2.0, 4.0])}
    scored = dict(score_candidates(["s1", "s2"], ["c"], emb, "max-sim"))
    assert scored["c"] == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("mode", ["centroid", "max-sim"])
def test_orthogonal_candidate_scores_zero(mode):
    emb = {"s1": np.array([1.0, 0.0, 0.0]), "s2": np.array([2.0, 0.0, 0.0]), "c": np.array([0.0, 0.0, 3.0])}
    assert score_candidates(["s1", "s2"], ["c"], emb, mode) == [("c", 0.0)]


def test_hand_angles():
    emb = {f"s{i}": 2.0 * polar(a) for i, a in enumerate((0, 30, 60))}
    angles = {"a": 10, "b": 45, "c": 90, "d": 180, "e": -40}
    emb.update({k: polar(a) * (1 + i) for i, (k, a) in enumerate(angles.items())})
    seeds = ["s0", "s1", "s2"]
    cent = dict(score_candidates(seeds, list(angles), emb, "centroid"))
    # centroid direction is 30 degrees
    for k, a in angles.items():
        assert cent[k] == pytest.approx(math.cos(math.radians(a - 30)), abs=1e-12)
    maxs = dict(score_candidates(seeds, list(angles), emb, "max-sim"))
    for k, a in angles.items():
        assert maxs[k] == pytest.approx(max(math.cos(math.radians(a - s)) for s in (0, 30, 60)), abs=1e-12)
    order = [u for u, _ in score_candidates(seeds, list(angles), emb, "centroid")]
    assert order == ["b", "a", "c", "e", "d"]


def test_seeds_removed_and_ties_by_label():
    emb = {"s": np.array([1.0, 0.0]), "b": np.array([1.0, 1.0]), "a": np.array([2.0, 2.0])}
    scored = score_candidates(["s"], ["s", "b", "a"], emb)
    assert [u for u, _ in scored] == ["a", "b"]


def test_empty_candidates_warns(caplog):
    emb = {"s": np.array([1.0, 0.0])}
    assert score_candidates(["s"], ["s"], emb) == []
    assert "no candidates" in caplog.text


def test_seed_list_validation(tmp_path):
    with pytest.raises(ValueError):
        SeedList([])
    with pytest.raises(ValueError):
        SeedList(["a", "a"])
    (tmp_path / "s.txt").write_text("u1\nu2\n\n")
    assert read_seed_list(tmp_path / "s.txt").users == ["u1", "u2"]
    with pytest.raises(KeyError):
        score_candidates(["zz"], ["a"], {"a": np.ones(2)})


def test_threshold_rules():
    scored = [("a", 0.9), ("b", 0.7), ("c", 0.5), ("d", 0.2), ("e", -0.4)]
    assert expand_threshold(scored, -1.0).users == ["a", "b", "c", "d", "e"]
    assert expand_threshold(scored, 0.5).users == ["a", "b", "c"]
    with pytest.raises(ValueError):
        check_threshold(1.0 + 1e-9)
    with pytest.raises(ValueError):
        expand_threshold(scored, -1.5)


def test_top_n_rules():
    scored = [("a", 0.9), ("c", 0.5), ("b", 0.5), ("d", 0.2)]
    assert expand_top_n(scored, 10).users == ["a", "b", "c", "d"]
    assert expand_top_n(scored, 1).users == ["a"]
    assert expand_top_n(scored, 2).users == ["a", "b"]
    with pytest.raises(ValueError):
        expand_top_n(scored, 0)


scores = st.lists(st.tuples(st.text("abcdef", min_size=1, max_size=3), st.floats(-1, 1)),
                  min_size=1, max_size=30, unique_by=lambda x: x[0])


@given(scores, st.integers(1, 30))
def test_top_n_prefix(scored, n):
    a, b = expand_top_n(scored, n).users, expand_top_n(scored, n + 1).users
    assert b[:len(a)] == a


@given(scores, st.floats(-1, 1), st.floats(-1, 1))
def test_threshold_nested(scored, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert set(expand_threshold(scored, hi).users) <= set(expand_threshold(scored, lo).users)


@given(st.permutations(["s0", "s1", "s2", "s3"]))
def test_centroid_permutation_invariant(perm):
    rng = np.random.default_rng(0)
    emb = {k: rng.normal(size=4) for k in ["s0", "s1", "s2", "s3", "x", "y", "z"]}
    ref = score_candidates(["s0", "s1", "s2", "s3"], ["x", "y", "z"], emb)
    got = score_candidates(list(perm), ["x", "y", "z"], emb)
    assert [u for u, _ in got] == [u for u, _ in ref]
    assert np.allclose([s for _, s in got], [s for _, s in ref], atol=1e-14)


@given(st.integers(0, 2**31))
def test_scores_bounded_and_sorted(seed):
    rng = np.random.default_rng(seed)
    emb = {f"u{i}": rng.normal(size=3) for i in range(20)}
    for mode in ("centroid", "max-sim"):
        s = [x for _, x in score_candidates(["u0", "u1"], list(emb), emb, mode)]
        assert all(-1 <= x <= 1 for x in s)
        assert all(a >= b for a, b in zip(s, s[1:]))


# ---------------------------------------------------------------- partition index


def planted(n, d=16, k=20, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, d))
    return centers[rng.integers(0, k, n)] + 0.3 * rng.normal(size=(n, d))


def test_full_probe_is_brute_force():
    X = planted(1000)
    index = build_partition_index(X, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.normal(size=X.shape[1])
        ids, sc = index.query(q, 25, n_probe=index.n_partitions)
        bids, bsc = brute_force_query(X, q, 25)
        assert np.array_equal(ids, bids)
        assert sc.tobytes() == bsc.tobytes()


def test_default_probe_recall():
    X = planted(1000)
    index = build_partition_index(X, seed=0)
    assert index.n_partitions == math.ceil(math.sqrt(1000))
    assert index.n_probe == math.ceil(index.n_partitions / 4)
    rng = np.random.default_rng(5)
    hits = 0
    qs = X[rng.choice(1000, 100, replace=False)] + 0.05 * rng.normal(size=(100, X.shape[1]))
    for q in qs:
        ids, _ = index.query(q, 10)
        bids, _ = brute_force_query(X, q, 10)
        hits += len(set(ids) & set(bids))
    assert hits / 1000 >= 0.9


def test_stored_vector_ranks_first():
    X = planted(300, seed=3)
    index = build_partition_index(X)
    for i in (0, 17, 299):
        ids, _ = index.query(X[i], 1)
        assert ids[0] == i


def test_k_larger_than_n_returns_all():
    X = planted(12, d=4)
    index = build_partition_index(X)
    ids, _ = index.query(X[0], 50, n_probe=index.n_partitions)
    assert sorted(ids.tolist()) == list(range(12))


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        build_partition_index(np.zeros((0, 3)))
