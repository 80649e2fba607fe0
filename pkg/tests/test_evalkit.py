import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from snrkit import evalkit as E


def brute_force_metrics(dist, qids, gids):
    """Definition-level AP and first-hit rank per query with index tie-breaks."""
    aps, first = [], []
    for i in range(len(qids)):
        order = sorted(range(len(gids)), key=lambda j: (dist[i][j], j))
        order = [j for j in order if math.isfinite(dist[i][j])]
        hits, precisions = 0, []
        for r, j in enumerate(order, start=1):
            if gids[j] == qids[i]:
                hits += 1
                precisions.append(hits / r)
        if hits == 0:
            continue
        aps.append(sum(precisions) / hits)
        first.append(next(r for r, j in enumerate(order, start=1) if gids[j] == qids[i]))
    return aps, first


def random_instance(rng, nq=20, ng=12, n_ids=4, ties=False):
    dist = rng.uniform(size=(nq, ng))
    if ties:
        dist = np.round(dist * 4) / 4
    return dist, rng.integers(0, n_ids, nq), rng.integers(0, n_ids, ng)


def test_query_equal_to_gallery_item_has_zero_distance():
    g = np.random.default_rng(0).normal(size=(4, 3))
    d = E.pairwise_distances(g[1:2], g)
    assert d[0, 1] == 0.0
    assert abs(E.pairwise_distances([[1.0, 2.0]], [[-1.0, -2.0]])[0, 0] - 1.0) <= 1e-12


def test_pairwise_matches_loop_oracle():
    rng = np.random.default_rng(1)
    q, g = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    d = E.pairwise_distances(q, g)
    for i in range(3):
        for j in range(5):
            ref = 0.5 - float(q[i] @ g[j]) / (2 * np.linalg.norm(q[i]) * np.linalg.norm(g[j]))
            assert abs(d[i, j] - ref) <= 1e-12


def test_pairwise_errors_and_mask():
    with pytest.raises(ValueError):
        E.pairwise_distances(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        E.pairwise_distances(np.zeros((1, 3)), np.ones((2, 3)))
    d = E.pairwise_distances(np.eye(2), np.eye(2), exclude=np.eye(2, dtype=bool))
    assert np.isinf(d[0, 0]) and d[0, 1] == 0.5


def test_map_hand_examples():
    r = E.rank(np.array([[0.1, 0.5, 0.9]]), [7], [7, 1, 2])
    assert E.mean_average_precision(r) == 1.0
    r = E.rank(np.array([[0.1, 0.2, 0.3, 0.4]]), [7], [7, 1, 7, 2])
    assert abs(E.mean_average_precision(r) - (1 + 2 / 3) / 2) <= 1e-12


def test_cmc_hand_examples():
    r = E.rank(np.array([[0.1, 0.2, 0.3, 0.4, 0.5]]), [7], [1, 2, 7, 3, 4])
    assert E.cmc_rank_k(r, 1) == 0.0 and E.cmc_rank_k(r, 5) == 1.0
    assert E.cmc_rank_k(r, 3) == 1.0 and E.cmc_rank_k(r, 2) == 0.0
    with pytest.raises(ValueError):
        E.cmc_rank_k(r, 0)


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    dist, qids, gids = random_instance(rng, ties=seed % 2 == 1)
    r = E.rank(dist, qids, gids)
    aps, first = brute_force_metrics(dist.tolist(), qids.tolist(), gids.tolist())
    assert abs(E.mean_average_precision(r) - np.mean(aps)) <= 1e-9
    for k in (1, 2, 5, 12):
        assert abs(E.cmc_rank_k(r, k) - np.mean([f <= k for f in first])) <= 1e-9


def test_cmc_counting_oracle_mixed_instance():
    # first-hit ranks 1,1,2,3,3,4,6,8,10,10 over a 10-item gallery
    ranks = [1, 1, 2, 3, 3, 4, 6, 8, 10, 10]
    dist = np.tile(np.arange(10, dtype=float), (10, 1))
    gids = np.full((10, 10), -1)
    for q, fr in enumerate(ranks):
        gids[q, fr - 1] = q
    for k, expect in ((1, 2), (3, 5), (5, 6), (9, 8), (10, 10)):
        hits = sum(E.cmc_rank_k(E.rank(dist[q:q + 1], [q], gids[q]), k) for q in range(10))
        assert hits == expect


def test_queries_without_relevant_items_are_excluded():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    r = E.rank(dist, [1, 9], [1, 2])
    assert r.num_queries == 1
    assert E.mean_average_precision(r) == 1.0
    with pytest.raises(ValueError):
        E.mean_average_precision(E.rank(dist, [8, 9], [1, 2]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cmc_monotone_and_complete(seed):
    rng = np.random.default_rng(seed)
    dist, qids, gids = random_instance(rng, nq=8, ng=10, n_ids=3, ties=True)
    r = E.rank(dist, qids, gids)
    if r.num_queries == 0:
        return
    curve = [E.cmc_rank_k(r, k) for k in range(1, 11)]
    assert all(a <= b for a, b in zip(curve, curve[1:]))
    assert curve[-1] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_invariant_to_gallery_permutation_without_ties(seed):
    rng = np.random.default_rng(seed)
    dist, qids, gids = random_instance(rng, nq=6, ng=9, n_ids=3)
    perm = rng.permutation(9)
    a = E.rank(dist, qids, gids)
    b = E.rank(dist[:, perm], qids, gids[perm])
    if a.num_queries == 0:
        return
    assert E.mean_average_precision(a) == E.mean_average_precision(b)
    assert E.cmc_rank_k(a, 1) == E.cmc_rank_k(b, 1)


def test_ties_broken_by_gallery_index():
    r = E.rank(np.zeros((1, 4)), [0], [1, 0, 0, 1])
    assert r.order.tolist() == [[0, 1, 2, 3]]
    assert abs(E.mean_average_precision(r) - (1 / 2 + 2 / 3) / 2) <= 1e-12


def test_random_embeddings_map_near_prevalence():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(500, 16))
    ids = rng.integers(0, 5, 500)
    d = E.pairwise_distances(emb, emb, exclude=np.eye(500, dtype=bool))
    r = E.rank(d, ids, ids)
    prevalence = np.mean([(ids == ids[i]).sum() - 1 for i in range(500)]) / 499
    assert abs(E.mean_average_precision(r) - prevalence) <= 0.05


# divergence --------------------------------------------------------------------------------

def test_skl_closed_form_unit_shift():
    assert abs(E.gaussian_skl(0.0, 1.0, 1.0, 1.0) - 0.5) <= 1e-9


def kl_quadrature(ma, sa, mb, sb):
    p, q = stats.norm(ma, sa), stats.norm(mb, sb)
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))  # noqa: E731
    return integrate.quad(f, -40, 40, limit=200)[0]


@pytest.mark.parametrize("ma,va,mb,vb", [(0, 1, 0, 4), (0.5, 2, -1, 0.5), (3, 1, 0, 9)])
def test_skl_matches_quadrature(ma, va, mb, vb):
    ref = 0.5 * (kl_quadrature(ma, va**0.5, mb, vb**0.5) + kl_quadrature(mb, vb**0.5, ma, va**0.5))
    assert abs(E.gaussian_skl(ma, va, mb, vb) - ref) <= 1e-3


def test_skl_variances_one_and_four():
    # 0.25 * (1/4 + 4 - 2) = 0.5625
    assert abs(E.gaussian_skl(0, 1, 0, 4) - 0.5625) <= 1e-12


def test_divergence_report_symmetry_and_zero():
    rng = np.random.default_rng(0)
    a = [rng.normal(size=(30, 4)), rng.normal(size=(30, 8))]
    b = [rng.normal(1, 2, size=(40, 4)), rng.normal(size=(40, 8))]
    ab = E.symmetric_feature_divergence(a, b, (0, 1))
    ba = E.symmetric_feature_divergence(b, a, (1, 0))
    assert ab.per_stage == ba.per_stage
    assert all(v >= 0 for v in ab.per_stage)
    assert E.symmetric_feature_divergence(a, a).per_stage == [0.0, 0.0]
    assert len(ab.per_channel[1]) == 8


def test_divergence_of_fitted_gaussians():
    # two point sets whose population moments are exactly N(0,1) and N(1,1)
    a = np.array([[-1.0], [1.0]])
    b = a + 1.0
    rep = E.symmetric_feature_divergence([a], [b], eps=0.0)
    assert abs(rep.per_stage[0] - 0.5) <= 1e-12


def test_divergence_errors():
    with pytest.raises(ValueError):
        E.symmetric_feature_divergence([np.ones((1, 3))], [np.ones((4, 3))])
    with pytest.raises(ValueError):
        E.symmetric_feature_divergence([np.ones((4, 3))], [np.ones((4, 2))])


def test_report_json_and_csv(tmp_path):
    rep = {"mAP": 0.5, "cmc": {"1": 0.4, "5": 0.9}, "divergence_per_stage": [0.1, 0.2], "config_hash": "x"}
    E.write_report(rep, tmp_path / "r.json", tmp_path / "r.csv")
    import json

    assert json.loads((tmp_path / "r.json").read_text()) == rep
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert {"mAP", "cmc.1", "divergence_per_stage.1"} <= set(header)
