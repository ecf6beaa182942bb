import itertools
import math

import numpy as np
import pytest

from histnav import metrics as M
from histnav.metrics import EvaluatedEpisode, aggregate, dtw_cost, ndtw
from histnav.rng import Rng
from histnav.world import WorldGraph, generate_world


def fixed_world(n=10, seed=101):
    return generate_world(seed, n, 3, "seen")


def episode(world, pred, ref, task="fine_grained", radius=1.0):
    return EvaluatedEpisode(pred, ref, world, radius, task)


def random_walk(world, rng, length):
    node = rng.integers(0, world.n_nodes)
    path = [node]
    for _ in range(length - 1):
        nbs = world.neighbors(path[-1])
        path.append(nbs[rng.integers(0, len(nbs))])
    return path


def brute_force_dtw(world, pred, ref):
    """Exhaustive enumeration of all monotone alignments."""
    n, m = len(pred), len(ref)
    best = math.inf

    def recurse(i, j, acc):
        nonlocal best
        acc = acc + world.geodesic(pred[i], ref[j])
        if acc >= best:
            return
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n and j + 1 < m:
            recurse(i + 1, j + 1, acc)
        if i + 1 < n:
            recurse(i + 1, j, acc)
        if j + 1 < m:
            recurse(i, j + 1, acc)

    recurse(0, 0, 0.0)
    return best


# ---------------------------------------------------------------------------
# TL / NE


def test_single_node_path_zero_length():
    w = fixed_world()
    ep = episode(w, [3], [3, 4])
    assert M.traj_length(ep) == 0.0


def test_nav_error_zero_at_goal():
    w = fixed_world()
    ref = w.shortest_path(0, 5)
    ep = episode(w, ref, ref)
    assert M.nav_error(ep) == 0.0


def test_traj_length_hand_sum():
    positions = np.array([[0.0, 0, 0], [1.5, 0, 0], [3.5, 0, 0]])
    edges = {(0, 1): 1.5, (1, 2): 2.0}
    g = WorldGraph(positions, edges, [(0, 0)] * 3, 0, "seen")
    ep = episode(g, [0, 1, 2], [0, 1, 2])
    assert abs(M.traj_length(ep) - 3.5) < 1e-12


# ---------------------------------------------------------------------------
# success and SPL


def test_success_boundary_strict():
    positions = np.array([[0.0, 0, 0], [1.0001, 0, 0], [0.9999, 0.0, 0]])
    edges = {(0, 1): 1.0001, (0, 2): 0.9999, (1, 2): 0.1}
    g = WorldGraph(positions, edges, [(0, 0)] * 3, 0, "seen")
    assert M.success(episode(g, [1], [0], radius=1.0)) == 0.0
    assert M.success(episode(g, [2], [0], radius=1.0)) == 1.0


def test_success_back_requires_midpoint_first():
    w = fixed_world()
    fwd = w.shortest_path(0, 6)
    if len(fwd) < 3:
        fwd = w.shortest_path(0, 9)
    ref = fwd + fwd[:-1][::-1]
    motionless = episode(w, [0], ref, task="back")
    assert M.success_back(motionless) == 0.0
    full = episode(w, ref, ref, task="back")
    assert M.success_back(full) == 1.0


def test_spl_perfect_and_detour():
    w = fixed_world()
    ref = w.shortest_path(0, 7)
    assert M.spl(episode(w, ref, ref)) == 1.0
    far = [n for n in range(w.n_nodes) if w.geodesic(n, 7) > 1.0][0]
    assert M.spl(episode(w, [far], ref)) == 0.0


def test_spl_half_on_double_length():
    positions = np.array([[0.0, 0, 0], [2.0, 0, 0], [1.0, 1.0, 0]])
    edges = {(0, 1): 2.0, (0, 2): 1.5, (1, 2): 1.5}
    g = WorldGraph(positions, edges, [(0, 0)] * 3, 0, "seen")
    ep = episode(g, [0, 2, 1], [0, 1], radius=0.5)
    want = 2.0 / 3.0
    assert abs(M.spl(ep) - want) < 1e-12


# ---------------------------------------------------------------------------
# nDTW and oracles


def test_ndtw_identical_paths():
    w = fixed_world()
    ref = w.shortest_path(1, 8)
    assert M.ndtw(w, ref, ref, 1.0) == 1.0


def test_dtw_duplicate_ref_node_free():
    w = fixed_world()
    ref = w.shortest_path(0, 6)
    stretched = ref[:1] + ref
    assert abs(dtw_cost(w, ref, ref) - dtw_cost(w, ref, stretched)) < 1e-12


def test_ndtw_matches_brute_force_all_length_combos():
    w = fixed_world()
    rng = Rng(7)
    for lp in range(1, 7):
        for lr in range(1, 7):
            for _ in range(4):
                pred = random_walk(w, rng, lp)
                ref = random_walk(w, rng, lr)
                assert dtw_cost(w, pred, ref) == pytest.approx(
                    brute_force_dtw(w, pred, ref), abs=0.0), (pred, ref)


def test_ndtw_reversal_symmetry():
    w = fixed_world()
    rng = Rng(9)
    for _ in range(30):
        pred = random_walk(w, rng, 4)
        ref = random_walk(w, rng, 5)
        a = dtw_cost(w, pred, ref)
        b = dtw_cost(w, pred[::-1], ref[::-1])
        assert abs(a - b) < 1e-9


# ---------------------------------------------------------------------------
# SDTW and CLS


def test_sdtw_zero_on_failure():
    w = fixed_world()
    ref = w.shortest_path(0, 8)
    far = [n for n in range(w.n_nodes) if w.geodesic(n, 8) > 1.0][0]
    ep = episode(w, [far], ref)
    assert M.sdtw(ep) == 0.0


def test_cls_identical_paths_is_one():
    w = fixed_world()
    ref = w.shortest_path(2, 9)
    ep = episode(w, ref, ref)
    assert M.cls_score(ep) == 1.0
    assert M.sdtw(ep) == M.episode_success(ep)


def test_cls_padded_path_below_one():
    w = fixed_world()
    ref = w.shortest_path(2, 9)
    padded = ref + ref[:-1][::-1] + ref[1:]
    ep = episode(w, padded, ref)
    assert M.cls_score(ep) < 1.0


# ---------------------------------------------------------------------------
# goal progress


def test_goal_progress_full_and_none():
    w = fixed_world()
    ref = w.shortest_path(0, 9)
    full = episode(w, ref, ref)
    assert abs(M.goal_progress(full) - w.geodesic(0, 9)) < 1e-12
    motionless = episode(w, [0], ref)
    assert M.goal_progress(motionless) == 0.0


def test_goal_progress_negative_when_retreating():
    w = fixed_world()
    goal = 9
    dists = [(w.geodesic(n, goal), n) for n in range(w.n_nodes)]
    start = min(d for d in dists if d[0] > 0)[1]
    worst = max(dists)[1]
    ep = episode(w, [start, worst], w.shortest_path(start, goal))
    assert M.goal_progress(ep) < 0.0


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_episode():
    w = fixed_world()
    ref = w.shortest_path(0, 5)
    rep = aggregate([episode(w, ref, ref)])
    assert rep.means["SR"] == rep.per_episode[0]["SR"]


def test_aggregate_empty_errors():
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_order_invariant_and_spl_bounded():
    w = fixed_world()
    rng = Rng(11)
    eps = []
    for _ in range(20):
        pred = random_walk(w, rng, rng.integers(1, 6))
        ref = random_walk(w, rng, rng.integers(2, 6))
        eps.append(episode(w, pred, ref))
    a = aggregate(eps)
    b = aggregate(eps[::-1])
    assert a.means == b.means
    assert a.means["SPL"] <= a.means["SR"] + 1e-12


def test_bounded_metrics_on_random_pairs():
    w = fixed_world()
    rng = Rng(13)
    for _ in range(400):
        pred = random_walk(w, rng, rng.integers(1, 7))
        ref = random_walk(w, rng, rng.integers(1, 7))
        rec = M.evaluate_episode(episode(w, pred, ref))
        for key in ("SR", "SPL", "CLS", "nDTW", "SDTW"):
            assert 0.0 <= rec[key] <= 1.0, key
        assert rec["SPL"] <= rec["SR"]


def test_report_files(tmp_path):
    w = fixed_world()
    ref = w.shortest_path(0, 5)
    rep = aggregate([episode(w, ref, ref)])
    M.write_report_json(tmp_path / "r.json", {"val_seen": rep})
    M.write_report_csv(tmp_path / "r.csv", {"val_seen": rep})
    import json

    obj = json.loads((tmp_path / "r.json").read_text())
    assert obj["val_seen"]["aggregate"]["SR"] == 1.0
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert lines[0].startswith("split,TL,NE,SR")
    assert lines[1].startswith("val_seen,")
