import itertools
import math

import numpy as np
import pytest

from histnav.rng import Rng
from histnav import world as W
from histnav.world import (
    AgentState,
    InvalidActionError,
    expert_action,
    expert_trajectory,
    generate_instruction,
    generate_world,
    load_dataset,
    make_dataset,
    render_panorama,
    save_dataset,
    step,
    wrap_angle,
)


def test_same_seed_identical_graph():
    a = generate_world(12, 15, 3, "seen")
    b = generate_world(12, 15, 3, "seen")
    assert np.array_equal(a.positions, b.positions)
    assert a.attrs == b.attrs
    assert all(a.adj[u] == b.adj[u] for u in range(15))


def test_worlds_connected_over_many_seeds():
    for seed in range(100):
        w = generate_world(seed, 12, 2, "seen")
        dist = w.distances_from(0)
        assert np.isfinite(dist).all()


def test_seed_ranges_disjoint():
    seen = set(W.seen_world_seeds(50))
    unseen = set(W.unseen_world_seeds(50))
    assert not (seen & unseen)


def test_edge_weights_positive_symmetric():
    w = generate_world(3, 20, 3, "seen")
    for u in range(20):
        for v, wt in w.adj[u].items():
            assert wt > 0
            assert w.adj[v][u] == wt


def test_degree_cap():
    for seed in range(30):
        w = generate_world(seed, 25, 4, "seen")
        assert max(w.degree(u) for u in range(25)) <= W.MAX_DEGREE


def test_unique_attributes_when_possible():
    w = generate_world(8, 20, 3, "seen")
    assert len(set(w.attrs)) == 20


# ---------------------------------------------------------------------------
# shortest paths


def test_shortest_path_trivial():
    w = generate_world(4, 10, 2, "seen")
    assert w.shortest_path(3, 3) == [3]
    assert w.geodesic(3, 3) == 0.0


def test_triangle_path_through_middle():
    positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    edges = {(0, 1): 1.0, (1, 2): 1.0, (0, 2): 3.0}
    g = W.WorldGraph(positions, edges, [(0, 0)] * 3, 0, "seen")
    assert g.shortest_path(0, 2) == [0, 1, 2]
    assert g.geodesic(0, 2) == 2.0


def test_shortest_path_matches_exhaustive_enumeration():
    w = generate_world(17, 8, 2, "seen")

    def brute(u, v):
        best = math.inf
        for k in range(1, 8):
            for mid in itertools.permutations([n for n in range(8) if n not in (u, v)], k - 1):
                path = [u, *mid, v]
                cost = 0.0
                ok = True
                for a, b in zip(path, path[1:]):
                    if b not in w.adj[a]:
                        ok = False
                        break
                    cost += w.adj[a][b]
                if ok:
                    best = min(best, cost)
        return best

    for u, v in [(0, 7), (1, 5), (2, 6)]:
        assert abs(w.geodesic(u, v) - brute(u, v)) < 1e-12


def test_geodesic_symmetric_and_triangle():
    w = generate_world(19, 12, 3, "seen")
    rng = Rng(2)
    for _ in range(50):
        u, v, k = rng.integers(0, 12, 3).tolist()
        assert abs(w.geodesic(u, v) - w.geodesic(v, u)) < 1e-12
        assert w.geodesic(u, v) <= w.geodesic(u, k) + w.geodesic(k, v) + 1e-12


# ---------------------------------------------------------------------------
# rendering


def test_render_deterministic():
    w = generate_world(21, 10, 3, "seen")
    s = AgentState(4, 1.2345)
    a = render_panorama(w, s, 8, 16)
    b = render_panorama(w, s, 8, 16)
    assert a is b
    w2 = generate_world(21, 10, 3, "seen")
    c = render_panorama(w2, AgentState(4, 1.2345), 8, 16)
    assert np.array_equal(a.raw_stack(), c.raw_stack())


def test_render_rotation_equivariance():
    w = generate_world(23, 12, 3, "seen")
    k = 8
    binw = 2 * math.pi / k
    base = render_panorama(w, AgentState(5, 0.7), k, 16)
    rot = render_panorama(w, AgentState(5, 0.7 + binw), k, 16)
    for i in range(k):
        assert np.allclose(rot.views[i].raw, base.views[(i + 1) % k].raw)
        assert rot.views[i].nav_type == base.views[(i + 1) % k].nav_type
        assert rot.views[i].neighbor == base.views[(i + 1) % k].neighbor
    assert np.allclose(rot.class_targets, np.roll(base.class_targets, -1, axis=0))


def test_render_candidate_edge_bijection():
    for seed in range(25):
        w = generate_world(seed, 15, 3, "seen")
        rng = Rng(seed)
        node = rng.integers(0, 15)
        pano = render_panorama(w, AgentState(node, rng.uniform() * 6.28), 8, 16)
        neighbors = {pano.views[i].neighbor for i in pano.candidate_indices}
        assert neighbors == set(w.neighbors(node))
        assert len(pano.candidate_indices) == w.degree(node)


def test_render_non_navigable_empty_bins():
    w = generate_world(27, 10, 2, "seen")
    pano = render_panorama(w, AgentState(0, 0.0), 8, 16)
    for i, v in enumerate(pano.views[:-1]):
        if v.nav_type == W.NAV_NON_NAVIGABLE:
            assert v.neighbor is None


def test_render_single_stop_view():
    w = generate_world(29, 10, 2, "seen")
    pano = render_panorama(w, AgentState(0, 0.0), 8, 16)
    stops = [v for v in pano.views if v.nav_type == W.NAV_STOP]
    assert len(stops) == 1
    assert pano.views[-1].nav_type == W.NAV_STOP


def test_class_targets_are_distributions():
    w = generate_world(31, 14, 3, "seen")
    pano = render_panorama(w, AgentState(2, 0.4), 8, 16)
    assert np.abs(pano.class_targets.sum(axis=1) - 1.0).max() < 1e-12


def test_angle_features_unit_norm():
    w = generate_world(33, 10, 3, "seen")
    pano = render_panorama(w, AgentState(1, 2.0), 8, 16)
    for v in pano.views:
        a = v.angle
        assert abs(a[0] ** 2 + a[1] ** 2 - 1) < 1e-12
        assert abs(a[2] ** 2 + a[3] ** 2 - 1) < 1e-12


# ---------------------------------------------------------------------------
# stepping and experts


def test_step_stop_keeps_state():
    w = generate_world(35, 10, 2, "seen")
    s = AgentState(3, 0.5)
    pano = render_panorama(w, s, 8, 16)
    assert step(w, s, pano.stop_index, pano) is s


def test_step_moves_to_adjacent_and_turns():
    w = generate_world(37, 10, 2, "seen")
    s = AgentState(3, 0.5)
    pano = render_panorama(w, s, 8, 16)
    a = pano.candidate_indices[0]
    s2 = step(w, s, a, pano)
    assert s2.node in w.neighbors(3)
    assert 0 <= s2.heading < 2 * math.pi


def test_step_reverse_returns():
    w = generate_world(39, 10, 2, "seen")
    s = AgentState(3, 0.5)
    pano = render_panorama(w, s, 8, 16)
    s2 = step(w, s, pano.candidate_indices[0], pano)
    pano2 = render_panorama(w, s2, 8, 16)
    back = pano2.view_for_neighbor(3)
    s3 = step(w, s2, back, pano2)
    assert s3.node == 3


def test_step_rejects_non_candidate():
    w = generate_world(41, 10, 2, "seen")
    s = AgentState(3, 0.5)
    pano = render_panorama(w, s, 8, 16)
    bad = [i for i in range(8) if i not in pano.candidate_indices][0]
    with pytest.raises(InvalidActionError):
        step(w, s, bad, pano)


def test_expert_stops_at_goal():
    w = generate_world(43, 10, 2, "seen")
    s = AgentState(5, 0.1)
    pano = render_panorama(w, s, 8, 16)
    assert expert_action(w, s, 5, pano) == pano.stop_index


def test_expert_reaches_goal_within_node_budget():
    for seed in range(10):
        w = generate_world(seed + 50, 12, 2, "seen")
        rng = Rng(seed)
        start, goal = rng.integers(0, 12, 2).tolist()
        s = AgentState(start, rng.uniform() * 6.28)
        for _ in range(12):
            pano = render_panorama(w, s, 8, 16)
            a = expert_action(w, s, goal, pano)
            if a == pano.stop_index:
                break
            s = step(w, s, a, pano)
        assert s.node == goal


def test_expert_follows_shortest_path():
    for seed in range(10):
        w = generate_world(seed + 70, 14, 3, "seen")
        rng = Rng(seed)
        start, goal = rng.integers(0, 14, 2).tolist()
        if start == goal:
            continue
        want = w.shortest_path(start, goal)
        s = AgentState(start, rng.uniform() * 6.28)
        path = [s.node]
        for _ in range(20):
            pano = render_panorama(w, s, 8, 16)
            a = expert_action(w, s, goal, pano)
            if a == pano.stop_index:
                break
            s = step(w, s, a, pano)
            path.append(s.node)
        assert path == want


# ---------------------------------------------------------------------------
# instructions


def test_single_hop_instruction_shape():
    w = generate_world(45, 10, 2, "seen")
    path = w.shortest_path(0, w.neighbors(0)[0])
    toks = generate_instruction(w, path, "fine_grained", Rng(0), start_heading=0.0)
    words = W.tokens_to_text(toks).split()
    assert words[0] == "[cls]"
    assert words.count("then") == 1
    assert "stop" in words


def test_back_instruction_ends_with_return_command():
    w = generate_world(47, 12, 3, "seen")
    path = w.shortest_path(0, 5) + w.shortest_path(0, 5)[:-1][::-1]
    toks = generate_instruction(w, path, "back", Rng(4), start_heading=1.0)
    text = W.tokens_to_text(toks)
    assert any(text.endswith(cmd) for cmd in W.RETURN_COMMANDS)


def test_instruction_deterministic():
    w = generate_world(49, 12, 3, "seen")
    path = w.shortest_path(1, 6)
    a = generate_instruction(w, path, "back", Rng(9), start_heading=0.3)
    b = generate_instruction(w, path, "back", Rng(9), start_heading=0.3)
    assert a == b


def test_last_only_is_stop_clause():
    w = generate_world(51, 12, 3, "seen")
    path = w.shortest_path(0, 4)
    toks = generate_instruction(w, path, "last_only", Rng(1), start_heading=0.0)
    words = W.tokens_to_text(toks).split()
    assert words[:2] == ["[cls]", "stop"]
    assert len(words) == 6


def test_vocab_is_small_and_instruction_ids_valid():
    assert W.vocab_size() <= 64
    w = generate_world(53, 12, 3, "seen")
    path = w.shortest_path(0, 7)
    toks = generate_instruction(w, path, "fine_grained", Rng(2), start_heading=0.5)
    assert all(0 <= t < W.vocab_size() for t in toks)


# ---------------------------------------------------------------------------
# datasets


def worlds_for_test(n=3):
    return [generate_world(s, 12, 3, "seen") for s in W.seen_world_seeds(n)]


def test_dataset_hop_range_respected():
    eps = make_dataset(worlds_for_test(), 5, "fine_grained", Rng(11), hop_min=2, hop_max=4)
    cache = {w.seed: w for w in worlds_for_test()}
    for ep in eps:
        assert len(ep.expert_path) - 1 in (2, 3, 4)
        w = cache[ep.world_seed]
        assert ep.expert_path == w.shortest_path(ep.start.node, ep.goal_node)


def test_dataset_regeneration_identical():
    a = make_dataset(worlds_for_test(), 4, "fine_grained", Rng(13))
    b = make_dataset(worlds_for_test(), 4, "fine_grained", Rng(13))
    assert [e.to_json_obj() for e in a] == [e.to_json_obj() for e in b]


def test_back_dataset_palindromic():
    eps = make_dataset(worlds_for_test(), 4, "back", Rng(15))
    for ep in eps:
        path = ep.expert_path
        assert path == path[::-1]
        assert ep.goal_node == ep.start.node
        assert path[len(path) // 2] == ep.midpoint


def test_long_horizon_dataset_concatenates():
    eps = make_dataset(worlds_for_test(), 4, "long_horizon", Rng(17), hop_min=2, hop_max=3)
    for ep in eps:
        assert ep.junction is not None
        assert 2 <= ep.junction <= 3
        assert len(ep.expert_path) - 1 >= 4


def test_dataset_roundtrip_file(tmp_path):
    eps = make_dataset(worlds_for_test(), 3, "fine_grained", Rng(19))
    path = tmp_path / "ds.jsonl"
    save_dataset(path, eps)
    save_dataset(tmp_path / "ds2.jsonl", eps)
    assert path.read_bytes() == (tmp_path / "ds2.jsonl").read_bytes()
    loaded = load_dataset(path, 12, 3)
    assert len(loaded) == len(eps)
    for (ep, w), orig in zip(loaded, eps):
        assert ep.to_json_obj() == orig.to_json_obj()
        assert w.seed == ep.world_seed


# ---------------------------------------------------------------------------
# expert trajectories


def test_expert_trajectory_fine_grained():
    w = worlds_for_test(1)[0]
    eps = make_dataset([w], 3, "fine_grained", Rng(21))
    for ep in eps:
        steps = expert_trajectory(w, ep, 8, 16)
        assert len(steps) == len(ep.expert_path)
        assert steps[-1].action == steps[-1].panorama.stop_index
        visited = [steps[0].state.node]
        for st in steps[:-1]:
            assert st.action != st.panorama.stop_index
            visited.append(st.panorama.views[st.action].neighbor)
        assert visited == ep.expert_path


def test_expert_trajectory_back_double_stop():
    w = worlds_for_test(1)[0]
    eps = make_dataset([w], 3, "back", Rng(23))
    for ep in eps:
        steps = expert_trajectory(w, ep, 8, 16)
        stop_steps = [i for i, st in enumerate(steps) if st.action == st.panorama.stop_index]
        assert len(stop_steps) == 2
        mid_stop = steps[stop_steps[0]]
        assert mid_stop.state.node == ep.midpoint
        assert steps[-1].state.node == ep.start.node


def test_wrap_angle_range():
    for a in np.linspace(-20, 20, 400):
        v = wrap_angle(a)
        assert -math.pi < v <= math.pi
        assert abs(math.sin(v) - math.sin(a)) < 1e-9
        assert abs(math.cos(v) - math.cos(a)) < 1e-9
