"""Synthetic navigable worlds: geometric connectivity graphs with attributed
nodes, deterministic panorama rendering into angular view bins, shortest-path
experts, templated instructions and episode datasets for the four task kinds.

Worlds are pure functions of their seed and are regenerated on demand; dataset
files carry seeds, never serialized graphs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

# world geometry (meters)
BOX_XY = 12.0
ELEVATION_SPAN = 0.6
MAX_DEGREE = 8
# seen / unseen world seeds come from disjoint ranges
SEEN_SEED_BASE = 10_000
UNSEEN_SEED_BASE = 2**31

NAV_NON_NAVIGABLE = 0
NAV_NAVIGABLE = 1
NAV_STOP = 2

OBJECTS = ["chair", "table", "lamp", "door", "window", "plant",
           "shelf", "sofa", "sink", "bed", "desk", "stove"]
COLORS = ["red", "blue", "green", "white", "black", "yellow"]

SPECIALS = ["[pad]", "[cls]", "[sep]", "[mask]"]
WORDS = ["go", "turn", "straight", "left", "right", "to", "the", "then", "stop", "at",
         "walk", "back", "start", "return", "by", "way", "you", "came", "double",
         "where", "backtrack", "starting", "point"]
VOCAB = SPECIALS + WORDS + OBJECTS + COLORS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, CLS, SEP, MASK = (TOKEN_ID[s] for s in SPECIALS)
FIRST_WORD_ID = len(SPECIALS)

RETURN_COMMANDS = [
    "walk back to the start",
    "return by the way you came",
    "double back to where you start",
    "backtrack to the start",
    "back the way you came",
    "return to the starting point",
]

TASK_KINDS = ("fine_grained", "last_only", "back", "long_horizon")


def vocab_size() -> int:
    return len(VOCAB)


def raw_feature_dim() -> int:
    """Width of the renderer's per-view feature: inverse-square-weighted
    object/color histograms of the nodes in the view's bin, the nearest
    bin node's attributes, the attributes of the node the agent stands on
    (visible in every view), a density channel and a mean-elevation channel."""
    return 3 * (len(OBJECTS) + len(COLORS)) + 2


def tokens_to_text(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def embed_angle(theta: float, phi: float) -> np.ndarray:
    """(sin, cos) pairs for a relative heading and elevation, in radians."""
    return np.array([math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)])


class WorldGenError(RuntimeError):
    pass


class InvalidActionError(ValueError):
    """Step was asked to take a non-candidate action."""


@dataclass
class AgentState:
    node: int
    heading: float
    elevation: float = 0.0

    def __post_init__(self):
        self.heading = self.heading % (2.0 * math.pi)


@dataclass
class ViewObservation:
    raw: np.ndarray
    angle: np.ndarray
    nav_type: int
    neighbor: int | None
    rel_heading: float
    rel_elevation: float


@dataclass
class RenderedPanorama:
    """K directional views plus one stop view, with per-view scene-class
    distributions used as masked-observation targets."""

    views: list[ViewObservation]
    oriented_index: int
    class_targets: np.ndarray  # (K, n_classes), rows sum to 1
    node: int
    heading: float

    @property
    def k_views(self) -> int:
        return len(self.views) - 1

    @property
    def stop_index(self) -> int:
        return len(self.views) - 1

    @property
    def candidate_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.views) if v.nav_type == NAV_NAVIGABLE]

    def action_mask(self) -> np.ndarray:
        """Keep-mask over view tokens for action prediction: candidates + stop."""
        return np.array([v.nav_type != NAV_NON_NAVIGABLE for v in self.views])

    def view_for_neighbor(self, node: int) -> int:
        for i, v in enumerate(self.views):
            if v.neighbor == node:
                return i
        raise InvalidActionError(f"node {node} is not reachable from {self.node}")

    def raw_stack(self) -> np.ndarray:
        return np.stack([v.raw for v in self.views])

    def angle_stack(self) -> np.ndarray:
        return np.stack([v.angle for v in self.views])

    def nav_types(self) -> np.ndarray:
        return np.array([v.nav_type for v in self.views], dtype=np.int64)


@dataclass
class HistoryStep:
    """One past panorama plus the angles turned by the action taken there."""

    panorama: RenderedPanorama
    turned_heading: float
    turned_elevation: float

    def action_angle(self) -> np.ndarray:
        return embed_angle(self.turned_heading, self.turned_elevation)


class WorldGraph:
    """Connected undirected geometric graph with attributed nodes."""

    def __init__(self, positions: np.ndarray, edges: dict, attrs: list, seed: int, split: str):
        self.positions = positions
        self.attrs = attrs
        self.seed = seed
        self.split = split
        self.adj: list[dict[int, float]] = [dict() for _ in range(len(positions))]
        for (u, v), w in edges.items():
            self.adj[u][v] = w
            self.adj[v][u] = w
        self._dist_cache: dict[int, np.ndarray] = {}
        self._pano_cache: dict = {}

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def neighbors(self, u: int) -> list[int]:
        return sorted(self.adj[u])

    def edge_weight(self, u: int, v: int) -> float:
        return self.adj[u][v]

    def degree(self, u: int) -> int:
        return len(self.adj[u])

    def _dijkstra(self, source: int) -> np.ndarray:
        import heapq

        dist = np.full(self.n_nodes, np.inf)
        dist[source] = 0.0
        heap = [(0.0, source)]
        done = np.zeros(self.n_nodes, dtype=bool)
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            for v, w in self.adj[u].items():
                nd = d + w
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        return dist

    def distances_from(self, source: int) -> np.ndarray:
        if source not in self._dist_cache:
            self._dist_cache[source] = self._dijkstra(source)
        return self._dist_cache[source]

    def geodesic(self, u: int, v: int) -> float:
        return float(self.distances_from(u)[v])

    def shortest_path(self, u: int, v: int) -> list[int]:
        """Minimal-total-length path; ties broken toward smaller next-node id."""
        dist = self.distances_from(v)
        path = [u]
        cur = u
        while cur != v:
            best = None
            for nb in self.neighbors(cur):
                cand = self.adj[cur][nb] + dist[nb]
                if best is None or cand < best[0] - 1e-12:
                    best = (cand, nb)
            cur = best[1]
            path.append(cur)
        return path

    def hops(self, u: int, v: int) -> int:
        return len(self.shortest_path(u, v)) - 1


def _connected(n: int, edges: set) -> bool:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        parent[find(u)] = find(v)
    return len({find(i) for i in range(n)}) == 1


def generate_world(seed: int, n_nodes: int, k_neighbors: int, split: str,
                   max_degree: int = MAX_DEGREE) -> WorldGraph:
    """k-nearest-neighbor geometric graph, bridged to connectivity, with node
    degrees capped (at most the panorama view-bin count) so every edge can own
    a view bin."""
    if n_nodes < 2 or k_neighbors < 1:
        raise WorldGenError(f"need n_nodes >= 2 and k_neighbors >= 1, got {n_nodes}, {k_neighbors}")
    rng = Rng(seed).substream("worldgen")
    xy = rng.uniform(2 * n_nodes, 0.0, BOX_XY).reshape(n_nodes, 2)
    z = rng.uniform(n_nodes, -ELEVATION_SPAN, ELEVATION_SPAN)
    positions = np.column_stack([xy, z])

    diff = positions[:, None, :] - positions[None, :, :]
    dmat = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(dmat, np.inf)

    edges: set[tuple[int, int]] = set()
    for u in range(n_nodes):
        order = np.argsort(dmat[u], kind="stable")
        for v in order[:k_neighbors]:
            edges.add((min(u, int(v)), max(u, int(v))))

    # bridge components with the globally closest cross pair, repeatedly
    while not _connected(n_nodes, edges):
        parent = list(range(n_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for u, v in edges:
            parent[find(u)] = find(v)
        best = None
        for u in range(n_nodes):
            for v in range(u + 1, n_nodes):
                if find(u) != find(v):
                    key = (dmat[u, v], u, v)
                    if best is None or key < best:
                        best = key
        edges.add((best[1], best[2]))

    # cap degrees: drop the longest removable edge at any over-degree node
    def degrees():
        deg = [0] * n_nodes
        for u, v in edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    deg = degrees()
    for u in range(n_nodes):
        while deg[u] > max_degree:
            incident = sorted([e for e in edges if u in e],
                              key=lambda e: (-dmat[e[0], e[1]], e))
            removed = False
            for e in incident:
                trial = set(edges)
                trial.discard(e)
                if _connected(n_nodes, trial):
                    edges = trial
                    deg = degrees()
                    removed = True
                    break
            if not removed:
                raise WorldGenError(f"cannot reduce degree of node {u} below {max_degree}")

    combos = [(o, c) for o in range(len(OBJECTS)) for c in range(len(COLORS))]
    if n_nodes <= len(combos):
        attrs = rng.shuffled(combos)[:n_nodes]
    else:
        attrs = [(rng.integers(0, len(OBJECTS)), rng.integers(0, len(COLORS)))
                 for _ in range(n_nodes)]

    edge_weights = {(u, v): float(dmat[u, v]) for u, v in edges}
    return WorldGraph(positions, edge_weights, attrs, seed, split)


# ---------------------------------------------------------------------------
# rendering


def _bearing(world: WorldGraph, u: int, v: int) -> tuple[float, float]:
    d = world.positions[v] - world.positions[u]
    heading = math.atan2(d[1], d[0])
    horiz = math.hypot(d[0], d[1])
    elevation = math.atan2(d[2], horiz) if horiz > 0 else 0.0
    return heading, elevation


def render_panorama(world: WorldGraph, state: AgentState, k_views: int,
                    mrm_classes: int) -> RenderedPanorama:
    """Deterministic panorama: K uniform heading bins relative to the agent's
    orientation. Bin features encode attributes of the nodes whose bearing
    falls in the bin, weighted by inverse distance; navigable bins carry the
    exact relative angles of their edge. Every edge owns exactly one bin
    (colliding edges are moved to the nearest free bin).
    """
    cache_key = (state.node, round(state.heading, 12), k_views, mrm_classes)
    cached = world._pano_cache.get(cache_key)
    if cached is not None:
        return cached

    n_obj, n_col = len(OBJECTS), len(COLORS)
    n_attr = n_obj + n_col
    binw = 2.0 * math.pi / k_views
    raw = np.zeros((k_views, raw_feature_dim()))
    weight_sum = np.zeros(k_views)
    nearest = [None] * k_views  # (distance, node) per bin
    class_hist = np.zeros((k_views, mrm_classes))

    pos_u = world.positions[state.node]
    for j in range(world.n_nodes):
        if j == state.node:
            continue
        abs_heading, elev = _bearing(world, state.node, j)
        rel = wrap_angle(abs_heading - state.heading)
        b = int(round(rel / binw)) % k_views
        dist = float(np.linalg.norm(world.positions[j] - pos_u))
        # inverse-square so the nearest node dominates its bin's features
        w = 1.0 / (dist * dist + 0.25)
        obj, col = world.attrs[j]
        raw[b, obj] += w
        raw[b, n_obj + col] += w
        raw[b, 3 * n_attr] += w
        raw[b, 3 * n_attr + 1] += w * math.sin(elev)
        weight_sum[b] += w
        if nearest[b] is None or (dist, j) < nearest[b]:
            nearest[b] = (dist, j)
        class_hist[b, obj % mrm_classes] += w

    self_obj, self_col = world.attrs[state.node]
    for b in range(k_views):
        if weight_sum[b] > 0:
            raw[b, :n_attr] /= weight_sum[b]
            raw[b, 3 * n_attr + 1] /= weight_sum[b]
        if nearest[b] is not None:
            near_obj, near_col = world.attrs[nearest[b][1]]
            raw[b, n_attr + near_obj] = 1.0
            raw[b, n_attr + n_obj + near_col] = 1.0
        # the node the agent stands on is visible in every view
        raw[b, 2 * n_attr + self_obj] = 1.0
        raw[b, 2 * n_attr + n_obj + self_col] = 1.0

    class_targets = np.full((k_views, mrm_classes), 1.0 / mrm_classes)
    nonzero = weight_sum > 0
    class_targets[nonzero] = class_hist[nonzero] / weight_sum[nonzero, None]

    if world.degree(state.node) > k_views:
        raise WorldGenError(
            f"node degree {world.degree(state.node)} exceeds {k_views} view bins")

    # assign each edge a unique bin: preferred bin first, else nearest free
    edge_info = []
    for nb in world.neighbors(state.node):
        abs_heading, elev = _bearing(world, state.node, nb)
        rel = wrap_angle(abs_heading - state.heading)
        pref = int(round(rel / binw)) % k_views
        offset = rel - wrap_angle(pref * binw)
        edge_info.append((pref, wrap_angle(offset), nb, rel, elev))
    edge_info.sort(key=lambda e: (e[0], e[1], e[2]))
    assigned: dict[int, tuple] = {}
    for pref, _off, nb, rel, elev in edge_info:
        b = pref
        if b in assigned:
            for shift in range(1, k_views):
                for cand in ((pref + shift) % k_views, (pref - shift) % k_views):
                    if cand not in assigned:
                        b = cand
                        break
                if b not in assigned:
                    break
        assigned[b] = (nb, rel, elev)

    # a navigable view looks down its edge: its dominant-node channels carry
    # the destination's attributes, whatever else shares the bin
    for b, (nb, _rel, _elev) in assigned.items():
        raw[b, n_attr: 2 * n_attr] = 0.0
        nb_obj, nb_col = world.attrs[nb]
        raw[b, n_attr + nb_obj] = 1.0
        raw[b, n_attr + n_obj + nb_col] = 1.0

    views = []
    for i in range(k_views):
        if i in assigned:
            nb, rel, elev = assigned[i]
            views.append(ViewObservation(raw=raw[i], angle=embed_angle(rel, elev),
                                         nav_type=NAV_NAVIGABLE, neighbor=nb,
                                         rel_heading=rel, rel_elevation=elev))
        else:
            center = wrap_angle(i * binw)
            views.append(ViewObservation(raw=raw[i], angle=embed_angle(center, 0.0),
                                         nav_type=NAV_NON_NAVIGABLE, neighbor=None,
                                         rel_heading=center, rel_elevation=0.0))
    views.append(ViewObservation(raw=np.zeros(raw_feature_dim()), angle=embed_angle(0.0, 0.0),
                                 nav_type=NAV_STOP, neighbor=None,
                                 rel_heading=0.0, rel_elevation=0.0))

    pano = RenderedPanorama(views=views, oriented_index=0, class_targets=class_targets,
                            node=state.node, heading=state.heading)
    world._pano_cache[cache_key] = pano
    return pano


def step(world: WorldGraph, state: AgentState, action: int,
         pano: RenderedPanorama | None = None, k_views: int = 8,
         mrm_classes: int = 16) -> AgentState:
    """Apply a view-indexed action; stop leaves the state unchanged."""
    if pano is None:
        pano = render_panorama(world, state, k_views, mrm_classes)
    if action == pano.stop_index:
        return state
    if action < 0 or action >= len(pano.views) or pano.views[action].nav_type != NAV_NAVIGABLE:
        raise InvalidActionError(f"action {action} is not a candidate at node {state.node}")
    nb = pano.views[action].neighbor
    abs_heading, _ = _bearing(world, state.node, nb)
    return AgentState(node=nb, heading=abs_heading % (2.0 * math.pi), elevation=0.0)


def expert_action(world: WorldGraph, state: AgentState, goal: int,
                  pano: RenderedPanorama) -> int:
    """Stop at the goal, else the candidate on a shortest path to it
    (edge length plus remaining geodesic, ties to the smaller node id)."""
    if state.node == goal:
        return pano.stop_index
    dist = world.distances_from(goal)
    best = None
    for i in pano.candidate_indices:
        nb = pano.views[i].neighbor
        key = (world.edge_weight(state.node, nb) + dist[nb], nb)
        if best is None or key < best[0]:
            best = (key, i)
    return best[1]


# ---------------------------------------------------------------------------
# instructions


def _direction_tokens(rel_heading: float) -> list[str]:
    if rel_heading > math.pi / 8:
        return ["turn", "left"]
    if rel_heading < -math.pi / 8:
        return ["turn", "right"]
    return ["go", "straight"]


def _attr_tokens(world: WorldGraph, node: int) -> list[str]:
    obj, col = world.attrs[node]
    return [COLORS[col], OBJECTS[obj]]


def _leg_clauses(world: WorldGraph, path: list[int], heading: float) -> tuple[list[str], float]:
    words: list[str] = []
    for i in range(len(path) - 1):
        abs_heading, _ = _bearing(world, path[i], path[i + 1])
        rel = wrap_angle(abs_heading - heading)
        if i > 0:
            words.append("then")
        words += _direction_tokens(rel) + ["to", "the"] + _attr_tokens(world, path[i + 1])
        heading = abs_heading % (2.0 * math.pi)
    return words, heading


def _stop_clause(world: WorldGraph, node: int) -> list[str]:
    return ["then", "stop", "at", "the"] + _attr_tokens(world, node)


def generate_instruction(world: WorldGraph, path: list[int], task_kind: str, rng: Rng,
                         start_heading: float = 0.0, junction: int | None = None) -> list[int]:
    """Templated token-id instruction for an expert path.

    fine_grained: one movement clause per hop plus a stop clause.
    last_only:    the stop clause alone.
    back:         fine-grained clauses followed by a sampled return command.
    long_horizon: two full instructions joined at the junction index.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if task_kind == "back":
        mid = len(path) // 2
        forward = path[: mid + 1]
        words, _ = _leg_clauses(world, forward, start_heading)
        words += _stop_clause(world, forward[-1])
        words += ["then"] + rng.choice(RETURN_COMMANDS).split()
    elif task_kind == "long_horizon":
        if junction is None:
            raise ValueError("long_horizon instruction needs the junction index")
        leg1, leg2 = path[: junction + 1], path[junction:]
        words, heading = _leg_clauses(world, leg1, start_heading)
        words += _stop_clause(world, leg1[-1])
        w2, _ = _leg_clauses(world, leg2, heading)
        words += ["then"] + w2 + _stop_clause(world, leg2[-1])
    elif task_kind == "last_only":
        words = _stop_clause(world, path[-1])[1:]  # drop leading "then"
    else:
        words, _ = _leg_clauses(world, path, start_heading)
        words += _stop_clause(world, path[-1])
    return [CLS] + [TOKEN_ID[w] for w in words]


# ---------------------------------------------------------------------------
# episodes and datasets


@dataclass
class EpisodeSpec:
    episode_id: str
    world_seed: int
    split: str
    task_kind: str
    start: AgentState
    goal_node: int
    expert_path: list[int]
    instruction_tokens: list[int]
    junction: int | None = field(default=None)

    @property
    def midpoint(self) -> int:
        """Back task: the original destination at the palindrome center."""
        return self.expert_path[len(self.expert_path) // 2]

    def to_json_obj(self) -> dict:
        obj = {
            "episode_id": self.episode_id,
            "world_seed": self.world_seed,
            "split": self.split,
            "task_kind": self.task_kind,
            "start_node": self.start.node,
            "start_heading": self.start.heading,
            "goal_node": self.goal_node,
            "expert_path": self.expert_path,
            "instruction_tokens": self.instruction_tokens,
        }
        if self.junction is not None:
            obj["junction"] = self.junction
        return obj

    @staticmethod
    def from_json_obj(obj: dict) -> "EpisodeSpec":
        return EpisodeSpec(
            episode_id=obj["episode_id"],
            world_seed=obj["world_seed"],
            split=obj["split"],
            task_kind=obj["task_kind"],
            start=AgentState(obj["start_node"], obj["start_heading"]),
            goal_node=obj["goal_node"],
            expert_path=list(obj["expert_path"]),
            instruction_tokens=list(obj["instruction_tokens"]),
            junction=obj.get("junction"),
        )


def make_dataset(worlds: list[WorldGraph], episodes_per_world: int, task_kind: str,
                 rng: Rng, hop_min: int = 2, hop_max: int = 4,
                 success_radius: float = 1.0, id_prefix: str = "") -> list[EpisodeSpec]:
    """Sample start/goal pairs whose shortest paths have hop_min..hop_max hops
    and whose endpoints are farther apart than the success radius."""
    if not worlds:
        raise ValueError("make_dataset needs at least one world")
    episodes = []
    index = 0
    for e in range(episodes_per_world):
        for world in worlds:
            ep_rng = rng.spawn(index)
            spec = _sample_episode(world, task_kind, ep_rng, hop_min, hop_max,
                                   success_radius, f"{id_prefix}{world.split}-{task_kind}-{index:05d}")
            episodes.append(spec)
            index += 1
    return episodes


def _valid_goals(world: WorldGraph, start: int, hop_min: int, hop_max: int,
                 radius: float) -> list[int]:
    goals = []
    for g in range(world.n_nodes):
        if g == start or world.geodesic(start, g) <= radius:
            continue
        h = world.hops(start, g)
        if hop_min <= h <= hop_max:
            goals.append(g)
    return goals


def _sample_episode(world: WorldGraph, task_kind: str, rng: Rng, hop_min: int,
                    hop_max: int, radius: float, episode_id: str) -> EpisodeSpec:
    for _ in range(200):
        start = rng.integers(0, world.n_nodes)
        heading = rng.uniform() * 2.0 * math.pi
        goals = _valid_goals(world, start, hop_min, hop_max, radius)
        if not goals:
            continue
        goal = goals[rng.integers(0, len(goals))]
        path = world.shortest_path(start, goal)
        junction = None
        if task_kind == "back":
            if world.geodesic(start, goal) <= radius:
                continue
            expert = path + path[:-1][::-1]
            final_goal = start
        elif task_kind == "long_horizon":
            goals2 = [g for g in _valid_goals(world, goal, hop_min, hop_max, radius) if g != start]
            if not goals2:
                continue
            goal2 = goals2[rng.integers(0, len(goals2))]
            leg2 = world.shortest_path(goal, goal2)
            junction = len(path) - 1
            expert = path + leg2[1:]
            final_goal = goal2
        else:
            expert = path
            final_goal = goal
        tokens = generate_instruction(world, expert, task_kind, rng,
                                      start_heading=heading, junction=junction)
        return EpisodeSpec(
            episode_id=episode_id,
            world_seed=world.seed,
            split=world.split,
            task_kind=task_kind,
            start=AgentState(start, heading),
            goal_node=final_goal,
            expert_path=expert,
            instruction_tokens=tokens,
            junction=junction,
        )
    raise WorldGenError(f"could not sample an episode in world {world.seed}")


def save_dataset(path, episodes: list[EpisodeSpec]) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_json_obj(), sort_keys=True) + "\n")


def load_dataset(path, n_nodes: int, k_neighbors: int, max_degree: int = MAX_DEGREE,
                 world_cache: dict | None = None) -> list[tuple[EpisodeSpec, WorldGraph]]:
    """Read a JSONL dataset, regenerating each world from its seed."""
    cache = {} if world_cache is None else world_cache
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            ep = EpisodeSpec.from_json_obj(json.loads(line))
            if ep.world_seed not in cache:
                cache[ep.world_seed] = generate_world(ep.world_seed, n_nodes, k_neighbors,
                                                      ep.split, max_degree)
            out.append((ep, cache[ep.world_seed]))
    return out


def seen_world_seeds(count: int) -> list[int]:
    return [SEEN_SEED_BASE + i for i in range(count)]


def unseen_world_seeds(count: int) -> list[int]:
    return [UNSEEN_SEED_BASE + i for i in range(count)]


# ---------------------------------------------------------------------------
# expert trajectories (teacher supervision)


@dataclass
class TrajectoryStep:
    state: AgentState
    panorama: RenderedPanorama
    action: int
    turned_heading: float
    turned_elevation: float


def expert_trajectory(world: WorldGraph, ep: EpisodeSpec, k_views: int,
                      mrm_classes: int) -> list[TrajectoryStep]:
    """Walk the expert path, emitting one step per action including the final
    stop; back-task trajectories stop once at the midpoint and once at the end.
    """
    waypoints = list(ep.expert_path)
    stops = {len(waypoints) - 1}
    if ep.task_kind == "back":
        stops.add(len(waypoints) // 2)
    state = AgentState(ep.start.node, ep.start.heading)
    if waypoints[0] != state.node:
        raise ValueError(f"expert path starts at {waypoints[0]}, episode at {state.node}")
    steps: list[TrajectoryStep] = []
    for i in range(len(waypoints)):
        pano = render_panorama(world, state, k_views, mrm_classes)
        if i in stops:
            steps.append(TrajectoryStep(state, pano, pano.stop_index, 0.0, 0.0))
        if i + 1 < len(waypoints):
            action = pano.view_for_neighbor(waypoints[i + 1])
            view = pano.views[action]
            steps.append(TrajectoryStep(state, pano, action,
                                        view.rel_heading, view.rel_elevation))
            state = step(world, state, action, pano)
    return steps


def history_from_steps(steps: list[TrajectoryStep], upto: int) -> list[HistoryStep]:
    """History available when choosing the action at step index `upto`."""
    return [HistoryStep(s.panorama, s.turned_heading, s.turned_elevation)
            for s in steps[:upto]]
