"""Trajectory evaluation: length, error, success (plain and return-trip),
efficiency-weighted success, and the path-fidelity scores computed by dynamic
programming over graph geodesics, plus per-episode/aggregate reporting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .world import WorldGraph

METRIC_NAMES = ("TL", "NE", "SR", "SPL", "CLS", "nDTW", "SDTW", "GP")


@dataclass
class EvaluatedEpisode:
    predicted_path: list[int]
    reference_path: list[int]
    world: WorldGraph
    success_radius: float
    task_kind: str = "fine_grained"
    episode_id: str = ""

    def __post_init__(self):
        if not self.predicted_path or not self.reference_path:
            raise ValueError("paths must be nonempty")

    @property
    def goal(self) -> int:
        return self.reference_path[-1]

    @property
    def midpoint(self) -> int:
        return self.reference_path[len(self.reference_path) // 2]


@dataclass
class MetricsReport:
    per_episode: list[dict]
    means: dict[str, float]

    def to_json_obj(self) -> dict:
        return {"aggregate": self.means, "episodes": self.per_episode}


def path_length(world: WorldGraph, path: list[int]) -> float:
    return float(sum(world.geodesic(u, v) for u, v in zip(path, path[1:])))


def traj_length(ep: EvaluatedEpisode) -> float:
    """Total meters along the predicted path."""
    return path_length(ep.world, ep.predicted_path)


def nav_error(ep: EvaluatedEpisode) -> float:
    """Geodesic distance from the final position to the goal."""
    return ep.world.geodesic(ep.predicted_path[-1], ep.goal)


def success(ep: EvaluatedEpisode) -> float:
    return 1.0 if nav_error(ep) <= ep.success_radius else 0.0


def success_back(ep: EvaluatedEpisode) -> float:
    """Return-trip success: come within the radius of the midpoint first,
    then finish within the radius of the start; a motionless agent scores 0
    whenever the midpoint is farther out than the radius."""
    mid = ep.midpoint
    reached_mid = None
    for i, node in enumerate(ep.predicted_path):
        if ep.world.geodesic(node, mid) <= ep.success_radius:
            reached_mid = i
            break
    if reached_mid is None:
        return 0.0
    final = ep.predicted_path[-1]
    return 1.0 if ep.world.geodesic(final, ep.goal) <= ep.success_radius else 0.0


def episode_success(ep: EvaluatedEpisode) -> float:
    return success_back(ep) if ep.task_kind == "back" else success(ep)


def spl(ep: EvaluatedEpisode) -> float:
    """Success weighted by shortest/traversed length. For the return-trip task
    the reference length is the full expert trajectory length, not the
    start-goal geodesic (which is zero)."""
    s = episode_success(ep)
    if s == 0.0:
        return 0.0
    if ep.task_kind == "back":
        ref_len = path_length(ep.world, ep.reference_path)
    else:
        ref_len = ep.world.geodesic(ep.predicted_path[0], ep.goal)
    p = traj_length(ep)
    if max(p, ref_len) == 0.0:
        return s
    return s * ref_len / max(p, ref_len)


def dtw_cost(world: WorldGraph, pred: list[int], ref: list[int]) -> float:
    """Dynamic-time-warping cost over geodesic node distances, with the
    standard advance-either-or-both moves."""
    n, m = len(pred), len(ref)
    cost = np.full((n + 1, m + 1), np.inf)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d = world.geodesic(pred[i - 1], ref[j - 1])
            cost[i, j] = d + min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
    return float(cost[n, m])


def ndtw(world: WorldGraph, pred: list[int], ref: list[int], radius: float) -> float:
    """exp(-DTW / (|ref| * radius)); 1.0 exactly when the paths coincide."""
    if not pred or not ref:
        raise ValueError("paths must be nonempty")
    return float(math.exp(-dtw_cost(world, pred, ref) / (len(ref) * radius)))


def ndtw_episode(ep: EvaluatedEpisode) -> float:
    return ndtw(ep.world, ep.predicted_path, ep.reference_path, ep.success_radius)


def sdtw(ep: EvaluatedEpisode) -> float:
    return episode_success(ep) * ndtw_episode(ep)


def cls_score(ep: EvaluatedEpisode) -> float:
    """Coverage weighted by length score: coverage is the mean over reference
    nodes of exp(-d(node, pred)/radius); the length score compares the
    coverage-scaled reference length with the predicted length."""
    world = ep.world
    pred, ref = ep.predicted_path, ep.reference_path
    cover = float(np.mean([
        math.exp(-min(world.geodesic(r, p) for p in pred) / ep.success_radius) for r in ref
    ]))
    expected = cover * path_length(world, ref)
    pl = path_length(world, pred)
    denom = expected + abs(expected - pl)
    if denom == 0.0:
        return cover
    return cover * expected / denom


def goal_progress(ep: EvaluatedEpisode) -> float:
    """Meters of geodesic progress: start-to-goal minus final-to-goal."""
    start = ep.predicted_path[0]
    final = ep.predicted_path[-1]
    return ep.world.geodesic(start, ep.goal) - ep.world.geodesic(final, ep.goal)


def evaluate_episode(ep: EvaluatedEpisode) -> dict:
    return {
        "episode_id": ep.episode_id,
        "task_kind": ep.task_kind,
        "TL": traj_length(ep),
        "NE": nav_error(ep),
        "SR": episode_success(ep),
        "SPL": spl(ep),
        "CLS": cls_score(ep),
        "nDTW": ndtw_episode(ep),
        "SDTW": sdtw(ep),
        "GP": goal_progress(ep),
    }


def aggregate(episodes: list[EvaluatedEpisode]) -> MetricsReport:
    """Arithmetic means over per-episode records (error on an empty set)."""
    if not episodes:
        raise ValueError("cannot aggregate zero episodes")
    records = [evaluate_episode(ep) for ep in episodes]
    # fsum is exactly rounded, so aggregates are independent of episode order
    means = {name: math.fsum(r[name] for r in records) / len(records) for name in METRIC_NAMES}
    return MetricsReport(per_episode=records, means=means)


def write_report_json(path, reports: dict[str, MetricsReport]) -> None:
    obj = {split: rep.to_json_obj() for split, rep in sorted(reports.items())}
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_report_csv(path, reports: dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split"] + list(METRIC_NAMES))
        for split in sorted(reports):
            rep = reports[split]
            writer.writerow([split] + [f"{rep.means[m]:.6f}" for m in METRIC_NAMES])
