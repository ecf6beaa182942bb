import os

from histnav.figures import (
    save_ablation_figure,
    save_learning_curve_figure,
    save_loss_curves_figure,
    save_metrics_figure,
)
from histnav.metrics import EvaluatedEpisode, aggregate
from histnav.world import generate_world


def test_loss_curves_figure(tmp_path):
    rows = [{"iteration": i, "task": "mlm" if i % 2 else "sap",
             "loss": 2.0 / (1 + i), "stage": 1 if i < 50 else 2} for i in range(100)]
    path = tmp_path / "loss.png"
    save_loss_curves_figure(rows, path)
    assert path.stat().st_size > 0


def test_learning_curve_figure(tmp_path):
    rows = [{"iteration": 100 * i, "split": s, "SR": 0.1 * i, "SPL": 0.08 * i,
             "mean_reward": 0.0, "actor_loss": 0.0, "critic_loss": 0.0, "il_loss": 0.0}
            for i in range(5) for s in ("val_seen", "val_unseen")]
    path = tmp_path / "curve.png"
    save_learning_curve_figure(rows, path)
    assert path.stat().st_size > 0


def test_metrics_figure(tmp_path):
    world = generate_world(3, 10, 2, "seen")
    ref = world.shortest_path(0, 5)
    rep = aggregate([EvaluatedEpisode(ref, ref, world, 1.0)])
    path = tmp_path / "metrics.png"
    save_metrics_figure({"val_seen": rep, "val_unseen": rep}, path)
    assert path.stat().st_size > 0


def test_ablation_figure(tmp_path):
    rows = [{"variant": v, "objective": "il+rl", "seed": s, "SR": 0.5, "SPL": 0.4}
            for v in ("hierarchical", "recurrent") for s in (0, 1)]
    path = tmp_path / "ablate.png"
    save_ablation_figure(rows, path)
    assert path.stat().st_size > 0
