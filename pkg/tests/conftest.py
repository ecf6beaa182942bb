import numpy as np
import pytest

from histnav.model import ModelConfig, NavModel
from histnav.rng import Rng
from histnav.world import AgentState, HistoryStep, generate_world, render_panorama


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=8, head_count=2, n_language_layers=1, n_panoramic_layers=1,
                n_cross_layers=1, k_views=4, view_feature_dim=6, mrm_class_count=16,
                max_instruction_len=40, max_history_len=12)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_world():
    return generate_world(5, 8, 2, "seen", max_degree=4)


@pytest.fixture
def tiny_model():
    return NavModel(tiny_config(), Rng(100))


def render_at(world, node=0, heading=0.3, k_views=4, mrm_classes=16):
    return render_panorama(world, AgentState(node, heading), k_views, mrm_classes)


def make_history(world, nodes, k_views=4, mrm_classes=16, rng_seed=0):
    rng = Rng(rng_seed)
    steps = []
    for n in nodes:
        pano = render_at(world, n, heading=rng.uniform() * 6.28, k_views=k_views,
                         mrm_classes=mrm_classes)
        steps.append(HistoryStep(pano, rng.uniform(low=-3, high=3), rng.uniform(low=-0.3, high=0.3)))
    return steps
