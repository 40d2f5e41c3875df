"""Shared fixtures"""
import pytest
import torch

from layered_vocab import desk_layout, make_layout
from omni_model import ModelConfig, OmniTransformer


@pytest.fixture
def tiny_layout():
    # 3 rows, 15 text content ids, 4 codes + 4 control slots per audio layer
    return make_layout(text_region_size=32, audio_layer_count=2, audio_layer_size=8, audio_code_count=4)


@pytest.fixture
def layout():
    return desk_layout()


def build_model(layout, seed: int = 0, **overrides) -> OmniTransformer:
    torch.manual_seed(seed)
    settings = dict(layout=layout, d_model=16, n_trunk_layers=1, n_attn_heads=2,
                    context_length=128, encoder_width=8)
    settings.update(overrides)
    return OmniTransformer(ModelConfig(**settings))


@pytest.fixture
def tiny_model(tiny_layout):
    return build_model(tiny_layout)


@pytest.fixture
def desk_model(layout):
    return build_model(layout)
