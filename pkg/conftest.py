import os

import pytest

from source.config import load_config
from source.diffusion_backbone import GuidanceConfig, ToyBackbone
from source.prompt_engine import parse_triplet, render_prompts


@pytest.fixture
def toy():
    return ToyBackbone()


@pytest.fixture
def kick_pair(toy):
    return render_prompts(parse_triplet("a man is kicking a ball"), toy.tokenize)


@pytest.fixture
def small_guidance():
    """Short schedules so loops over seeds stay fast."""
    return GuidanceConfig(T1=4, T2=12, k=3, gamma=2)


@pytest.fixture
def run_config(tmp_path):
    """Defaults with every output under tmp_path."""
    def make(**flags):
        values = {"out": os.path.join(str(tmp_path), "runs"), "vlm_cache": os.path.join(str(tmp_path), "cache")}
        values.update(flags)
        return load_config(flags=values)
    return make
