import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

os.environ.setdefault("BIADAPT_THREADS", "1")
torch.set_num_threads(int(os.environ["BIADAPT_THREADS"]))


@pytest.fixture
def tiny_backbone():
    from biadapt.nets import BackboneConfig

    return BackboneConfig(visual_layers=1, freq_layers=1, embed_dim=16, freq_channels=8, freq_depth=1, heads=2,
                          disc_hidden=8)


@pytest.fixture(scope="session")
def small_scenario():
    from biadapt.synthdata import build_domain, make_scenario

    src = build_domain("patch_swap", 1, 24, 32, 0.75)
    tgt = build_domain("local_warp", 2, 24, 32, 0.75)
    return make_scenario(src, [tgt])
