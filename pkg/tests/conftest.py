import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dela.model import ModelConfig, StageConfig  # noqa: E402


def toy_config(task="part_seg", num_classes=9, k=8, chans=(12, 24), **kw):
    stages = [StageConfig(c, 2, k, 8) for c in chans]
    defaults = dict(num_categories=4, head_dim=16, class_embed_dim=8, cls_widths=[32, 32, 16])
    defaults.update(kw)
    return ModelConfig(stages=stages, task=task, num_classes=num_classes, **defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
