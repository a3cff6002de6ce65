import numpy as np
import pytest

from modules.data import SynthSpec, default_target_spec, synth_domain_pair
from modules.experiment import parse_config

TINY_CONFIG = """\
data:
  n_classes: 3
  samples_per_class: 6
  window: 32
  seed: 0
model:
  nodes: 8
run:
  epochs: 2
  batch_size: 8
  learning_rate: 0.01
  distance_repeats: 1
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config_text():
    """Desk-size experiment: 3 classes, 32-point segments, 8-wide ARMA layers."""
    return TINY_CONFIG


@pytest.fixture
def tiny_cfg(tiny_config_text):
    return parse_config(tiny_config_text)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_text):
    path = tmp_path / 'tiny.yaml'
    path.write_text(tiny_config_text)
    return path


@pytest.fixture
def tiny_pair(tiny_cfg):
    return synth_domain_pair(*tiny_cfg.synth_specs())


@pytest.fixture
def small_spec():
    return SynthSpec(n_classes=3, samples_per_class=4, window=64, seed=3)


@pytest.fixture
def small_pair(small_spec):
    return synth_domain_pair(small_spec, default_target_spec(small_spec))
