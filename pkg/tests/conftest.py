import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS


SMALL = """
seed = 3
reference_visual_tokens = 70

[[encoders]]
id = "a"
num_blocks = 6
token_count = 40
dim = 16
seed = 1

[[encoders]]
id = "b"
num_blocks = 6
num_heads = 2
token_count = 30
dim = 8
seed = 2
synthetic_rank = 4

[probe]
batch_size = 3

[stage1]
totals = [60, 40, 30]

[stage2]
k = 20
hidden_dim = 16

[decoder]
num_layers = 6
dim = 32
num_heads = 4
seed = 5
text_tokens = 4

[stage3]
schedule = [1, 3]
fixed_counts = [12, 6]
k_heads = 2
min_keep = 2
targets = [12, 6]

[suite]
image_seeds = [0, 1]
visual_masses = [0.2, 0.8]

[diagnostics]
topk = 8
"""


@pytest.fixture
def small_config_path(tmp_path) -> Path:
    p = tmp_path / "small.toml"
    p.write_text(SMALL, encoding="utf-8")
    return p
