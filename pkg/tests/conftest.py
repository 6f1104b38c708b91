import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dirigent.dataset import SyntheticConfig, generate_synthetic  # noqa: E402

torch.set_num_threads(1)

ONE_LINK = """
name: one_link
joints:
  - name: j0
    axis: [0, 0, 1]
    limits: [-3.141592653589793, 3.141592653589793]
eef: {xyz: [1.0, 0.0, 0.0]}
"""

TWO_LINK = """
name: two_link
joints:
  - name: j0
    axis: [0, 0, 1]
  - name: j1
    axis: [0, 0, 1]
    origin: {xyz: [0.5, 0.0, 0.0]}
eef: {xyz: [0.5, 0.0, 0.0]}
"""

TINY_NET = dict(base_channels=(8, 12, 16), bottleneck_channels=12, timestep_embed_dim=16, attention_heads=2)


@pytest.fixture(scope="session")
def small_dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticConfig(count=120, participants=2, runs=2), root, seed=7)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
