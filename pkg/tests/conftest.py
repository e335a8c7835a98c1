import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cwm.agent_model import ModelConfig  # noqa: E402
from cwm.environment import EnvConfig, generate_dataset  # noqa: E402

# tiny networks for gradient and oracle checks
TINY = ModelConfig(gru_dim=3, latent_dims=2, latent_classes=2, message_dim=2, hidden_width=5, embed_dim=3)
# 8-step episodes need a looser action limit to trace the full curve
MICRO_ENV = EnvConfig(bins_per_agent=2, episode_length=8, action_limit=2.0, seed=3)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def micro_data():
    return generate_dataset(MICRO_ENV, 4)


@pytest.fixture
def tiny_cfg():
    return TINY


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
