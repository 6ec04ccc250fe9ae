import pytest
import torch

from vltune.config import AdapterConfig, ModelConfig
from vltune.data import make_shapes_dataset
from vltune.model import PromptedDualEncoder


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        num_layers=2,
        patch_size=8,
        image_size=16,
        embed_dim_image=16,
        embed_dim_text=16,
        shared_dim=16,
        num_heads=2,
        mlp_ratio=2,
        vocab_size=256,
        max_text_len=16,
        adapter=AdapterConfig(depth=1, num_heads=2),
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return PromptedDualEncoder.build(tiny_config(), seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def shapes4(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes4")
    return make_shapes_dataset(root, train_per_class=20, test_per_class=6, image_size=16, seed=0)


@pytest.fixture
def images():
    return torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
