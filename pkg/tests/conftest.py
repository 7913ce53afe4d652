import pytest
import torch

from vidfuse import ModelConfig, SpriteDataset, build_schedule, init_model

HELD_OUT = 0  # dataset clip reserved for round-trip evaluation

ACCEPTANCE_LINES = []


def pytest_configure(config):
    torch.manual_seed(0)
    torch.set_num_threads(1)  # deterministic and faster than oversubscribing small boxes


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_config():
    """Small but structurally complete model for fast pipeline tests."""
    return ModelConfig(
        latent_size=8, base_width=16, heads=2, text_dim=16,
        time_embed_dim=32, norm_groups=4,
    )


@pytest.fixture(scope="session")
def micro_config():
    """Smallest legal model, used for finite-difference gradient checks."""
    return ModelConfig(
        latent_size=4, base_width=8, heads=2, text_dim=8,
        time_embed_dim=16, norm_groups=2,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=11)


@pytest.fixture(scope="session")
def tiny_schedule():
    return build_schedule(T_train=100, T_sample=6)


@pytest.fixture(scope="session")
def sprite_dataset():
    return SpriteDataset(seed=0)


def tiny_latent(frames=3, config=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    size = config.latent_size if config else 8
    channels = config.latent_channels if config else 12
    return torch.randn(frames, channels, size, size, generator=g)
