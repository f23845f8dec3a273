import numpy as np
import pytest
import torch

from vdlf.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small model for fast tests: 16x16 inputs, three stages, 2x2 + 1x1 pooling."""
    cfg = RunConfig()
    cfg.model.widths = (8, 16, 16)
    cfg.model.dim = 16
    cfg.model.latent_dim = 8
    cfg.model.vae_hidden = 16
    cfg.model.gate_hidden = 12
    cfg.data.image_side = 16
    cfg.data.synth_classes = 20
    cfg.data.synth_per_class = 12
    cfg.data.channel_mean = (0.5, 0.5, 0.5)
    cfg.data.channel_std = (0.25, 0.25, 0.25)
    cfg.data.pad = 1
    cfg.data.hflip_prob = 0.0
    cfg.episodic.n_way = 3
    cfg.episodic.k_shot = 2
    cfg.episodic.q_queries = 3
    cfg.episodic.train_episodes = 8
    cfg.episodic.test_episodes = 5
    cfg.model.draws = 3
    cfg.optim.accumulation = 2
    return cfg.validate()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a sub-result for an acceptance criterion: ``criterion(n, ok, detail)``."""
    log = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        log.setdefault(number, []).append((bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 9):
        parts = log.get(number)
        if not parts:
            terminalreporter.write_line(f"criterion {number}: NOT RUN")
            continue
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  " + "; ".join(d for _, d in parts))
