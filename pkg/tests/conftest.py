import numpy as np
import pytest

from tegu.cmtpp import Projector, ProjectorConfig, init_projector
from tegu.model import Backbone, ModelConfig
from tegu.training import TrainingConfig, tokenize, train_backbone, train_projector

TINY = ModelConfig(vocab_size=13, d_model=8, n_layers=2, n_heads=2, max_seq_len=16, seed=3)


def jitter(params: dict, rng, scale=0.3):
    """Push init weights away from the near-linear regime so gradients are non-trivial."""
    for p in params.values():
        p += rng.normal(0.0, scale, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    bb = Backbone.init(TINY)
    jitter(bb.params, np.random.default_rng(7))
    return bb


@pytest.fixture
def tiny_projector():
    pr = init_projector(ProjectorConfig(d_model=TINY.d_model, max_offset=3, seed=5))
    jitter(pr.params, np.random.default_rng(8))
    return pr


PERIOD = "abcdef"


@pytest.fixture(scope="session")
def periodic_models():
    """Backbone + projector trained on ``abcdef`` repeated; both reach near-zero CE."""
    toks = tokenize(PERIOD * 2000)
    mc = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=64, seed=0)
    tc = TrainingConfig(seq_len=32, batch_size=8, total_steps=300, peak_lr=3e-3,
                        weight_decay=0.0, lambda_kd=0.0)
    bb, blog = train_backbone(toks, mc, tc, log_every=0)
    pc = ProjectorConfig(d_model=32, max_offset=3)
    ptc = TrainingConfig(seq_len=32, batch_size=8, total_steps=300, peak_lr=3e-3, offsets=(1, 2))
    pr, plog = train_projector(toks, bb, pc, ptc, log_every=0)
    return dict(tokens=toks, backbone=bb, projector=pr, backbone_log=blog, projector_log=plog)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
