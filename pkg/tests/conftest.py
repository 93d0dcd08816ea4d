import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bioformer.model import BioformerConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # N=3 tokens, C=8, H=2, P=4
    return BioformerConfig(in_channels=3, window_len=6, filter=2, embed=8, heads=2, depth=1,
                           head_dim=4, ffn_dim=6, num_classes=4)


@pytest.fixture
def tiny_cfg2():
    return BioformerConfig(in_channels=3, window_len=6, filter=2, embed=8, heads=2, depth=2,
                           head_dim=4, ffn_dim=6, num_classes=4)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {name}: {detail}")
