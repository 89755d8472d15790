import numpy as np
import pytest

from dachtic.model import EncoderConfig, init_params


def tiny_config(**overrides) -> EncoderConfig:
    """Width 16, a 16x16 input cut into 4x4 = 16 tokens, three classes, two domains."""
    base = dict(patch_t=4, patch_f=4, stride_t=4, stride_f=4, width_d=16, n_heads=2,
                token_blocks=1, semantic_blocks=1, mlp_ratio=2, pool_factor=2,
                n_classes=3, n_domains=2)
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_params(cfg, np.random.default_rng(0))


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance_results():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"acceptance criterion {number}: {'PASS' if passed else 'FAIL'}: {detail}")
