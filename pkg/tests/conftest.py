import numpy as np
import pytest

from transstam.model import AssociationInput, ModelConfig, init_params


def random_batch(rng, n=3, m=3, k=4, adim=4, frame=None, ragged=True):
    """Random padded tracklets (oldest first) and detections in normalized units."""
    frames = np.tile(np.arange(1, k + 1, dtype=float), (n, 1))
    valid = np.ones((n, k), dtype=bool)
    if ragged and n > 1:
        valid[1, k - 1:] = False
    if ragged and n > 2 and k > 2:
        valid[2, k - 2:] = False
    geom = rng.uniform(0.2, 0.8, (n, k, 4))
    geom[..., 2:] *= 0.2
    det_geom = rng.uniform(0.2, 0.8, (m, 4))
    det_geom[:, 2:] *= 0.2
    return AssociationInput(
        rng.standard_normal((n, k, adim)), geom, frames, valid,
        rng.standard_normal((m, adim)), det_geom, frame if frame is not None else k + 1,
    )


def random_params(cfg, seed=0, dtype=np.float64):
    """Initialized parameters with non-zero relative bias weights and biases."""
    rng = np.random.default_rng(seed + 1000)
    params = init_params(cfg, seed, dtype=dtype)
    for name, value in params.items():
        if value.ndim == 1 or name == "rstpe.w":
            params[name] = (value + rng.normal(0, 0.3, value.shape)).astype(dtype)
    return params


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=8, heads=2, layers=1, ffn_dim=8, appearance_dim=4, window_T=4)


# (criterion number, title, passed, detail) rows filled in by test_acceptance
ACCEPTANCE = []


def record(number, title, passed, detail):
    ACCEPTANCE.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
