import numpy as np
import pytest

from flowdistill.models import ModelConfig, VelocityModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(mode="step-token", **kw):
    base = dict(layers=2, width=6, data_dim=2, num_conditions=3, mode=mode,
                tokens_per_step=2, step_counts=(1, 2, 4))
    base.update(kw)
    return ModelConfig(**base)


def randomized(model: VelocityModel, seed: int, std: float = 0.5) -> VelocityModel:
    """Overwrite every parameter (zero-initialised ones included) with noise."""
    r = np.random.default_rng(seed)
    for _, node in model.store:
        node.value = std * r.standard_normal(node.shape)
    return model


class ConstantField:
    """Velocity-model stub returning a fixed vector; records every call."""

    def __init__(self, u, mode="adaln", data_dim=2, num_conditions=4):
        self.u = np.asarray(u, dtype=float)
        self.calls = []
        self.config = ModelConfig(layers=1, width=2, data_dim=data_dim,
                                  num_conditions=num_conditions, mode=mode)

    def __call__(self, x, t, c, n=None):
        from flowdistill import numerics as nx

        self.calls.append((np.asarray(c).copy(), n))
        x = x.value if isinstance(x, nx.Node) else np.asarray(x)
        return nx.constant(np.broadcast_to(self.u, x.shape).copy())


# -- acceptance gate reporting --------------------------------------------------

GATE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    GATE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not GATE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(GATE):
        ok, detail = GATE[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
