import numpy as np
import pytest

from pointmots import embed_net

Z = 3


def tiny_widths(num_classes=Z):
    return embed_net.default_widths(num_classes, fg_hidden=(8, 8), head_hidden=(4,),
                                    env_hidden=(8, 8), fusion_hidden=(16,))


def perturbed(params, seed=0, scale=0.1):
    """Params with every entry nudged so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    return params.with_arrays([a + rng.normal(scale=scale, size=a.shape) for a in params.arrays()])


def random_inputs(batch, n_fg, n_env, num_classes=Z, seed=0):
    rng = np.random.default_rng(seed)
    fg = rng.normal(size=(batch, n_fg, 5))
    env = rng.normal(size=(batch, n_env, 5 + num_classes))
    cls = rng.integers(0, num_classes, size=(batch, n_env))
    env[..., 5:] = np.eye(num_classes)[cls]
    pos = rng.uniform(-1, 1, size=(batch, 64))
    return fg, env, pos


@pytest.fixture
def tiny_params():
    return perturbed(embed_net.init_params(7, Z, tiny_widths()), seed=1)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
