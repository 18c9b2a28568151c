import numpy as np
import pytest

from pagan.nets import build_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_bundle(seed=0, data_shape=(1, 8, 8), latent_dim=3, critic=False, dtype=np.float64, **kw):
    """Smallest networks that still exercise every layer type."""
    kw.setdefault("width", 2)
    kw.setdefault("depth", 2)
    kw.setdefault("hidden", (6,))
    return build_bundle(data_shape, latent_dim, np.random.default_rng(seed), critic=critic,
                        dtype=dtype, **kw)


@pytest.fixture
def bundle64():
    return tiny_bundle()


def converge_spectral(bundle, iters=500):
    """Run power iteration to its fixed point so sigma is stationary in (u, v)."""
    from pagan.nets import spectral_normalize

    for net in bundle._nets():
        for _, layer in net.spectral_layers():
            _, layer.u = spectral_normalize(layer.weight, layer.u, iters)


def layer_attr_of(bundle, param):
    for net in bundle._nets():
        for layer in net.layers:
            for attr, p in getattr(layer, "params", lambda: [])():
                if p is param:
                    return layer, attr
    raise KeyError("parameter not in bundle")


def loss_as_function_of(bundle, param, term, x, seed, game=None, augment_config=None):
    """Scalar function of a stand-in value for ``param``; every call sees the same samples
    and the same spectral state, so it is a pure function for finite differences."""
    from pagan.objectives import pagan_losses

    layer, attr = layer_attr_of(bundle, param)

    def fn(value):
        saved_u = {name: layer_.u.copy() for net in bundle._nets()
                   for name, layer_ in net.spectral_layers()}
        original = getattr(layer, attr)
        setattr(layer, attr, value)
        try:
            losses = pagan_losses(bundle, x, np.random.default_rng(seed), game, augment_config)
            return getattr(losses, term)
        finally:
            setattr(layer, attr, original)
            for net in bundle._nets():
                for name, layer_ in net.spectral_layers():
                    layer_.u = saved_u[name]

    return fn


# --- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
