import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from synernet import _kernels_py, kernels

compiled = pytest.importorskip("synernet._kernels")

sims = st.tuples(st.integers(1, 4), st.integers(1, 6)).flatmap(
    lambda gn: arrays(np.float64, (gn[0], gn[1], gn[1]), elements=st.floats(-1, 1))
)


def test_backend_is_selected():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=60, deadline=None)
@given(sims, st.floats(0.5, 2.0))
def test_contrastive_backends_agree(s, kappa):
    a = _kernels_py.contrastive_loss(s, kappa)
    b = compiled.contrastive_loss(s, kappa)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    assert a[2] == pytest.approx(b[2], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 7), st.data())
def test_cross_entropy_backends_agree(n, c, data):
    logits = data.draw(arrays(np.float64, (n, c), elements=st.floats(-30, 30)))
    labels = np.array(data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n)))
    a = _kernels_py.cross_entropy(logits, labels)
    b = compiled.cross_entropy(logits, labels)
    assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_backends_agree(z):
    np.testing.assert_allclose(_kernels_py.softmax_rows(z), compiled.softmax_rows(z), atol=1e-14)


def test_softmax_keeps_shape_for_vectors():
    z = np.array([0.0, 1.0, 2.0])
    assert compiled.softmax_rows(z).shape == (3,)


def test_compiled_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        compiled.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_forced_python_backend(monkeypatch):
    import importlib

    monkeypatch.setenv("SYNERNET_KERNELS", "python")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("SYNERNET_KERNELS")
        importlib.reload(kernels)
