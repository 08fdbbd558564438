import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from osvda import kernels
from osvda.kernels import _numpy_kernels

try:
    from osvda.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def _contrastive_case(seed):
    rng = np.random.default_rng(seed)
    n, m, d = rng.integers(2, 9), rng.integers(2, 9), rng.integers(1, 6)
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((m, d))
    a[0] = 0.0 if seed % 5 == 0 else a[0]
    pos = (rng.random((n, m)) < 0.3).astype(float)
    den = np.maximum(pos, (rng.random((n, m)) < 0.8).astype(float))
    return a, b, pos, den, float(rng.uniform(0.05, 1.0))


@needs_ext
@pytest.mark.parametrize("seed", range(30))
def test_backends_agree(seed):
    a, b, pos, den, tau = _contrastive_case(seed)
    ref = _numpy_kernels.masked_contrastive(a, b, pos, den, tau)
    got = _ckernels.masked_contrastive(a, b, pos, den, tau)
    assert got[3] == ref[3]
    assert got[0] == pytest.approx(ref[0], abs=1e-12)
    assert np.allclose(got[1], ref[1], atol=1e-12, rtol=0)
    assert np.allclose(got[2], ref[2], atol=1e-12, rtol=0)

    rng = np.random.default_rng(seed)
    h, hp, hn = rng.standard_normal((3, 7, 4))
    for x, y in zip(_ckernels.triplet(h, hp, hn, 0.8), _numpy_kernels.triplet(h, hp, hn, 0.8)):
        assert np.allclose(x, y, atol=1e-13, rtol=0)
    logits = rng.standard_normal((6, 5)) * 4
    labels = rng.integers(0, 5, size=6)
    for x, y in zip(_ckernels.softmax_xent(logits, labels), _numpy_kernels.softmax_xent(logits, labels)):
        assert np.allclose(x, y, atol=1e-13, rtol=0)


def test_no_positive_rows_skipped():
    a = np.eye(3)
    pos = np.zeros((3, 3))
    for impl in filter(None, (_numpy_kernels, _ckernels)):
        loss, ga, gb, n = impl.masked_contrastive(a, a, pos, 1 - np.eye(3), 0.1)
        assert (loss, n) == (0.0, 0)
        assert not ga.any() and not gb.any()


def test_get_backend():
    assert kernels.get_backend() in (_numpy_kernels, _ckernels)
    assert kernels.get_backend("numpy") is _numpy_kernels
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_switch():
    code = "import osvda.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, OSVDA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
