"""The two kernel backends must agree to float precision on every op."""

import subprocess
import sys

import numpy as np
import pytest

from poserefine.kernels import backend_name, numpy_backend

numba_backend = pytest.importorskip("poserefine.kernels.numba_backend")

from conftest import make_rng


CONV_GRIDS = [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (3, 2)]


@pytest.mark.parametrize("stride,padding", CONV_GRIDS)
@pytest.mark.parametrize("seed", range(3))
def test_conv_kernels_agree(stride, padding, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(3, 11, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    a = numpy_backend.conv2d_forward(x, w, b, stride, padding)
    c = numba_backend.conv2d_forward(x, w, b, stride, padding)
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-12)
    g = rng.normal(size=a.shape)
    np.testing.assert_allclose(
        numpy_backend.conv2d_input_grad(g, w, stride, padding, 11, 9),
        numba_backend.conv2d_input_grad(g, w, stride, padding, 11, 9),
        rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        numpy_backend.conv2d_weight_grad(g, x, stride, padding, 3),
        numba_backend.conv2d_weight_grad(g, x, stride, padding, 3),
        rtol=0, atol=1e-12)


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_kernels_agree(factor):
    rng = make_rng(7)
    x = rng.normal(size=(2, 6, 5))
    np.testing.assert_allclose(numpy_backend.upsample_forward(x, factor),
                               numba_backend.upsample_forward(x, factor),
                               rtol=0, atol=1e-12)
    g = rng.normal(size=(2, 6 * factor, 5 * factor))
    np.testing.assert_allclose(
        numpy_backend.upsample_input_grad(g, factor, 6, 5),
        numba_backend.upsample_input_grad(g, factor, 6, 5),
        rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_roi_kernels_agree(seed):
    rng = make_rng(20 + seed)
    feat = rng.normal(size=(3, 9, 12))
    x1, y1 = rng.uniform(-4, 2, size=2)
    x2 = x1 + rng.uniform(3, 14)
    y2 = y1 + rng.uniform(3, 10)
    a = numpy_backend.roi_align_forward(feat, x1, y1, x2, y2, 5, 4, 2)
    b = numba_backend.roi_align_forward(feat, x1, y1, x2, y2, 5, 4, 2)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    g = rng.normal(size=(3, 5, 4))
    np.testing.assert_allclose(
        numpy_backend.roi_align_input_grad(g, x1, y1, x2, y2, 9, 12, 2),
        numba_backend.roi_align_input_grad(g, x1, y1, x2, y2, 9, 12, 2),
        rtol=0, atol=1e-12)


def test_default_backend_is_numba_here():
    assert backend_name() == "numba"


def test_env_flag_selects_numpy_backend():
    code = ("from poserefine.kernels import backend_name; "
            "print(backend_name())")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"POSEREFINE_NUMBA": "0", "PATH": "/usr/bin:/bin",
                              "PYTHONPATH": ":".join(sys.path)},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
