import os
import subprocess
import sys

import numpy as np
import pytest

from ssmvla import env, kernels

compiled_only = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernels not built")


@compiled_only
def test_render_backends_bit_identical():
    rng = np.random.default_rng(1)
    for seed in range(20):
        s = env.reset(seed, "push_red")
        for _ in range(5):
            s, _, _ = env.step(s, env.random_action(rng))
        a = env.render(s, backend="compiled")
        b = env.render(s, backend="python")
        assert a.rgb.tobytes() == b.rgb.tobytes()
        assert a.depth.tobytes() == b.depth.tobytes()


@compiled_only
def test_nearest_codes_backends_agree():
    rng = np.random.default_rng(2)
    codes = rng.integers(-2, 3, size=(16, 4)).astype(np.float64)
    x = rng.integers(-2, 3, size=(500, 4)).astype(np.float64)
    np.testing.assert_array_equal(
        kernels.get_backend("compiled").nearest_codes(x, codes), kernels.get_backend("python").nearest_codes(x, codes)
    )


@pytest.mark.parametrize("name", ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else []))
def test_nearest_codes_ties_go_to_lowest_index(name):
    k = kernels.get_backend(name)
    codes = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    idx = k.nearest_codes(np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]), codes)
    assert idx.tolist() == [0, 0, 1]


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_switch():
    code = "from ssmvla import kernels; print(kernels.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code], env={**os.environ, "SSMVLA_PURE_PYTHON": "1"}, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "python"
