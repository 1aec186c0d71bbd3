import os
import subprocess
import sys

import numpy as np
import pytest

from amcn import _kernels_py, kernels

compiled = pytest.importorskip("amcn._ext._kernels")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape,k", [((2, 3, 5, 7), 3), ((1, 1, 1, 1), 3), ((3, 4, 6, 6), 1),
                                     ((2, 2, 9, 4), 5), ((1, 16, 8, 8), 3)])
def test_compiled_matches_fallback_bitwise(shape, k, dtype):
    rng = np.random.default_rng(sum(shape) + k)
    x = rng.standard_normal(shape).astype(dtype)
    a = compiled.im2col(x, k)
    b = _kernels_py.im2col(x, k)
    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    cols = rng.standard_normal(b.shape).astype(dtype)
    a = compiled.col2im(cols, *shape, k)
    b = _kernels_py.col2im(cols, *shape, k)
    assert a.shape == shape and a.tobytes() == b.tobytes()


def test_col2im_is_the_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 5))
    cols = rng.standard_normal((2 * 6 * 5, 9 * 3))
    lhs = float((kernels.im2col(x, 3) * cols).sum())
    rhs = float((x * kernels.col2im(cols, 2, 3, 6, 5, 3)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_default_backend_is_compiled():
    if os.environ.get("AMCN_KERNELS", "").lower() == "python":
        pytest.skip("fallback forced by the environment")
    assert kernels.BACKEND == "cython"


def test_environment_forces_fallback():
    env = dict(os.environ, AMCN_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from amcn import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_fallback_training_step_matches(tmp_path):
    # one optimizer step under each backend gives the same model bytes
    script = (
        "import sys\n"
        "from amcn.model import AmcnConfig, model_bytes\n"
        "from amcn.synth import synth_scene\n"
        "from amcn.train import TrainConfig, build_training_set, new_model, train\n"
        "cfg = TrainConfig(epochs=1, batch_size=4, patch=16, stride=16, scale=4)\n"
        "p, s = build_training_set([synth_scene(3, 32, 32, 4)], cfg)\n"
        "mc = AmcnConfig(base_channels=8, rdb_growth=8, rdb_layers=2, n_levels=1, scale_factor=4)\n"
        "m, _ = train(new_model(s, cfg, mc), p, cfg)\n"
        "open(sys.argv[1], 'wb').write(model_bytes(m))\n"
    )
    outs = []
    for backend in ("python", "cython"):
        env = dict(os.environ, AMCN_KERNELS=backend)
        path = tmp_path / f"{backend}.bin"
        subprocess.run([sys.executable, "-c", script, str(path)], env=env, check=True)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
