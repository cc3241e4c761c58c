import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from deepfusion import kernels

ROOT = Path(__file__).resolve().parents[1]


def backend_under(env_value):
    env = dict(os.environ)
    env.pop("DEEPFUSION_BACKEND", None)
    if env_value is not None:
        env["DEEPFUSION_BACKEND"] = env_value
    out = subprocess.run([sys.executable, "-c", "import deepfusion; print(deepfusion.BACKEND_NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_python_fallback_can_be_forced():
    assert backend_under("python") == "python"
    assert backend_under(None) == kernels.BACKEND_NAME


def test_dispatch_matches_both_dtypes(rng):
    ft, fa = rng.random((5, 5, 2)), rng.random((2, 5, 5, 2))
    labels = rng.dirichlet([1, 1], size=(2, 5, 5))
    ref, _ = kernels.fuse_forward(ft, fa, labels, 1, impl=kernels.python_backend)
    for dtype in (np.float32, np.float64):
        pred, w = kernels.fuse_forward(ft.astype(dtype), fa.astype(dtype), labels.astype(dtype), 1)
        assert pred.dtype == dtype and w.dtype == dtype
        np.testing.assert_allclose(pred, ref, atol=1e-5 if dtype == np.float32 else 1e-12)


def test_benchmark_script_runs():
    sys.path.insert(0, str(ROOT / "benchmarks"))
    try:
        import bench_kernels
    finally:
        sys.path.pop(0)
    rows = bench_kernels.bench(size=8, depth=3, atlases=2, t=1, repeat=1)
    assert "python" in rows and all(v > 0 for pair in rows.values() for v in pair)
