"""Smoke test for the Python bindings.

Loads the extension from NAIMA_PY_LIB (path to the built cdylib) or, if that
is unset, builds it with cargo first. Run directly or under pytest.
"""

import importlib.util
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def _library() -> Path:
    env = os.environ.get("NAIMA_PY_LIB")
    if env:
        return Path(env)
    subprocess.run(["cargo", "build", "-p", "naima-py"], cwd=ROOT, check=True)
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "debug"
    for name in ("libnaima_py.so", "libnaima_py.dylib", "naima_py.dll"):
        if (target / name).exists():
            return target / name
    raise FileNotFoundError(f"no naima_py library under {target}")


def load():
    tmp = Path(tempfile.mkdtemp())
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    dest = tmp / f"naima{suffix}"
    shutil.copy(_library(), dest)
    spec = importlib.util.spec_from_file_location("naima", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


naima = load()


def test_grid_and_resampling():
    g = naima.Grid(1, 2, 3, [float(i) for i in range(6)])
    assert g.shape == (1, 2, 3)
    assert g.get(0, 1, 2) == 5.0
    flat = naima.Grid.filled(1, 8, 8, 2.5)
    up = naima.bicubic_upsample(flat, 4)
    assert up.shape == (1, 32, 32)
    assert all(abs(v - 2.5) < 1e-12 for v in up.to_list())
    down = naima.bicubic_downsample(up, 4)
    assert down.shape == (1, 8, 8)
    assert naima.rmse_cm(down, flat) < 1e-9
    try:
        naima.bicubic_upsample(flat, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("scale 1 should be rejected")


def test_attention_rows_are_convex_combinations():
    q = [[0.3, -1.0], [2.0, 0.5], [0.0, 0.0]]
    k = [[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0], [0.5, 0.5]]
    v = [[1.0], [2.0], [3.0], [4.0]]
    out = naima.attention(q, k, v)
    assert len(out) == 3 and all(len(r) == 1 for r in out)
    for qi, row in zip(q, out):
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(2) for kj in k]
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        want = sum(wi * vj[0] for wi, vj in zip(w, v)) / sum(w)
        assert abs(row[0] - want) < 1e-12


def test_model_round_trip():
    samples = naima.synthetic_dataset(2, 28, 28, 4, seed=5)
    assert samples[0].rgb.shape == (3, 28, 28)
    assert samples[0].depth_lr.shape == (1, 7, 7)

    cfg = naima.RunConfig(tiny=True)
    cfg.set("train.seed", "2")
    try:
        cfg.set("no.such.key", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keys should be rejected")

    model = naima.Model(cfg)
    assert model.variant == "naima"
    assert model.alpha(1) == 0.0
    pred = model.predict(samples[0])
    assert pred.shape == (1, 28, 28)
    assert all(math.isfinite(v) for v in pred.to_list())

    losses = model.fit(samples, 2)
    assert len(losses) == 2 and model.epoch == 2
    per_sample, mean = model.evaluate(samples)
    assert len(per_sample) == 2 and math.isfinite(mean)
    _, baseline = naima.bicubic_baseline(samples)
    assert baseline > 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.bin")
        model.save(path)
        again = naima.Model.load(path)
        assert again.epoch == 2
        assert again.predict(samples[1]).to_list() == model.predict(samples[1]).to_list()


def test_cli_exit_codes():
    assert naima.run_cli(["--help"]) == 0
    assert naima.run_cli(["train", "--bogus"]) == 2


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")
