"""Smoke test for the care_py extension module.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/care_py-*.whl

then run `python python/smoke_test.py` from the repository root.
"""

import math
import random
from pathlib import Path

import care_py

FIXTURES = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def close(a, b, tol):
    return abs(a - b) <= tol


def check_datasets():
    src = care_py.load_dataset(FIXTURES / "coco_source.json", "source")
    tgt = care_py.load_dataset(FIXTURES / "coco_target.json", "target")
    assert src.classes == ["person", "car"], src.classes
    assert (len(src), len(tgt)) == (34, 26)
    assert sum(src.class_counts()) == 34

    report = care_py.gap_report(src, tgt)
    assert sum(report["source"]["histogram"]) == 34

    rows = care_py.annotation_weights(src, tgt)
    assert len(rows) == 26
    assert all(1.0 <= r["v_box"] < 11.0 for r in rows)

    try:
        care_py.load_dataset(FIXTURES / "missing.json", "source")
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise OSError")


def check_weights():
    counts = [10, 30, 60]
    w = care_py.class_weights(counts)
    assert close(sum(wi * n for wi, n in zip(w, counts)), sum(counts), 1e-9)
    assert close(care_py.squash(1.0), 5.621172, 1e-6)
    assert care_py.squash(1e6) < 11.0


def check_kde():
    rng = random.Random(0)
    pts = [[rng.random(), rng.random()] for _ in range(30)]
    kde = care_py.Kde(pts)
    hx, hy = kde.bandwidth
    q = [0.4, 0.6]
    brute = sum(
        math.exp(-0.5 * (((q[0] - x) / hx) ** 2 + ((q[1] - y) / hy) ** 2)) for x, y in pts
    ) / (2 * math.pi * hx * hy * len(pts))
    assert close(kde.pdf(q), brute, 1e-12 * brute)
    assert 0.98 <= kde.grid_mass() <= 1.0 + 1e-9


def check_alignment():
    sep = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]
    loss, gs, gt = care_py.cycle_consistency_loss(sep, sep)
    assert loss <= 1e-10
    assert len(gs) == 3 and len(gt) == 3

    rng = random.Random(1)
    fs = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(4)]
    ft = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(5)]
    assert care_py.check_gradients(fs, ft) < 1e-6

    mmd, _, _ = care_py.linear_mmd([[1.0, 0.0]], [[0.0, 0.0]])
    assert close(mmd, 1.0, 1e-15)

    assert close(care_py.det_loss([0.0, 0.0], [0.1] * 4, [0.1] * 4, 1), math.log(2), 1e-15)


def check_verify():
    report = care_py.identity_report(200, 3)
    assert report["max_abs_discrepancy"] < 1e-10
    assert report["max_abs_discrepancy_equal_appearance"] < 1e-10


def check_training():
    task = care_py.default_task()
    instances = care_py.generate("target", 5, seed=1, task=task)
    assert len(instances) == 5
    assert len(instances[0][2]) == 4

    config = {
        "data": {"source_train": 200, "target_train": 60, "target_test": 100, "seed": 1},
        "train": {"method": "care", "steps": 50, "batch_size": 16, "log_every": 10},
    }
    a = care_py.train(config)
    b = care_py.train(config)
    assert a["params_sha256"] == b["params_sha256"]
    assert 0.0 <= a["metrics"]["balanced_accuracy"] <= 1.0
    assert a["resolved"]["alignment"] == "cycle"

    try:
        care_py.train({"train": {"lamda": 1.0}})
    except ValueError as e:
        assert "lamda" in str(e)
    else:
        raise AssertionError("unknown key should raise ValueError")

    bench_cfg = dict(config, seeds=[0, 1], cells=[{"name": "mixing", "method": "mixing"}])
    report = care_py.bench(bench_cfg, threads=1)
    assert [c["cell"]["name"] for c in report["cells"]] == ["mixing"]
    assert len(report["cells"][0]["runs"]) == 2


def main():
    checks = [check_datasets, check_weights, check_kde, check_alignment, check_verify, check_training]
    for check in checks:
        check()
        print(f"ok  {check.__name__}")
    print(f"care_py {care_py.__version__}: {len(checks)} checks passed")


if __name__ == "__main__":
    main()
