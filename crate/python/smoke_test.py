"""Smoke test for the crisp_py extension.

pip install -e crates/py --no-build-isolation
python python/smoke_test.py
"""

import json
import math

import crisp_py


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def test_pca_worked_example():
    rows = [[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    mean, directions, _, singular = crisp_py.pca(rows, 2)
    assert mean == [0.0, 0.0]
    assert close(abs(directions[0][0]), 1.0)
    assert singular[0] >= singular[1]
    (row,) = crisp_py.pca_init(rows, 2, 1)
    assert close(row[0], 3.0) and close(row[1], 0.0)


def test_replicate_rows_are_perfectly_correlated():
    old = [[1.0, 2.0, 0.5], [0.0, -1.0, 2.0], [3.0, 0.0, 1.0]]
    rep = crisp_py.replicate_init(old, 3)
    corr = crisp_py.correlation(rep + old)
    assert all(corr[i][j] == 1.0 for i in range(3) for j in range(3))


def test_hungarian():
    pairs = crisp_py.hungarian([[4.0, 1.0], [2.0, 0.0], [3.0, 5.0]])
    assert sorted(pairs) == [(1, 1), (2, 0)] or sorted(pairs) == [(0, 1), (1, 0)]
    total = {(0, 1): 1.0, (1, 0): 2.0, (1, 1): 0.0, (2, 0): 3.0}
    assert close(sum(total[p] for p in pairs), 3.0)


def test_forgetting_ratio():
    first = {0: (0, 10.0), 1: (0, 20.0), 2: (2, 5.0)}
    last = {0: 8.0, 1: 22.0, 2: 5.0}
    assert close(crisp_py.forgetting(3, first, last), 1.0 / 30.0)
    assert crisp_py.forgetting(3, first, last, indicator="literal") == 0.0


def test_run_experiment():
    config = "seed = 1\n[generator]\nvideos_per_category = 3\n[train]\niterations_per_step = 2\n"
    report = json.loads(crisp_py.run_experiment(config))
    assert [s["step"] for s in report["steps"]] == [0, 1, 2]
    assert all(0.0 <= s["mAP"] <= 1.0 for s in report["steps"])
    assert math.isfinite(report["FR"])
    assert crisp_py.run_experiment(config, workers=2) == crisp_py.run_experiment(config)


def test_errors_carry_tags():
    try:
        crisp_py.run_experiment("lr = 0.1\n")
    except ValueError as e:
        assert str(e).startswith("config-error"), e
    else:
        raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"ok {test.__name__}")
    print(f"{len(tests)} passed (crisp_py {crisp_py.__version__})")
