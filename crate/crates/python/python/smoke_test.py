"""Smoke test for the gpexperts_py extension.

Build and install first:  pip install --no-build-isolation crates/python
"""

import json
import math

import gpexperts_py as gx


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    x, y = gx.synthetic_gp_data(200, 2, heteroscedastic=True, seed=3)
    assert len(x) == 200 and len(x[0]) == 2 and len(y) == 200

    model = gx.GPModel(x[:100], y[:100], kernel="seard", optimize=True, seed=1)
    assert len(model.hypers) == 4
    assert math.isfinite(model.log_marginal_likelihood())
    preds = model.predict(x[100:110])
    assert len(preds) == 10
    for mean, var, prior in preds:
        assert 0.0 < var <= prior + 1e-12

    far = model.predict([[1e4, 1e4]])[0]
    assert close(far[1], far[2]) and abs(far[0]) < 1e-9

    # worked dLOP example: Q12 = 2 from means 0 and sqrt(2) at unit variance
    experts = [(0.0, 1.0, 2.0), (math.sqrt(2.0), 1.0, 2.0)]
    assert close(gx.sym_kl_matrix(experts)[0][1], 2.0)
    w = gx.dlop_weights(experts, [0.8, 0.2], 1.0)
    assert abs(w[0] - 0.4712) < 5e-5 and abs(w[1] - 0.5288) < 5e-5

    second = gx.GPModel(x[100:], y[100:], lengthscale=0.8)
    grid = list(zip(model.predict(x[:5]), second.predict(x[:5])))
    for rule in gx.RULES:
        for row in grid:
            mean, var, weights = gx.combine_predictions(rule, list(row))
            assert math.isfinite(mean) and var > 0.0
            if rule in ("gpoe", "dlop"):
                assert close(sum(weights), 1.0)

    assert gx.smse(y[:5], y[:5], 0.0, 1.0) == 0.0
    assert gx.snlp([(0.0, 1.0)] * 3, [0.5, -1.0, 2.0], 0.0, 1.0) == 0.0

    cfg = {
        "synthetic": {"n_train": 400, "n_test": 100},
        "scheme": "sod",
        "rules": ["gpoe", "dlop"],
        "n_experts": 4,
        "subset_size": 100,
        "seed": 2,
        "optimizer": {"max_iters": 50, "restarts": 0},
    }
    report = json.loads(gx.run_benchmark(json.dumps(cfg)))
    assert [r["rule"] for r in report["rules"]] == ["gpoe", "dlop"]
    for r in report["rules"]:
        assert math.isfinite(r["snlp"]) and math.isfinite(r["smse"])

    try:
        gx.combine_predictions("mean", experts)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown rule accepted")

    print("smoke test passed:", {r["rule"]: round(r["snlp"], 4) for r in report["rules"]})


if __name__ == "__main__":
    main()
