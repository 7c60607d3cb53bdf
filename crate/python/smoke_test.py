"""Smoke test for the `debias` extension module.

Build and copy the module next to this file first:

    cargo build --release -p debias-py
    cp target/release/libdebias.so python/debias.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import debias  # noqa: E402

CONFIG = """
mode = "bayes_weighted"
layer_sizes = [12, 8, 4]
activation = "relu"
alpha0 = 5e-5
cycles = 3
epochs_per_cycle = 6
sampling_len = 3
temperature = 1.0
momentum = 0.5
kappa = 2.0
batch_size = 32
seed = 7
"""

REPORT_KEYS = {
    "mean_accuracy",
    "bias_amplification",
    "opportunity_gap",
    "average_odds",
    "subgroup_tpr",
    "tpr_gap",
    "warnings",
}


def main():
    assert debias.loss_weight(0.5, 2.0) == 2.25
    assert debias.loss_weight(0.3, 0.0) == 1.0
    assert debias.stepsize(0.1, 400, 4, 1) == 0.1
    assert abs(debias.stepsize(0.1, 400, 4, 51) - 0.05) < 1e-12
    assert debias.attribute_transform([1.0, 2.0, 3.0], 3) == [2.0, 2.0, 2.0]
    try:
        debias.attribute_transform([1.0, 2.0, 3.0], 2)
    except ValueError:
        pass
    else:
        raise AssertionError("indivisible feature length must raise")

    data = debias.generate(
        n_classes=4,
        samples_per_class=60,
        positions_per_channel=4,
        center_scale=1.5,
        noise_std=1.0,
        seed=3,
        plan="sensitive",
        test_per_class=25,
    )
    train, val = data["train"], data["val"]
    assert len(train) + len(val) == 240
    assert train.n_features == 12 and train.n_classes == 4

    cfg = debias.RunConfig.from_toml(CONFIG)
    ens = debias.train(cfg, train)
    assert ens.n_draws == 9
    assert len(ens.history) == 18
    assert all(0.0 <= s <= 0.5 for s in ens.sigma_true)

    pred, mean, sigma = ens.predict(data["test_colour"].features)
    assert len(pred) == len(mean) == len(sigma) == 100
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in mean)

    evaluation = ens.evaluate(data["test_colour"], data["test_gray"])
    assert set(evaluation["report"]) == REPORT_KEYS
    assert 0.0 <= evaluation["overall_tpr"] <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.dsa")
        ens.save(path)
        again = debias.TrainedEnsemble.load(path)
        assert again.predict(data["test_gray"].features)[0] == ens.predict(data["test_gray"].features)[0]
        csv = os.path.join(tmp, "train.csv")
        train.save(csv)
        assert debias.Dataset.load(csv).labels == train.labels

    unweighted = debias.train(cfg.replace(mode="bayes_unweighted"), train)
    zero = debias.train(cfg.replace(kappa=0.0), train)
    assert unweighted.predict(train.features)[1] == zero.predict(train.features)[1]

    sweep = debias.sweep_kappa(cfg, [0.0, 2.0, 2.0], train, val, data["test_colour"], data["test_gray"])
    assert [row["kappa"] for row in sweep["rows"]] == [0.0, 2.0]
    assert sweep["best"] in (0.0, 2.0)
    assert all(math.isfinite(row["val_loss"]) for row in sweep["rows"])

    report = debias.fairness_report([(0, 0, 0, None), (0, 0, 1, None), (1, 1, 0, None), (1, 0, 1, None)], 2)
    assert report["mean_accuracy"] == 0.75

    print("smoke test passed")


if __name__ == "__main__":
    main()
