"""Smoke test for the protonorm_py extension module.

Run after `pip install -e . --no-build-isolation` (or with the built shared
library on PYTHONPATH): python python/smoke_test.py
"""

import math
import os
import tempfile

import protonorm_py as pn


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print("ok  ", msg)


def main():
    check(pn.MODES == ["none", "proto_only", "query_only", "both"], "four normalization modes")

    # Prototype head on a hand example: prototypes are class means.
    out = pn.forward(
        support=[[0.0, 0.0], [2.0, 0.0], [0.0, 4.0]],
        support_labels=[0, 0, 1],
        query=[[1.0, 0.0], [0.0, 3.0]],
        query_labels=[0, 1],
        n_classes=2,
    )
    check(out["prototypes"] == [[1.0, 0.0], [0.0, 4.0]], "prototypes are support means")
    check(out["predictions"] == [0, 1], "nearest-prototype predictions")
    check(abs(sum(out["probabilities"][0]) - 1.0) < 1e-12, "probabilities sum to one")

    unit = pn.forward([[3.0, 4.0], [0.0, 10.0]], [0, 1], [[1.0, 1.0]], [0], 2, mode="proto_only")
    check(all(abs(math.hypot(*p) - 1.0) < 1e-12 for p in unit["prototypes"]), "proto_only gives unit prototypes")
    check(unit["prototype_norms"] == [5.0, 10.0], "raw norms are reported")

    t = pn.distance_terms([1.0, 2.0], [3.0, -1.0])
    check(abs(t["query_sq"] - 2 * t["cross"] + t["proto_sq"] - t["distance"]) < 1e-12, "distance factorization")
    check(t["distance"] == 4.0 + 9.0, "distance value")

    # The hand bias scenario flips under prototype normalization.
    probe = pn.bias_probe(prototypes=[[0.5, 0.0], [0.0, 3.0]], query=[0.4, 1.2])
    check(probe["predictions"][0] == [0, 1, 0, 1], "hand scenario predictions per mode")
    auto = pn.bias_probe(n=200, unit_prototypes=True)
    check(auto["flips"] == 0, "no flips with unit prototypes")

    rows = pn.gradient_check(episodes=3)
    check(len(rows) == 4 and all(r["passed"] for r in rows), "gradient check passes in every mode")

    cv = pn.coeff_variation([5.0, 10.0])
    check(abs(cv["cv"] - 2.5 / 7.5) < 1e-12, "coefficient of variation")

    corpus = pn.SyntheticCorpus({"sentences": [600, 300, 300]})
    train, dev, test = (corpus.split(s) for s in ("train", "dev", "test"))
    check(not set(train[0].classes) & set(test[0].classes), "train and test classes are disjoint")
    check(len(train[1]) == train[0].token_count, "one embedding row per token")

    eps = pn.sample(test[0], k=5, seed=3, count=20)
    check(len(eps) == 20 and all(len(e.classes) == 5 for e in eps), "5-way episodes")
    again = pn.sample(test[0], k=5, seed=3, count=20, workers=4)
    check([e.to_dict() for e in eps] == [e.to_dict() for e in again], "sampling is worker independent")

    result = pn.train(train, dev, {"mode": "proto_only", "max_epochs": 2, "eval_every": 50, "eval_episodes": 20})
    check(result.steps > 0 and len(result.curve) >= 2, "training produces a learning curve")
    check(result.curve_csv().startswith("step,split,metric,value"), "curve CSV header")

    report = pn.evaluate(eps, test[1], result.params, mode="proto_only")
    check(0.0 <= report["micro_f1"] <= 1.0 and report["episodes"] == 20, "evaluation report")
    survey = pn.norm_survey(eps, test[1])
    check(survey["global"]["cv"] > 0.0, "prototype norm survey")

    scatter = pn.frequency_scatter(train[1], corpus.frequencies)
    check(max(abs(scatter["corr_pc1"]), abs(scatter["corr_pc2"])) >= 0.5, "a principal component tracks frequency")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "test.pne1")
        test[1].write(path)
        loaded = pn.EmbeddingStore.load(path)
        check(len(loaded) == len(test[1]) and loaded.dim == test[1].dim, "PNE1 round trip")
        params_path = os.path.join(d, "params.bin")
        result.params.write(params_path)
        check(pn.ProjectionParams.read(params_path).w == result.params.w, "parameter round trip")
        try:
            pn.EmbeddingStore.load(os.path.join(d, "missing.pne1"))
        except OSError as e:
            check("missing.pne1" in str(e), "missing dump raises OSError naming the file")
        else:
            raise AssertionError("missing dump did not raise")

    try:
        pn.forward([[1.0, 0.0]], [0], [[1.0, 0.0]], [0], 2)
    except pn.ProtonormError as e:
        check("degenerate" in str(e), "empty class raises ProtonormError")
    else:
        raise AssertionError("degenerate class did not raise")

    print("smoke test passed")


if __name__ == "__main__":
    main()
