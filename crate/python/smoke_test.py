"""Smoke test for the clipit Python extension.

Build and install it first, for example:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import clipit


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok   {what}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        paths = clipit.synth(data, seed=3, samples=400, test_samples=100)
        check(len(paths) == 7, "synth writes seven files")

        images = clipit.EmbeddingStore.load(os.path.join(data, "train_task.cipe"))
        check(len(images) == 400 and images.dim == 64, "task store shape")
        check(set(images.labels()) == {0, 1}, "labels are the two classes")

        retrieval = clipit.EmbeddingStore.load(os.path.join(data, "train_retrieval.cipe"))
        reports = clipit.EmbeddingStore.load(os.path.join(data, "report_retrieval.cipe"))
        pairs = clipit.pair(retrieval, reports)
        sims = pairs.similarities()
        check(len(pairs) == 400 and all(-1.0 <= s <= 1.0 for s in sims), "one pair per image")
        second = clipit.pair(retrieval, reports, rank=2)
        check(all(a >= b for a, b in zip(sims, second.similarities())), "rank 2 is never more similar")

        texts = clipit.encode_corpus(os.path.join(data, "corpus.jsonl"))
        check(len(texts) == 40 and texts.ids()[0] == "r00000", "corpus encodes by id")
        v = clipit.encode_text("ductal carcinoma breast")
        check(abs(sum(x * x for x in v) - 1.0) < 1e-12, "text embedding has unit norm")

        model, logs = clipit.train(images, pairs, texts, seed=1, epochs=2)
        check(set(logs) == {"text", "multimodal"} and len(logs["multimodal"]) == 2, "two-stage training logs")
        check(model.has_text_branch, "full model keeps the text branch")

        test = clipit.EmbeddingStore.load(os.path.join(data, "test_task.cipe")).vectors()[:10]
        fake_text = [[0.1] * 64 for _ in test]
        classes, logits = model.predict(test)
        joint = model.forward_joint(test, fake_text)
        check(joint["logits"] == logits, "image-only logits equal joint logits")

        uni = model.unimodal()
        check(not uni.has_text_branch and uni.predict(test) == (classes, logits), "extracted model predicts the same")
        path = os.path.join(tmp, "m.cipm")
        uni.save(path)
        check(clipit.Model.load(path).predict(test) == (classes, logits), "checkpoint roundtrip")
        cost = uni.cost()
        check(cost["text_param_total"] == 0 and cost["param_total"] > 0, "cost of the extracted model")

        out = os.path.join(tmp, "run")
        res = clipit.pipeline(data, out_dir=out, seed=3, epochs=2, baseline=True)
        check(0.0 <= res["accuracy"] <= 1.0 and res["baseline_accuracy"] is not None, "pipeline reports accuracy")
        check(res["omega_count"] is not None and res["fidelity"] is not None, "pipeline reports omega and fidelity")
        saved = clipit.Model.load(os.path.join(out, "model.cipm"))
        test_all = clipit.EmbeddingStore.load(os.path.join(data, "test_task.cipe")).vectors()
        check(saved.predict(test_all)[0] == res["predictions"], "saved checkpoint reproduces predictions")

    e = math.exp(-1.0)
    stat, dof, p = clipit.fisher_combined([e, e])
    check(dof == 4 and abs(stat - 4.0) < 1e-12 and abs(p - 3 * math.exp(-2.0)) < 1e-10, "Fisher worked example")
    check(clipit.omega([0, 1, 1, 0], [1, 1, 0, 0], [0, 0, 1, 1]) == (2, 0.5), "omega count")

    try:
        clipit.EmbeddingStore([[1.0], [2.0, 3.0]])
    except clipit.ClipitError as err:
        check(isinstance(err, ValueError), "ragged input raises ClipitError")
    else:
        raise SystemExit("FAIL: ragged input accepted")

    try:
        clipit.pipeline("/nonexistent", variant="bogus")
    except clipit.ClipitError:
        check(True, "unknown variant rejected")
    else:
        raise SystemExit("FAIL: unknown variant accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
