"""Smoke test for the compiled `vlaad` extension module.

Build first:
    cargo build -p vlaad-py --features extension-module
then run `python3 python/smoke_test.py`. If `vlaad` is not importable the
script loads target/{release,debug}/libvlaad.so directly.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import vlaad

        return vlaad
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libvlaad.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("vlaad", str(lib))
            spec = importlib.util.spec_from_loader("vlaad", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("vlaad extension not found; build it with cargo build -p vlaad-py --features extension-module")


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    v = load()

    # pooling
    z = [0.3, -1.2, 2.0, 0.5]
    pooled = v.lse_pool(z)
    assert min(z) <= sum(z) / len(z) <= pooled <= max(z)
    att = v.pooling_attention(z, 10.0)
    assert close(sum(att), 1.0) and max(att) == att[2]
    assert close(v.lse_pool([1.0, 1.0, 1.0], 3.0), 1.0)

    # metrics
    scores, labels = [0.1, 0.4, 0.35, 0.8], [False, False, True, True]
    assert close(v.roc_auc(scores, labels), 0.75)
    m = v.threshold_metrics(scores, labels, 0.375)
    assert (m["tp"], m["fp"], m["fn"], m["tn"]) == (1, 1, 1, 1) and close(m["f1"], 0.5)
    tau, j, degenerate = v.youden_threshold([0.1, 0.2, 0.7, 0.9], labels)
    assert close(tau, 0.45) and close(j, 1.0) and not degenerate

    # leaderboard and significance
    p = v.infraction_penalty({"collisions_vehicle": 2, "collisions_pedestrian": 1})
    assert close(p, 1 / 3.4)
    assert v.infraction_penalty({}, "v20") == 1.0
    deltas = [-float(r) if r in (10, 18, 20) else float(r) for r in range(1, 21)]
    w = v.wilcoxon_signed_rank(deltas)
    assert w["W"] == 162 and w["method"] == "exact" and abs(w["p"] - 0.016) < 5e-4

    # encoder and model
    enc = v.StubEncoder(16, seed=0)
    e = enc.encode_video([[0.5, -1.0, 2.0], [1.0, 0.0, 0.25]])
    assert len(e) == 16 and close(math.sqrt(sum(x * x for x in e)), 1.0)
    t = enc.encode_text("a car turning left")
    assert close(math.sqrt(sum(x * x for x in t)), 1.0)
    ckpt = v.Checkpoint(16, 4, seed=3)
    out = ckpt.forward([e, t, e])
    assert close(out["pooled"], v.lse_pool(out["logits"], ckpt.gamma))
    assert close(out["probability"], 1 / (1 + math.exp(-out["pooled"])))
    try:
        ckpt.forward([[1.0, 2.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")

    # streaming
    buf = v.CausalBuffer()
    risks = [buf.push_tick([math.sin(0.1 * k), 1.0, 0.0], k, enc, ckpt) for k in range(100)]
    assert buf.encoder_calls == 20 and all(0.0 <= r <= 1.0 for r in risks)
    state = v.make_global_state(risks[-1], 5.0, 1, 3)
    assert state[1:] == [5.0, 0.0, 1.0, 0.0]

    # end to end
    with tempfile.TemporaryDirectory() as d:
        manifest = pathlib.Path(d) / "m.jsonl"
        n = v.synthesize(str(manifest), json.dumps({"n_normal": 150, "n_collision": 150, "feature_dim": 32}))
        assert n == 300
        cfg = {"embedding_dim": 32, "hidden_dim": 16, "train_batch": 32, "epochs": 40, "split_fraction": 2 / 3}
        trained, history = v.train(str(manifest), json.dumps(cfg))
        assert len(history) == 40 and trained.epoch == 40
        assert history[-1]["val_auc"] > 0.9, history[-1]
        path = pathlib.Path(d) / "ck.bin"
        trained.save(str(path))
        again = v.Checkpoint.load(str(path))
        assert again.dim == 32 and again.hidden == 16

    print("python smoke test passed")


if __name__ == "__main__":
    main()
