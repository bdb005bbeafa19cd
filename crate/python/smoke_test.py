"""Smoke test for the keyframe_py extension module.

Build the extension first:

    cargo build --release -p keyframe-py --features extension-module

then run `python3 python/smoke_test.py`. The shared library is located under
target/, copied to a temporary directory as keyframe_py.so and imported.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension(tmp):
    for profile in ("release", "debug"):
        for name in ("libkeyframe_py.so", "libkeyframe_py.dylib"):
            path = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(path):
                shutil.copy(path, os.path.join(tmp, "keyframe_py.so"))
                sys.path.insert(0, tmp)
                return importlib.import_module("keyframe_py")
    sys.exit("keyframe_py not built; see the module docstring")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    tmp = tempfile.mkdtemp()
    try:
        kf = import_extension(tmp)
        run(kf, tmp)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print("smoke test: ok")


def run(kf, tmp):
    # information oracle
    copy = kf.DiscreteModel.copy()
    assert copy.greedy_select(1)[0] == [0]
    assert close(copy.conditional_mi([0]), math.log(2))
    xor = kf.DiscreteModel.xor()
    assert xor.check_submodular()[0] >= 1
    model = kf.DiscreteModel.random_factorized(6, seed=7)
    opt = model.exhaustive_select(2)[1]
    greedy = model.greedy_select(2)[1]
    assert greedy >= (1 - 1 / math.e) * opt - 1e-9
    assert model.check_submodular() == (0, 0)
    assert kf.DiscreteModel.from_json(model.to_json()).n_frames == 6

    # losses and labels
    assert close(kf.infonce_loss([0.0, 0.0], [True, False]), math.log(2))
    try:
        kf.infonce_loss([1.0, 2.0], [True, True])
        raise AssertionError("all-positive mask accepted")
    except ValueError:
        pass
    assert kf.label_frames([(1.0, 2.0)], 4, 1.0) == [False, True, True, False]

    # selection and coverage
    assert kf.select([3.0, 1.0, 2.0, 5.0], 2, 1) == [0, 3]
    assert kf.select([0.9, 0.1, 0.5, 0.7], 1, 2) == [0, 3]
    assert kf.uniform_select(10, 3) == [0, 3, 6]
    assert kf.coverage([0, 3], [(2.5, 3.0)], 1.0)
    assert not kf.coverage([0, 1], [(2.5, 3.0)], 1.0)

    # scorer
    cfg = kf.ScorerConfig(dim=8, subspaces=2, window=2, lambda_init=0.5, seed=3)
    scorer = kf.Scorer(cfg)
    frames = [[math.sin(i + k) for k in range(8)] for i in range(6)]
    query = [math.cos(k) for k in range(8)]
    scores = scorer.score(frames, query)
    assert len(scores) == 6 and all(math.isfinite(s) for s in scores)
    assert scorer.score(frames[:3], query) == scores[:3]

    mask = [False, False, True, True, False, False]
    losses = scorer.fit([(frames, query, mask)], learning_rate=0.05, epochs=5, batch_size=1)
    assert len(losses) == 5 and losses[-1] < losses[0], losses

    ckpt = os.path.join(tmp, "s.evck")
    scorer.save(ckpt)
    again = kf.Scorer.load(ckpt)
    assert again.checksum() == scorer.checksum()
    assert again.score(frames, query) == scorer.score(frames, query)

    # embeddings io
    emb = os.path.join(tmp, "v.evsb")
    kf.save_embeddings(emb, [[0.5, -1.25], [3.0, 0.0]])
    assert kf.load_embeddings(emb) == [[0.5, -1.25], [3.0, 0.0]]
    with open(emb, "r+b") as f:
        f.seek(17)
        f.write(b"\xff")
    try:
        kf.load_embeddings(emb)
        raise AssertionError("corrupted file accepted")
    except ValueError as e:
        assert "checksum" in str(e)

    ann = os.path.join(tmp, "a.jsonl")
    with open(ann, "w") as f:
        f.write('{"query_id":"q","video_id":"v","fps":1.0,"n_frames":4,"segments":[[1,2]]}\n')
    recs = kf.load_annotations(ann)
    assert recs[0]["segments"] == [(1.0, 2.0)]

    assert kf.gradcheck(seed=4) < 1e-4


if __name__ == "__main__":
    main()
