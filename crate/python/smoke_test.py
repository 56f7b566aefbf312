"""Smoke test for the dmv_py extension.

Build and run from the repository root:

    cargo build --release -p dmv-py --features extension-module
    cp target/release/libdmv_py.so python/dmv_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dmv_py  # noqa: E402

TINY = """
[model.backbone]
input_size = 32
widths = [4, 6, 8]
strides = [2, 2, 2]
key_channels = 6

[model.anchors]
base_size = 8.0
stride = 8.0
grid = 4

[model.value]
channels = 6
hidden = 6

[model.retrieval]
k = 2
heads = 2
attn_width = 8
ffn_width = 8
mlp_width = 8

[model.head]
width = 6
"""


def main():
    row = dmv_py.similarity_row([1.0, 0.5], [[0.2, 0.1], [1.0, -1.0], [0.3, 0.3]])
    assert abs(sum(row) - 1.0) < 1e-12 and all(p > 0 for p in row)
    idx, scores = dmv_py.select_candidates([0.25, 0.25, 0.5], 2)
    assert idx == [2, 0] and scores == [0.5, 0.25], (idx, scores)

    seq = dmv_py.synthetic_sequence(7, length=12, width=64, height=64, target_size=(8.0, 12.0))
    assert len(seq["frames"]) == 12 and len(seq["frames"][0]) == 64 * 64 * 3

    model = dmv_py.Model(TINY, seed=3)
    assert model.mode == "voting" and model.input_size == 32
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.dmv")
        model.save(path)
        model = dmv_py.Model.load(path)

    tracker = dmv_py.Tracker(model)
    tracker.init(seq["frames"][0], seq["width"], seq["height"], seq["boxes"][0])
    preds = [seq["boxes"][0]]
    for f in seq["frames"][1:]:
        x, y, w, h, score = tracker.step(f, seq["width"], seq["height"])
        assert all(math.isfinite(v) for v in (x, y, w, h, score)) and w >= 1 and h >= 1
        preds.append((x, y, w, h))
    assert tracker.memory_frames()[0] == 0

    m = dmv_py.evaluate(preds, seq["boxes"])
    assert 0.0 <= m["success_auc"] <= 1.0
    perfect = dmv_py.evaluate(seq["boxes"], seq["boxes"])
    assert perfect["ao"] == 1.0 and perfect["precision_20"] == 1.0

    try:
        tracker.step(b"\x00" * 5, 64, 64)
    except dmv_py.Error:
        pass
    else:
        raise AssertionError("short frame accepted")

    assert dmv_py.run_cli(["--version"]) == 0
    print("dmv_py smoke test OK:", {k: round(v, 4) for k, v in m.items()})


if __name__ == "__main__":
    main()
