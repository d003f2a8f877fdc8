"""Smoke test for the `clue` Python extension.

Build and install the module first, for example:

    cd crates/py && maturin develop --release

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import clue


def check_loc_codec():
    box = [0.1, 0.2, 0.55, 0.9]
    tokens = clue.encode_box(box)
    assert tokens == "<loc0102><loc0204><loc0563><loc0921>", tokens
    decoded = clue.decode_box("assistant: " + tokens)
    assert all(abs(a - b) < 1 / 1024 for a, b in zip(box, decoded))
    assert clue.decode_box("<loc1024><loc0000><loc0001><loc0002>") is None
    assert clue.iou(box, box) == 1.0


def check_decoder_to_map():
    dec = clue.ToyDecoder(seed=3)
    attn = dec.attention("<image>clarify Get the apple")
    heads, queries, keys = attn["shape"]
    assert len(attn["values"]) == heads * queries * keys
    assert clue.validate_tensor(attn["values"], attn["shape"], attn["image_tokens"]) == []
    m = clue.extract_map(attn["values"], attn["shape"], attn["image_tokens"], attn["roles"])
    assert m.grid_side == 8
    assert min(m.values) == 0.0 and max(m.values) == 1.0
    direct = dec.ambiguity_map("<image>clarify Get the apple")
    assert direct.values == m.values

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "a.cat1")
        clue.write_cat1(path, attn["values"], attn["shape"], attn["image_tokens"], attn["roles"], layer=attn["layer"])
        back = clue.read_cat1(path)
        assert back["shape"] == attn["shape"] and back["roles"] == attn["roles"]


def check_probe():
    data = clue.gen_map_dataset(200, grid_side=16, seed=1)
    maps = [m for m, _ in data]
    labels = [y for _, y in data]
    assert sum(labels) == 100
    probe = clue.Probe.train(maps, labels, epochs=3, lr=1e-3, seed=7)
    assert len(probe.loss_history) == 3
    p, ambiguous = probe.predict(maps[0])
    assert 0.0 < p < 1.0 and isinstance(ambiguous, bool)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "probe.bin")
        probe.save(path)
        reloaded = clue.Probe.load(path)
        assert abs(reloaded.probability(maps[0]) - p) < 1e-5
    two_blobs = maps[1].peaks(min_separation=2, min_height=0.1)
    assert len(two_blobs) >= 1


def check_dialog():
    prefix = clue.build_prefix("Pick up the apple", [("Which apple?", "The red one")])
    assert prefix == "<image>clarify Pick up the apple assistant: Which apple? user: The red one"
    pairs = clue.linearize_dialog("Get the cup", [("Which cup?", "Left")], [0.0, 0.0, 0.5, 0.5])
    assert len(pairs) == 2 and pairs[-1][2]
    kind, value = clue.classify_output("assistant: which one?")
    assert (kind, value) == ("question", "which one?")
    kind, value = clue.classify_output("<loc0010><loc0020><loc0500><loc0600>")
    assert kind == "grounding" and list(value) == [10, 20, 500, 600]
    v = 11
    loss = clue.masked_ce([0.0] * (4 * v), v, [1, 2], 2)
    assert abs(loss - math.log(v)) < 1e-12


def check_metrics():
    r = clue.classification_metrics(846, 153, 847, 154)
    assert abs(r["f1"] - 0.846) < 1e-3
    assert clue.classification_metrics(0, 0, 3, 1)["zero_division"]


if __name__ == "__main__":
    for check in (check_loc_codec, check_decoder_to_map, check_probe, check_dialog, check_metrics):
        check()
        print(f"ok  {check.__name__}")
    print(f"clue {clue.__version__}: all smoke checks passed")
