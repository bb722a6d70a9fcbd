"""Smoke test of the pyreftrack extension module.

Build and install first, e.g.
    maturin develop -m crates/python/Cargo.toml --release
then run
    python python/smoke_test.py
"""

import math
import tempfile

import pyreftrack as rt

BENCH = """
train_videos = 1
test_videos = 1
train_frames = 12
test_frames = 10

[world]
image_size = [160, 120]
entity_count_range = [6, 8]
color_palette = ["black", "white"]
speed_range = [0.6, 0.9]
intersection_half_size = 8.0

[world.category_weights]
car = 1.0

[world.camera]
scale = 4.0
center = [0.0, 0.0]

[prompts]
support_threshold = 1
max_prompts = 3

[prompts.values]
category = []
orientation = []
"""

TRACKER = """
d_model = 8
n_det = 4
heads = 2
encoder_layers = 1
decoder_layers = 1
ffn_dim = 16
grid = [4, 3]
num_colors = 2
frozen_dim = 40
oov_buckets = 4
"""


def main():
    assert abs(rt.iou((0, 0, 10, 10), (5, 0, 10, 10)) - 1 / 3) < 1e-12
    assert rt.giou((0, 0, 1, 1), (2, 0, 1, 1)) < 0
    assert rt.linear_assignment([[4.0, 1.0], [2.0, 0.0]]) == [1, 0]
    assert rt.canonical_prompt("the black cars which are parked") == "the black cars which are parked"

    train, test = rt.generate(BENCH, 7)
    again, _ = rt.generate(BENCH, 7)
    assert train.stats_table() == again.stats_table()
    video = test.video_names()[0]
    pid, text = test.prompts(video)[0]

    gt = test.referred(video, pid)
    perfect = rt.hota(gt, gt)
    assert all(abs(v - 1.0) < 1e-12 for v in perfect.values()), perfect

    tracker = rt.Tracker(TRACKER)
    losses = tracker.train(train, "steps = 3\nclip_len = 2\nlog_every = 0", seed=1)
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)

    frames = tracker.track(test, video, text)
    assert len(frames) == test.num_frames(video)
    for f in frames:
        for _id, _box, _cls, refer_prob, score in f:
            assert 0.0 <= refer_prob <= 1.0 and -1.0 <= score <= 1.0

    with tempfile.TemporaryDirectory() as d:
        tracker.save(f"{d}/model.ckpt")
        back = rt.Tracker.load(f"{d}/model.ckpt")
        assert back.track(test, video, text) == frames
        n = back.predict(test, f"{d}/pred")
        assert n == test.prompt_count()
        metrics = rt.evaluate(test, f"{d}/pred")
        assert 0.0 <= metrics["HOTA"] <= 1.0

    checks = rt.gradcheck(points=2)
    assert all(err < tol for _, err, tol in checks), checks

    try:
        rt.Tracker("heads = 3")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")
    print("pyreftrack smoke test passed")


if __name__ == "__main__":
    main()
