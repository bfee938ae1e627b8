import json
import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgan_ssd.data import (
    AnnotatedObject,
    Annotation,
    DegradationParams,
    area_downscale,
    batch_indices,
    batch_iterator,
    class_vocabulary,
    degrade,
    extract_frames,
    from_uint8,
    iter_frames,
    load_annotations,
    load_image,
    save_annotations,
    save_image,
    to_batch,
    from_batch,
    to_uint8,
)
from dcgan_ssd.errors import DataValidationError, ShapeError


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestAnnotations:
    def test_two_objects_keep_order(self, tmp_path):
        rec = {"image": "a.png", "width": 10, "height": 8,
               "objects": [{"class": "cat", "bbox": [0, 0, 4, 4]}, {"class": "dog", "bbox": [5, 1, 10, 8]}]}
        anns = load_annotations(_write_lines(tmp_path / "a.jsonl", [json.dumps(rec)]))
        assert len(anns) == 1
        assert [o.label for o in anns[0].objects] == ["cat", "dog"]
        assert anns[0].objects[1].bbox == (5, 1, 10, 8)
        assert anns[0].image_size == (10, 8)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_annotations(tmp_path / "e.jsonl") == []

    def test_degenerate_box_names_image(self, tmp_path):
        rec = {"image": "bad.png", "width": 10, "height": 10, "objects": [{"class": "x", "bbox": [3, 0, 3, 5]}]}
        with pytest.raises(DataValidationError, match="bad.png"):
            load_annotations(_write_lines(tmp_path / "a.jsonl", [json.dumps(rec)]))

    def test_malformed_line_names_line_number(self, tmp_path):
        good = json.dumps({"image": "a.png", "width": 4, "height": 4, "objects": []})
        with pytest.raises(DataValidationError, match="line 2"):
            load_annotations(_write_lines(tmp_path / "a.jsonl", [good, "{not json"]))

    def test_unknown_class_rejected_with_vocabulary(self, tmp_path):
        rec = {"image": "a.png", "width": 4, "height": 4, "objects": [{"class": "zebra", "bbox": [0, 0, 2, 2]}]}
        with pytest.raises(DataValidationError, match="zebra"):
            load_annotations(_write_lines(tmp_path / "a.jsonl", [json.dumps(rec)]), vocabulary=["cat"])

    def test_normalized_boxes(self):
        ann = Annotation("a", (20, 10), (AnnotatedObject("c", (2, 1, 12, 6)),))
        np.testing.assert_allclose(ann.normalized_boxes(), [[0.1, 0.1, 0.6, 0.6]])

    def test_vocabulary_sorted(self):
        anns = [Annotation("a", (4, 4), (AnnotatedObject("z", (0, 0, 1, 1)), AnnotatedObject("b", (0, 0, 1, 1))))]
        assert class_vocabulary(anns) == ["b", "z"]


@st.composite
def annotations(draw):
    out = []
    for i in range(draw(st.integers(0, 4))):
        w, h = draw(st.integers(2, 64)), draw(st.integers(2, 64))
        objs = []
        for _ in range(draw(st.integers(0, 3))):
            x0 = draw(st.integers(0, w - 1))
            y0 = draw(st.integers(0, h - 1))
            objs.append(AnnotatedObject(draw(st.sampled_from(["a", "b", "c"])),
                                        (x0, y0, draw(st.integers(x0 + 1, w)), draw(st.integers(y0 + 1, h)))))
        out.append(Annotation(f"img_{i}.png", (w, h), tuple(objs)))
    return out


@settings(max_examples=50, deadline=None)
@given(annotations())
def test_annotation_round_trip(tmp_path_factory, anns):
    path = tmp_path_factory.mktemp("ann") / "a.jsonl"
    save_annotations(anns, path)
    assert load_annotations(path) == anns


class TestImages:
    def test_uint8_round_trip(self, rng):
        pixels = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        assert np.array_equal(to_uint8(from_uint8(pixels)), pixels)

    def test_png_round_trip(self, tmp_path, rng):
        img = from_uint8(rng.integers(0, 256, size=(6, 9, 3), dtype=np.uint8))
        save_image(img, tmp_path / "x.png")
        assert np.array_equal(load_image(tmp_path / "x.png"), img)

    def test_batch_layout(self, rng):
        imgs = [rng.uniform(-1, 1, (4, 6, 3)).astype(np.float32) for _ in range(2)]
        batch = to_batch(imgs)
        assert tuple(batch.shape) == (2, 3, 4, 6)
        assert all(np.array_equal(a, b) for a, b in zip(from_batch(batch), imgs))


class TestDegrade:
    def test_identity_params(self, rng):
        img = rng.uniform(-1, 1, (8, 8, 3)).astype(np.float32)
        assert np.array_equal(degrade(img, DegradationParams(1, 1.0, 0, 5)), img)

    def test_downscale_dimensions(self):
        img = np.zeros((32, 32, 3), np.float32)
        assert degrade(img, DegradationParams(2)).shape == (16, 16, 3)

    def test_non_integer_factor_floors(self):
        assert degrade(np.zeros((10, 7, 1), np.float32), DegradationParams(1.5)).shape == (6, 4, 1)

    def test_half_brightness_of_mid_grey(self):
        # 0.0 is 0.5 in linear light; halving gives 0.25, i.e. -0.5 back in [-1, 1]
        out = degrade(np.zeros((2, 2, 3), np.float32), DegradationParams(1, 0.5, 0, 0))
        np.testing.assert_allclose(out, -0.5, atol=1e-7)

    def test_area_average_oracle(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1) / 16 - 0.5
        expected = np.array([[img[0:2, 0:2].mean(), img[0:2, 2:4].mean()],
                             [img[2:4, 0:2].mean(), img[2:4, 2:4].mean()]])
        np.testing.assert_allclose(area_downscale(img, 2)[..., 0], expected, atol=1e-7)

    def test_zero_dimension_rejected(self):
        with pytest.raises(ShapeError):
            degrade(np.zeros((3, 3, 3), np.float32), DegradationParams(4))

    def test_deterministic(self, rng):
        img = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
        p = DegradationParams(2, 0.3, 0.1, 7)
        assert np.array_equal(degrade(img, p), degrade(img, p))
        assert not np.array_equal(degrade(img, p), degrade(img, DegradationParams(2, 0.3, 0.1, 8)))

    @pytest.mark.parametrize("kwargs", [{"downscale_factor": 0.5}, {"brightness_scale": 0.0},
                                        {"brightness_scale": 1.5}, {"gaussian_noise_sigma": -1}])
    def test_invalid_params(self, kwargs):
        with pytest.raises(DataValidationError):
            DegradationParams(**kwargs)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    h=st.integers(4, 24),
    w=st.integers(4, 24),
    factor=st.floats(1.0, 4.0),
    brightness=st.floats(0.01, 1.0),
    sigma=st.floats(0.0, 2.0),
)
def test_degrade_stays_in_range(seed, h, w, factor, brightness, sigma):
    img = np.random.default_rng(seed).uniform(-1, 1, (h, w, 3)).astype(np.float32)
    out = degrade(img, DegradationParams(factor, brightness, sigma, seed))
    assert out.shape == (math.floor(h / factor), math.floor(w / factor), 3)
    assert out.min() >= -1.0 and out.max() <= 1.0


@pytest.fixture
def clip_path(tmp_path):
    """A 10-frame lossless clip whose frame i is filled with grey level 20*i."""
    path = tmp_path / "clip.avi"
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"FFV1"), 10, (16, 8))
    if not writer.isOpened():
        pytest.skip("no lossless video encoder available")
    for i in range(10):
        writer.write(np.full((8, 16, 3), 20 * i, np.uint8))
    writer.release()
    return path


class TestFrames:
    def test_all_frames(self, clip_path):
        frames = extract_frames(clip_path, 1)
        assert len(frames) == 10
        assert frames[0].shape == (8, 16, 3)
        assert all(f.min() >= -1 and f.max() <= 1 for f in frames)

    def test_stride_three(self, clip_path):
        frames = extract_frames(clip_path, 3)
        levels = [int(round((f.mean() + 1) * 127.5)) for f in frames]
        assert levels == [0, 60, 120, 180]

    def test_stride_zero(self, clip_path):
        with pytest.raises(ValueError):
            iter_frames(clip_path, 0)

    def test_unreadable(self, tmp_path):
        (tmp_path / "junk.mp4").write_bytes(b"not a video")
        with pytest.raises(OSError):
            iter_frames(tmp_path / "junk.mp4")
        with pytest.raises(OSError):
            iter_frames(tmp_path / "missing.mp4")


class TestBatching:
    def test_paper_batch(self):
        batches = batch_iterator(list(range(72)), 72, seed=0)
        assert len(batches) == 1 and sorted(batches[0]) == list(range(72))

    def test_short_final_batch(self):
        assert [len(b) for b in batch_iterator(list(range(10)), 4)] == [4, 4, 2]

    def test_same_seed_same_order(self):
        assert batch_iterator(list(range(50)), 8, seed=3) == batch_iterator(list(range(50)), 8, seed=3)

    def test_epoch_changes_order(self):
        a = np.concatenate(batch_indices(50, 8, seed=3, epoch=0))
        b = np.concatenate(batch_indices(50, 8, seed=3, epoch=1))
        assert not np.array_equal(a, b)

    def test_unshuffled(self):
        assert batch_iterator(list("abcde"), 2, shuffle=False) == [["a", "b"], ["c", "d"], ["e"]]

    def test_empty(self):
        with pytest.raises(ValueError):
            batch_iterator([], 4)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 300), bs=st.integers(1, 80), seed=st.integers(0, 10**6), epoch=st.integers(0, 30))
def test_batches_cover_dataset_once(n, bs, seed, epoch):
    idx = np.concatenate(batch_indices(n, bs, seed, epoch))
    assert sorted(idx.tolist()) == list(range(n))
