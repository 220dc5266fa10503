import numpy as np
import pytest

from drmm import data
from drmm.geometry import iou
from drmm.data import DataError, GenConfig


def test_same_seed_bit_identical():
    a, b = data.generate(3, 20), data.generate(3, 20)
    for x, y in zip(a, b):
        assert np.array_equal(x.raster, y.raster)
        assert x.gts == y.gts


def test_different_seed_differs():
    assert not np.array_equal(data.generate(1, 1)[0].raster, data.generate(2, 1)[0].raster)


def test_zero_objects_gives_background_only():
    cfg = GenConfig(max_objects=0, min_objects=0)
    for s in data.generate(0, 5, cfg):
        assert s.gts == []
        assert abs(s.raster.mean() - data.BACKGROUND) < 0.01


def test_class_histogram_near_uniform():
    scenes = data.generate(0, 200, GenConfig(max_objects=6, num_classes=4))
    counts = np.bincount([g.class_index for s in scenes for g in s.gts], minlength=4)
    expected = counts.sum() / 4
    assert np.all(np.abs(counts - expected) <= 0.2 * expected)


def test_scene_invariants():
    cfg = GenConfig(max_objects=5)
    for s in data.generate(9, 50, cfg):
        assert 0 <= len(s.gts) <= cfg.max_objects
        assert s.raster.shape == (32, 32, 3)
        assert s.raster.min() >= 0.0 and s.raster.max() <= 1.0
        for i, g in enumerate(s.gts):
            assert 0 <= g.box.l <= g.box.r <= 1 and 0 <= g.box.t <= g.box.b <= 1
            assert g.box.width >= cfg.min_size - 1e-12 and g.box.height >= cfg.min_size - 1e-12
            for h in s.gts[i + 1:]:
                assert iou(g.box, h.box) == 0.0


def test_rendering_consistency():
    colors = np.stack([data.class_color(c) for c in range(4)])
    for s in data.generate(5, 40):
        h, w, _ = s.raster.shape
        for g in s.gts:
            # interior pixels only, so anti-aliased borders do not count
            r0, r1 = int(np.ceil(g.box.t * h)), int(np.floor(g.box.b * h))
            c0, c1 = int(np.ceil(g.box.l * w)), int(np.floor(g.box.r * w))
            mean = s.raster[r0:r1, c0:c1].reshape(-1, 3).mean(axis=0)
            assert int(np.argmin(np.linalg.norm(colors - mean, axis=1))) == g.class_index


def test_infeasible_config_errors():
    with pytest.raises(DataError):
        data.generate(0, 1, GenConfig(height=4))
    with pytest.raises(DataError):
        data.generate(0, 1, GenConfig(min_size=0.9, max_size=0.95, max_objects=4, min_objects=4))


def test_round_trip(tmp_path):
    scenes = data.generate(1, 6)
    p = tmp_path / "d.jsonl"
    data.save(scenes, p)
    back = data.load(p)
    assert len(back) == 6
    for a, b in zip(scenes, back):
        assert np.array_equal(a.raster, b.raster) and a.gts == b.gts and a.id == b.id
    data.save([], tmp_path / "e.jsonl")
    assert data.load(tmp_path / "e.jsonl") == []


def test_truncated_file_errors(tmp_path):
    p = tmp_path / "d.jsonl"
    data.save(data.generate(1, 3), p)
    text = p.read_text()
    p.write_text(text[: len(text) - 50])
    with pytest.raises(DataError, match=":3:"):
        data.load(p)


def test_bad_schema_reports_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"schema": "other/1"}\n')
    with pytest.raises(DataError, match=":1:"):
        data.load(p)


def test_ground_truth_one_hot():
    with pytest.raises(DataError):
        data.GroundTruth(data.generate(0, 1)[0].gts[0].box, (1.0, 1.0))
