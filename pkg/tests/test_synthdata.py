import json

import numpy as np
import pytest

from abootstrap import blobio, synthdata as sd
from abootstrap.synthdata import Scene, SceneConfig


def _scene(glyphs, vocab=4, cell_px=8):
    return Scene(np.asarray(glyphs, np.int64), vocab, cell_px)


def test_full_density_single_glyph():
    sc = sd.generate_scene(3, SceneConfig(grid=3, vocab=1, density=1.0))
    assert np.all(sc.glyphs == 0)


def test_generate_replay():
    cfg = SceneConfig(grid=5, vocab=6, density=0.4)
    assert sd.generate_scene(42, cfg) == sd.generate_scene(42, cfg)


def test_zero_density_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        sd.generate_scene(0, SceneConfig(density=0.0))
    with pytest.raises(ValueError):
        SceneConfig(grid=1).validate()


def test_render_full_canvas_and_single_cell():
    sc = _scene([[3, -1], [-1, 1]], cell_px=8)
    full = sd.render_view(sc, (0, 0, 1, 1), 16)
    np.testing.assert_allclose(full.pixels, sc.canvas, atol=1e-6)
    cell = sd.render_view(sc, (0, 0, 0.5, 0.5), 8)
    np.testing.assert_allclose(cell.pixels, sd.glyph_pattern(3, 8), atol=1e-6)
    up = sd.render_view(sc, (0, 0, 0.5, 0.5), 32).pixels
    # nearest pixel centres of an upscaled pattern still come from the glyph colours
    colours = {tuple(c) for c in sd.glyph_pattern(3, 8).reshape(-1, 3).round(5)}
    assert tuple(up[0, 0].round(5)) in colours


def test_render_is_bit_identical():
    sc = sd.generate_scene(5, SceneConfig())
    a = sd.render_views(sc, [[0.1, 0.2, 0.5, 0.7], [0.0, 0.0, 0.3, 0.3]], 32)
    b = sd.render_views(sc, [[0.1, 0.2, 0.5, 0.7], [0.0, 0.0, 0.3, 0.3]], 32)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1 and a.dtype == np.float32


def test_true_annotation_dist_examples():
    sc = _scene([[0, 1], [0, 1]], vocab=2)
    np.testing.assert_allclose(sd.true_annotation_dist(sc, (0, 0, 0.5, 0.5)), [1, 0, 0])
    np.testing.assert_allclose(sd.true_annotation_dist(sc, (0, 0, 1, 1)), [0.5, 0.5, 0])
    sc2 = _scene([[0, -1], [-1, -1]], vocab=2)
    np.testing.assert_allclose(sd.true_annotation_dist(sc2, (0, 0.125, 0.5, 0.625)), [0.75, 0, 0.25])


def test_annotation_dist_normalised():
    rng = np.random.default_rng(0)
    sc = sd.generate_scene(9, SceneConfig(grid=6, vocab=5))
    from abootstrap.geometry import sample_crops
    d = sd.annotation_dists(sc, sample_crops(rng, 500, (0.01, 1.0)))
    assert np.all(d >= 0) and np.max(np.abs(d.sum(1) - 1)) <= 1e-12


def test_shrinking_into_cell_concentrates():
    sc = _scene([[2, 0], [1, -1]], vocab=3)
    for eps in (0.2, 0.05, 0.001):
        d = sd.true_annotation_dist(sc, (0.25 - eps, 0.25 - eps, 0.25 + eps, 0.25 + eps))
        assert d[2] == pytest.approx(1.0)


def test_dataset_round_trip(tmp_path):
    scenes = sd.generate_scenes(1, 10, SceneConfig(grid=4, vocab=7))
    sd.write_dataset(tmp_path, scenes, resolution=32)
    ds = sd.read_dataset(tmp_path)
    assert ds.scenes == scenes and ds.grid == 4 and ds.vocab == 7 and ds.resolution == 32


def test_dataset_blob_layout_is_bit_exact(tmp_path):
    sc = _scene([[0, -1], [2, 1]], vocab=3)
    sd.write_dataset(tmp_path, [sc], resolution=16)
    raw = (tmp_path / "scenes.bin").read_bytes()
    assert raw == b"ABT1" + bytes([0, 2]) + (2).to_bytes(4, "little") * 2 + bytes([1, 0, 3, 2])


def test_dataset_errors(tmp_path):
    scenes = sd.generate_scenes(1, 3)
    sd.write_dataset(tmp_path, scenes, resolution=32)
    blob = tmp_path / "scenes.bin"
    good = blob.read_bytes()

    blob.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(blobio.BadHeader, match="bad header"):
        sd.read_dataset(tmp_path)

    blob.write_bytes(good[:-3])
    with pytest.raises(blobio.TruncatedBlob):
        sd.read_dataset(tmp_path)

    blob.write_bytes(good)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["G"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(blobio.ShapeMismatch):
        sd.read_dataset(tmp_path)

    manifest["G"] = 4
    manifest["scenes"][0]["blob"] = "gone.bin"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(blobio.MissingBlob, match="missing blob"):
        sd.read_dataset(tmp_path)

    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(blobio.MalformedManifest):
        sd.read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 1}))
    with pytest.raises(blobio.MalformedManifest):
        sd.read_dataset(tmp_path)
