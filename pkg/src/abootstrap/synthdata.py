"""Glyph-grid scenes with analytically known annotation distributions.

A scene is a G x G grid of cells; each cell is empty or holds one of V glyphs.
Annotation ``l < V`` is glyph ``l``; annotation ``V`` is background. The true
annotation distribution of a window is the area share of each annotation inside
it.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import blobio, kernels

MANIFEST_VERSION = 1
BACKGROUND_RGB = (0.5, 0.5, 0.5)
EMPTY = -1


@dataclass(frozen=True)
class SceneConfig:
    grid: int = 4
    vocab: int = 8
    density: float = 0.6
    cell_px: int = 8

    def validate(self):
        if self.grid < 2:
            raise ValueError(f"grid must be >= 2, got {self.grid}")
        if self.vocab < 1 or self.vocab > 254:
            raise ValueError(f"vocab must be in [1, 254], got {self.vocab}")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density must be in [0, 1], got {self.density}")
        if self.cell_px < 2:
            raise ValueError(f"cell_px must be >= 2, got {self.cell_px}")


@dataclass(eq=False)
class Scene:
    glyphs: np.ndarray          # (G, G) int, EMPTY for background
    vocab: int
    cell_px: int = 8
    seed: int = 0
    scene_id: int = 0
    _canvas: np.ndarray = field(default=None, repr=False)

    @property
    def grid(self):
        return self.glyphs.shape[0]

    @property
    def resolution(self):
        return self.grid * self.cell_px

    @property
    def n_annotations(self):
        return self.vocab + 1

    @property
    def canvas(self):
        if self._canvas is None:
            self._canvas = paint_canvas(self.glyphs, self.cell_px)
        return self._canvas

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.vocab == other.vocab
                and self.cell_px == other.cell_px and self.seed == other.seed
                and self.scene_id == other.scene_id
                and np.array_equal(self.glyphs, other.glyphs))


@dataclass
class View:
    pixels: np.ndarray      # (R, R, 3) float32 in [0, 1]
    bbox: tuple
    scene_id: int


def glyph_pattern(glyph, size):
    """Fixed (size, size, 3) pattern for a glyph id; identical across runs."""
    rng = np.random.default_rng(10_007 + 7919 * int(glyph))
    bits = rng.random((size, size)) < 0.5
    # guarantee the pattern is not flat
    bits[0, 0], bits[-1, -1] = True, False
    fg = rng.uniform(0.05, 1.0, size=3)
    bg = rng.uniform(0.0, 0.95, size=3)
    return np.where(bits[..., None], fg, bg).astype(np.float32)


def paint_canvas(glyphs, cell_px):
    g = glyphs.shape[0]
    canvas = np.empty((g * cell_px, g * cell_px, 3), np.float32)
    canvas[:] = BACKGROUND_RGB
    for i in range(g):
        for j in range(g):
            if glyphs[i, j] != EMPTY:
                canvas[i * cell_px:(i + 1) * cell_px, j * cell_px:(j + 1) * cell_px] = \
                    glyph_pattern(glyphs[i, j], cell_px)
    return canvas


def generate_scene(seed, config=SceneConfig(), scene_id=0, max_tries=10):
    config.validate()
    rng = np.random.default_rng(seed)
    shape = (config.grid, config.grid)
    for _ in range(max_tries):
        filled = rng.random(shape) < config.density
        ids = rng.integers(0, config.vocab, size=shape)
        if filled.any():
            glyphs = np.where(filled, ids, EMPTY).astype(np.int64)
            return Scene(glyphs, config.vocab, config.cell_px, int(seed), int(scene_id))
    raise ValueError(f"no non-empty scene after {max_tries} draws at density {config.density}")


def generate_scenes(seed, count, config=SceneConfig()):
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_scene(int(s), config, scene_id=i) for i, s in enumerate(seeds)]


def render_views(scene, boxes, size):
    """Bilinear renders of ``boxes`` (n, 4) -> (n, size, size, 3) float32."""
    return kernels.resample(scene.canvas, boxes, size)


def render_view(scene, bbox, size):
    pix = render_views(scene, np.asarray(bbox, np.float64)[None], size)[0]
    return View(pix, tuple(map(float, bbox)), scene.scene_id)


def _axis_overlap(lo, hi, grid):
    edges = np.arange(grid + 1) / grid
    return np.clip(np.minimum(hi[:, None], edges[None, 1:]) - np.maximum(lo[:, None], edges[None, :-1]),
                   0.0, None)


def annotation_dists(scene, boxes):
    """Area-weighted annotation distribution for each box, shape (n, V + 1)."""
    b = np.asarray(boxes, np.float64).reshape(-1, 4)
    g = scene.grid
    oy = _axis_overlap(b[:, 0], b[:, 2], g)
    ox = _axis_overlap(b[:, 1], b[:, 3], g)
    area = oy[:, :, None] * ox[:, None, :]                         # (n, G, G)
    labels = np.where(scene.glyphs == EMPTY, scene.vocab, scene.glyphs).reshape(-1)
    onehot = np.zeros((g * g, scene.vocab + 1))
    onehot[np.arange(g * g), labels] = 1.0
    weights = area.reshape(len(b), -1) @ onehot
    total = weights.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("box does not overlap the canvas")
    return weights / total


def true_annotation_dist(scene, bbox):
    return annotation_dists(scene, np.asarray(bbox, np.float64)[None])[0]


# --------------------------------------------------------------- on-disk IO

@dataclass
class Dataset:
    scenes: list
    grid: int
    vocab: int
    resolution: int
    cell_px: int = 8

    def __len__(self):
        return len(self.scenes)


def write_dataset(path, scenes, resolution, blob_name="scenes.bin"):
    if not scenes:
        raise ValueError("no scenes to write")
    os.makedirs(path, exist_ok=True)
    grid, vocab, cell_px = scenes[0].grid, scenes[0].vocab, scenes[0].cell_px
    entries = []
    chunks = []
    offset = 0
    for sc in scenes:
        if sc.grid != grid or sc.vocab != vocab or sc.cell_px != cell_px:
            raise ValueError("scenes in one dataset must share grid, vocab and cell_px")
        blob = blobio.encode((sc.glyphs + 1).astype(np.uint8))
        entries.append({"scene_id": sc.scene_id, "seed": sc.seed, "blob": blob_name, "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    with open(os.path.join(path, blob_name), "wb") as fh:
        fh.write(b"".join(chunks))
    manifest = {"version": MANIFEST_VERSION, "G": grid, "V": vocab, "R": int(resolution),
                "cell_px": cell_px, "scenes": entries}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise blobio.MalformedManifest(f"{mpath}: {exc}") from exc
    try:
        grid, vocab, res = int(manifest["G"]), int(manifest["V"]), int(manifest["R"])
        cell_px = int(manifest.get("cell_px", 8))
        entries = manifest["scenes"]
        if manifest["version"] != MANIFEST_VERSION:
            raise blobio.MalformedManifest(f"unsupported manifest version {manifest['version']}")
    except (KeyError, TypeError, ValueError) as exc:
        raise blobio.MalformedManifest(f"{mpath}: missing or invalid field {exc}") from exc
    cache = {}
    scenes = []
    for e in entries:
        try:
            name, off = e["blob"], int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise blobio.MalformedManifest(f"bad scene entry {e!r}") from exc
        if name not in cache:
            bpath = os.path.join(path, name)
            if not os.path.exists(bpath):
                raise blobio.MissingBlob(f"missing blob file {bpath}")
            with open(bpath, "rb") as fh:
                cache[name] = fh.read()
        arr, _ = blobio.decode(cache[name], off)
        if arr.shape != (grid, grid):
            raise blobio.ShapeMismatch(f"scene {e.get('scene_id')}: grid {arr.shape} != {(grid, grid)}")
        scenes.append(Scene(arr.astype(np.int64) - 1, vocab, cell_px, int(e["seed"]), int(e["scene_id"])))
    return Dataset(scenes, grid, vocab, res, cell_px)
