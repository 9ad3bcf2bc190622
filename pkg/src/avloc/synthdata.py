"""Deterministic synthetic audio-visual scenes.

Each scene has one sounding object whose colour and stripe texture are fixed
by its class, silent distractor objects of other classes, and a waveform made
of a class-specific harmonic stack plus noise.  Scene ``i`` depends only on
``(seed, i)``.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import make_spectrogram

FORMAT_NAME = "avloc-scenes"
FORMAT_VERSION = 1
SAMPLE_RATE = 8000
N_HARMONICS = 3


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_classes: int = 8
    image_size: int = 64
    spec_size: int = 64
    object_scale_range: tuple[float, float] = (0.3, 0.5)
    distractor_count: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        lo, hi = self.object_scale_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"object_scale_range must lie in (0, 1), got {self.object_scale_range}")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be >= 0")

    @property
    def window(self) -> int:
        return 2 * (self.spec_size - 1)

    @property
    def hop(self) -> int:
        return self.window // 2

    @property
    def n_samples(self) -> int:
        return self.window + self.hop * (self.spec_size - 1)


@dataclass
class LabeledScene:
    index: int
    class_id: int
    image: np.ndarray  # H x W x 3 in [0, 1]
    spectrogram: np.ndarray  # F x T x 1
    gt_mask: np.ndarray  # H x W bool
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    waveform: np.ndarray = field(repr=False)


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(class_id / num_classes, 0.85, 0.9))


def fundamental_bin(class_id: int, spec: SceneSpec) -> float:
    """Geometrically spaced fundamental, in FFT bins."""
    lo, hi = spec.spec_size / 16, spec.spec_size / 4
    return lo * (hi / lo) ** (class_id / (spec.num_classes - 1))


def _texture(class_id: int, num_classes: int, size: int) -> np.ndarray:
    theta = np.pi * class_id / num_classes
    yy, xx = np.mgrid[0:size, 0:size]
    phase = (xx * np.cos(theta) + yy * np.sin(theta)) * (2 * np.pi / 6.0)
    return 0.85 + 0.15 * np.sin(phase)


def _footprint(kind: str, size: int) -> np.ndarray:
    if kind == "rect":
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2


def _draw(image: np.ndarray, class_id: int, spec: SceneSpec, kind: str, size: int, y: int, x: int) -> np.ndarray:
    shape = _footprint(kind, size)
    patch = class_color(class_id, spec.num_classes)[None, None, :] * _texture(class_id, spec.num_classes, size)[..., None]
    region = image[y:y + size, x:x + size]
    region[shape] = patch[shape]
    mask = np.zeros(image.shape[:2], dtype=bool)
    mask[y:y + size, x:x + size] = shape
    return mask


def _overlaps(a, b) -> bool:
    ay, ax, asz = a
    by, bx, bsz = b
    return not (ay + asz <= by or by + bsz <= ay or ax + asz <= bx or bx + bsz <= ax)


def synth_waveform(class_id: int, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.n_samples) / SAMPLE_RATE
    f0 = fundamental_bin(class_id, spec) * SAMPLE_RATE / spec.window
    gain = rng.uniform(0.5, 1.0)
    wave = np.zeros_like(t)
    for h in range(1, N_HARMONICS + 1):
        wave += (gain / h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    return 0.5 * wave + rng.normal(0.0, 0.02, size=t.size)


def generate_scene(spec: SceneSpec, index: int) -> LabeledScene:
    if index < 0:
        raise ValueError("index must be >= 0")
    n = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    class_id = int(rng.integers(spec.num_classes))

    base = rng.uniform(0.25, 0.55)
    image = np.clip(base + rng.normal(0.0, 0.04, size=(n, n, 1)) + rng.normal(0.0, 0.02, size=(n, n, 3)), 0.0, 1.0)

    def pick_size():
        size = int(round(rng.uniform(*spec.object_scale_range) * n))
        if size > n:
            raise ValueError(f"object of {size}px does not fit a {n}px image")
        return max(size, 2)

    size = pick_size()
    y, x = (int(v) for v in rng.integers(0, n - size + 1, size=2))
    kind = "rect" if rng.random() < 0.5 else "circle"
    placed = (y, x, size)

    others = [c for c in range(spec.num_classes) if c != class_id]
    for _ in range(spec.distractor_count):
        d_class = int(others[rng.integers(len(others))])
        d_size = pick_size()
        d_kind = "rect" if rng.random() < 0.5 else "circle"
        for _attempt in range(50):
            dy, dx = (int(v) for v in rng.integers(0, n - d_size + 1, size=2))
            if not _overlaps(placed, (dy, dx, d_size)):
                break
        _draw(image, d_class, spec, d_kind, d_size, dy, dx)

    # the sounding object is drawn last so its mask is never occluded
    mask = _draw(image, class_id, spec, kind, size, y, x)
    ys, xs = np.nonzero(mask)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    wave = synth_waveform(class_id, spec, rng)
    spectrogram = make_spectrogram(wave, SAMPLE_RATE, spec.window, spec.hop)[0]
    return LabeledScene(index, class_id, image, spectrogram, mask, bbox, wave)


@dataclass
class SceneSet:
    """Stacked scenes ready for batching."""

    indices: np.ndarray
    class_ids: np.ndarray
    images: np.ndarray
    spectrograms: np.ndarray
    masks: np.ndarray
    bboxes: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, idx) -> "SceneSet":
        return SceneSet(*(getattr(self, f)[idx] for f in
                          ("indices", "class_ids", "images", "spectrograms", "masks", "bboxes")))


def stack_scenes(scenes) -> SceneSet:
    scenes = list(scenes)
    return SceneSet(
        indices=np.array([s.index for s in scenes], dtype=np.int64),
        class_ids=np.array([s.class_id for s in scenes], dtype=np.int64),
        images=np.stack([s.image for s in scenes]),
        spectrograms=np.stack([s.spectrogram for s in scenes]),
        masks=np.stack([s.gt_mask for s in scenes]),
        bboxes=np.array([s.bbox for s in scenes], dtype=np.int64),
    )


def generate_split(spec: SceneSpec, n_train: int, n_test: int) -> tuple[list[LabeledScene], list[LabeledScene]]:
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    train = [generate_scene(spec, i) for i in range(n_train)]
    test = [generate_scene(spec, i) for i in range(n_train, n_train + n_test)]
    return train, test


def write_split(scenes, spec: SceneSpec, out_dir, split: str) -> Path:
    """Dump scenes as per-sample ``.npy`` tensors plus ``manifest.json`` and ``annotations.jsonl``."""
    out = Path(out_dir) / split
    out.mkdir(parents=True, exist_ok=True)
    samples, annotations = [], []
    histogram = [0] * spec.num_classes
    for s in scenes:
        stem = f"{s.index:06d}"
        files = {}
        for key, arr in (("image", s.image), ("spectrogram", s.spectrogram), ("mask", s.gt_mask)):
            files[key] = f"{stem}.{key}.npy"
            np.save(out / files[key], arr)
        histogram[s.class_id] += 1
        samples.append({"index": s.index, "class_id": s.class_id, "bbox": list(s.bbox), **files})
        annotations.append(json.dumps({
            "image": stem, "height": spec.image_size, "width": spec.image_size,
            "boxes": [{"annotator": 0, "box": list(s.bbox)}],
        }))
    scene_spec = asdict(spec)
    scene_spec["object_scale_range"] = list(spec.object_scale_range)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "split": split,
        "scene_spec": scene_spec,
        "class_histogram": histogram,
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "annotations.jsonl").write_text("\n".join(annotations) + "\n")
    return out


def read_manifest(split_dir) -> dict:
    manifest = json.loads((Path(split_dir) / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{split_dir}: not an {FORMAT_NAME} directory")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{split_dir}: unsupported format version {manifest.get('version')}")
    return manifest


def read_split(split_dir) -> SceneSet:
    split_dir = Path(split_dir)
    samples = read_manifest(split_dir)["samples"]
    if not samples:
        raise ValueError(f"{split_dir}: empty split")
    return SceneSet(
        indices=np.array([s["index"] for s in samples], dtype=np.int64),
        class_ids=np.array([s["class_id"] for s in samples], dtype=np.int64),
        images=np.stack([np.load(split_dir / s["image"]) for s in samples]),
        spectrograms=np.stack([np.load(split_dir / s["spectrogram"]) for s in samples]),
        masks=np.stack([np.load(split_dir / s["mask"]) for s in samples]),
        bboxes=np.array([s["bbox"] for s in samples], dtype=np.int64),
    )
