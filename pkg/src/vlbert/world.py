"""Synthetic scenes of coloured shapes standing in for images and a detector.

A scene is a small RGB raster with 1-6 annotated objects. The "detector"
proposes jittered boxes around the objects, pools each box into a fixed
4x4x3 grid and maps the grid to an appearance vector through a trainable
affine layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import Tensor, ops, parameter

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
NUM_CATEGORIES = len(SHAPES) * len(COLORS)
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
POOL = 4
POOLED_DIM = POOL * POOL * 3
MAX_OBJECTS = 6


def category_of(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def category_name(category: int) -> tuple[str, str]:
    return SHAPES[category // len(COLORS)], COLORS[category % len(COLORS)]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: tuple[int, int, int, int]  # pixel x0, y0, x1, y1; x1/y1 exclusive

    @property
    def category(self) -> int:
        return category_of(self.shape, self.color)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    objects: tuple[SceneObject, ...] = ()
    seed: int = 0

    def validate(self, allow_empty: bool = True) -> None:
        if len(self.objects) > MAX_OBJECTS or (not allow_empty and not self.objects):
            raise ValueError(f"scene needs 1..{MAX_OBJECTS} objects, has {len(self.objects)}")
        for obj in self.objects:
            if obj.shape not in SHAPES or obj.color not in COLORS:
                raise ValueError(f"unknown object {obj.shape}/{obj.color}")
            x0, y0, x1, y1 = obj.box
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"box {obj.box} outside {self.width}x{self.height} grid")


@dataclass
class RoI:
    box: tuple[float, float, float, float]  # normalised (x_LT, y_LT, x_RB, y_RB)
    score: float = 1.0
    category: int = -1
    masked: bool = False
    full_image: bool = False
    object_index: int = -1

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise ValueError(f"RoI box {self.box} is not a normalised LT/RB box")


def full_image_roi() -> RoI:
    return RoI((0.0, 0.0, 1.0, 1.0), score=1.0, category=-1, full_image=True)


# --- rendering -------------------------------------------------------------


def _object_mask(obj: SceneObject, width: int, height: int) -> np.ndarray:
    x0, y0, x1, y1 = obj.box
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    inside = (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    if obj.shape == "square":
        return inside
    w, h = x1 - x0, y1 - y0
    if obj.shape == "circle":
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        return inside & (((px - cx) / (w / 2.0)) ** 2 + ((py - cy) / (h / 2.0)) ** 2 <= 1.0)
    # upward-pointing isosceles triangle
    cx = (x0 + x1) / 2.0
    return inside & (np.abs(px - cx) <= (py - y0) / h * (w / 2.0))


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterise a scene into an ``[H, W, 3]`` array; later objects paint over earlier ones."""
    spec.validate()
    image = np.zeros((spec.height, spec.width, 3))
    for obj in spec.objects:
        image[_object_mask(obj, spec.width, spec.height)] = RGB[obj.color]
    return image


def random_scene(
    rng: np.random.Generator,
    n_objects: int,
    width: int = 32,
    height: int = 32,
    size_range: tuple[int, int] = (7, 11),
    gap: int = 2,
    seed: int = 0,
    objects: Optional[Sequence[tuple[str, str]]] = None,
    max_tries: int = 500,
) -> SceneSpec:
    """Place ``n_objects`` non-overlapping shapes separated by ``gap`` pixels."""
    if objects is None:
        objects = [(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))]) for _ in range(n_objects)]
    placed: list[SceneObject] = []
    for shape, color in objects:
        for _ in range(max_tries):
            w = int(rng.integers(size_range[0], size_range[1] + 1))
            h = w if shape != "triangle" else int(rng.integers(size_range[0], size_range[1] + 1))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(_separated(box, other.box, gap) for other in placed):
                placed.append(SceneObject(shape, color, box))
                break
        else:
            raise RuntimeError(f"could not place {n_objects} objects on a {width}x{height} grid")
    spec = SceneSpec(width, height, tuple(placed), seed)
    spec.validate()
    return spec


def _separated(a, b, gap: int) -> bool:
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


# --- region proposals ------------------------------------------------------


def _normalise(box, width, height) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    return (x0 / width, y0 / height, x1 / width, y1 / height)


def _expand(box, rng, bound, width, height):
    x0, y0, x1, y1 = box
    d = rng.integers(0, bound + 1, size=4) if bound > 0 else np.zeros(4, dtype=int)
    return (max(0, x0 - int(d[0])), max(0, y0 - int(d[1])), min(width, x1 + int(d[2])), min(height, y1 + int(d[3])))


def ground_truth_rois(spec: SceneSpec, jitter: int = 0, seed: int = 0) -> list[RoI]:
    """One RoI per annotated object, optionally grown by up to ``jitter`` pixels per edge."""
    rng = np.random.default_rng(seed)
    return [
        RoI(_normalise(_expand(obj.box, rng, jitter, spec.width, spec.height), spec.width, spec.height),
            score=1.0, category=obj.category, object_index=k)
        for k, obj in enumerate(spec.objects)
    ]


def propose_rois(
    spec: SceneSpec,
    jitter_seed: int,
    max_rois: int = 100,
    min_rois: int = 10,
    score_threshold: float = 0.5,
    jitter: int = 2,
    duplicates: int = 2,
) -> list[RoI]:
    """Synthetic detections filtered by score, capped, with a guaranteed minimum.

    Every object yields one tight detection (score in [0.6, 1)) and
    ``duplicates`` looser ones (score in [0.2, 0.8)). Boxes only ever grow,
    so each proposal covers its whole source object. Detections scoring
    above ``score_threshold`` are kept, best first, up to ``max_rois``; if
    fewer than ``min_rois`` survive, the ``min_rois`` best are taken
    regardless of score.
    """
    if not max_rois >= min_rois >= 1:
        raise ValueError("need max_rois >= min_rois >= 1")
    rng = np.random.default_rng(jitter_seed)
    candidates: list[RoI] = []
    for k, obj in enumerate(spec.objects):
        box = _expand(obj.box, rng, jitter, spec.width, spec.height)
        candidates.append(RoI(_normalise(box, spec.width, spec.height), float(rng.uniform(0.6, 1.0)), obj.category,
                              object_index=k))
        for _ in range(duplicates):
            box = _expand(obj.box, rng, 2 * jitter, spec.width, spec.height)
            candidates.append(RoI(_normalise(box, spec.width, spec.height), float(rng.uniform(0.2, 0.8)),
                                  obj.category, object_index=k))
    return select_rois(candidates, max_rois, min_rois, score_threshold)


def select_rois(candidates: Sequence[RoI], max_rois: int = 100, min_rois: int = 10,
                score_threshold: float = 0.5) -> list[RoI]:
    ranked = sorted(candidates, key=lambda r: -r.score)  # stable for ties
    kept = [r for r in ranked if r.score > score_threshold][:max_rois]
    if len(kept) < min_rois:
        kept = ranked[:min_rois]
    return kept


# --- appearance features -----------------------------------------------------


def pixel_bounds(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer ``(c0, r0, c1, r1)`` covering a normalised box; never empty."""

    def axis(lo, hi, extent):
        a = int(np.clip(np.floor(lo * extent + 1e-9), 0, extent))
        b = int(np.clip(np.ceil(hi * extent - 1e-9), 0, extent))
        if b <= a:
            a = int(min(np.floor((lo + hi) / 2.0 * extent), extent - 1))
            b = a + 1
        return a, b

    c0, c1 = axis(box[0], box[2], width)
    r0, r1 = axis(box[1], box[3], height)
    return c0, r0, c1, r1


def _bin_edges(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    span = hi - lo
    starts = lo + (np.arange(POOL) * span) // POOL
    ends = np.maximum(lo + (np.arange(1, POOL + 1) * span) // POOL, starts + 1)
    return starts, ends


def pool_rois(image: np.ndarray, boxes: Sequence[Sequence[float]]) -> np.ndarray:
    """Average-pool each box into a 4x4x3 grid; returns ``[n, 48]``."""
    height, width, _ = image.shape
    table = np.zeros((height + 1, width + 1, 3))
    table[1:, 1:] = image.cumsum(0).cumsum(1)
    out = np.empty((len(boxes), POOL, POOL, 3))
    for n, box in enumerate(boxes):
        c0, r0, c1, r1 = pixel_bounds(box, width, height)
        rs, re = _bin_edges(r0, r1)
        cs, ce = _bin_edges(c0, c1)
        sums = (table[re][:, ce] - table[rs][:, ce] - table[re][:, cs] + table[rs][:, cs])
        area = ((re - rs)[:, None] * (ce - cs)[None, :])[..., None]
        out[n] = sums / area
    return out.reshape(len(boxes), POOLED_DIM)


@dataclass
class DetectorParams:
    """Trainable head of the stand-in detector: pooled grid -> appearance vector."""

    weight: Tensor  # [48, d_app]
    bias: Tensor  # [d_app]

    @classmethod
    def init(cls, d_app: int, rng: np.random.Generator, dtype=None, std: float = 0.02) -> "DetectorParams":
        return cls(parameter(rng.normal(0.0, std, size=(POOLED_DIM, d_app)), dtype=dtype),
                   parameter(np.zeros(d_app), dtype=dtype))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}

    def __call__(self, pooled) -> Tensor:
        pooled = pooled if isinstance(pooled, Tensor) else Tensor(np.asarray(pooled), dtype=self.weight.dtype)
        return ops.linear(pooled, self.weight, self.bias)


def extract_appearance(image: np.ndarray, roi: RoI, detector: DetectorParams) -> Tensor:
    return detector(pool_rois(image, [roi.box])[0][None, :]).reshape(detector.bias.shape[0])


def mask_roi_pixels(image: np.ndarray, rois: Iterable[RoI]) -> np.ndarray:
    """Copy of ``image`` with every masked RoI's pixels zeroed.

    The full-image RoI is exempt even if flagged.
    """
    out = image.copy()
    height, width, _ = image.shape
    for roi in rois:
        if roi.masked and not roi.full_image:
            c0, r0, c1, r1 = pixel_bounds(roi.box, width, height)
            out[r0:r1, c0:c1] = 0.0
    return out


# --- captions --------------------------------------------------------------


def relation_words(a: SceneObject, b: SceneObject) -> list[str]:
    """Dominant-axis spatial relation of ``a`` with respect to ``b``."""
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = ax - bx, ay - by
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx < 0 else ["right", "of"]
    return ["above"] if dy < 0 else ["below"]


def caption_for_scene(spec: SceneSpec, template_seed: int = 0) -> list[str]:
    """E.g. ``a red square left of a blue circle``; every object named once."""
    if not spec.objects:
        raise ValueError("cannot caption an empty scene")
    rng = np.random.default_rng(template_seed)
    order = rng.permutation(len(spec.objects))
    tokens: list[str] = []
    for pos, k in enumerate(order):
        obj = spec.objects[k]
        if pos:
            tokens += relation_words(spec.objects[order[pos - 1]], obj)
        tokens += ["a", obj.color, obj.shape]
    return tokens


CAPTION_WORDS = ("a", "left", "right", "of", "above", "below") + COLORS + SHAPES


# --- serialisation ---------------------------------------------------------


def format_scene(spec: SceneSpec) -> str:
    """``W,H[,shape,color,x0,y0,x1,y1]*`` on one line."""
    fields = [str(spec.width), str(spec.height)]
    for obj in spec.objects:
        fields += [obj.shape, obj.color, *map(str, obj.box)]
    return ",".join(fields)


def parse_scene(line: str, seed: int = 0) -> SceneSpec:
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) < 2 or (len(parts) - 2) % 6:
        raise ValueError(f"malformed scene line: {line!r}")
    width, height = int(parts[0]), int(parts[1])
    objects = []
    for i in range(2, len(parts), 6):
        shape, color = parts[i], parts[i + 1]
        box = tuple(int(v) for v in parts[i + 2:i + 6])
        objects.append(SceneObject(shape, color, box))
    spec = SceneSpec(width, height, tuple(objects), seed)
    spec.validate()
    return spec


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 dump of an ``[H, W, 3]`` raster in [0, 1]."""
    height, width, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    if magic != b"P6":
        raise ValueError("not a binary PPM")
    width, height = map(int, dims.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3) / float(maxval)


def with_masks(rois: Sequence[RoI], flags: Sequence[bool]) -> list[RoI]:
    return [replace(r, masked=bool(f)) for r, f in zip(rois, flags)]
