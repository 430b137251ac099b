"""Deterministic synthetic scenes for the dense-detection benchmark.

Each scene renders a few axis-aligned boxes on a fixed grid and emits one
feature vector per grid point. Features describe the *rendered* geometry
(clipped signed edge distances to the nearest object, class one-hot, inside
flag) plus noise channels, while the *recorded* ground truth the learner
sees has every edge jittered by ``ambiguity_sigma``. That gap is the whole
point of the benchmark: labels are ambiguous, features are not.

Feature layout per point (``feature_dim(num_classes)`` entries):

    [0:4]        signed (l, t, r, b) distances to the nearest rendered box,
                 stride-normalized and clipped to +-(width / stride)
    [4:4+C]      one-hot class of the nearest rendered box
    [4+C]        1.0 if the point is inside that box else 0.0
    [-4:]        standard-normal noise channels

All informative channels additionally receive N(0, feature_noise) noise.
Scene ``i`` draws from a child seed of ``spec.seed``, so any prefix of a
dataset is reproducible independently of its length.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .geometry import Box

__all__ = [
    "SceneSpec",
    "Scene",
    "Grid",
    "feature_dim",
    "make_grid",
    "generate",
    "save_scenes",
    "load_scenes",
]

FORMAT_NAME = "gfl-lab-scenes"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and randomness of one synthetic dataset."""

    width: float = 128.0
    height: float = 128.0
    stride: float = 8.0
    num_classes: int = 3
    boxes_per_scene: tuple[int, int] = (1, 4)
    box_size_range: tuple[float, float] = (16.0, 64.0)
    ambiguity_sigma: float = 1.0
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes_per_scene", tuple(int(v) for v in self.boxes_per_scene))
        object.__setattr__(self, "box_size_range", tuple(float(v) for v in self.box_size_range))
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.width % self.stride or self.height % self.stride:
            raise ValueError(
                f"scene {self.width}x{self.height} is not divisible by stride {self.stride}"
            )
        if self.num_classes < 1:
            raise ValueError(f"need at least one class, got {self.num_classes}")
        lo, hi = self.boxes_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad boxes_per_scene range {self.boxes_per_scene}")
        smin, smax = self.box_size_range
        if smin <= 0 or smax < smin:
            raise ValueError(f"bad box_size_range {self.box_size_range}")
        if smax > min(self.width, self.height):
            raise ValueError(
                f"boxes up to {smax} cannot fit a {self.width}x{self.height} scene"
            )
        if self.ambiguity_sigma < 0:
            raise ValueError(f"ambiguity_sigma must be >= 0, got {self.ambiguity_sigma}")
        if self.feature_noise < 0:
            raise ValueError(f"feature_noise must be >= 0, got {self.feature_noise}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(self.height // self.stride), int(self.width // self.stride)

    @property
    def num_points(self) -> int:
        h, w = self.grid_shape
        return h * w


@dataclass(frozen=True, eq=False)
class Grid:
    """Flattened row-major grid of cell-center points."""

    px: np.ndarray
    py: np.ndarray
    stride: float


@dataclass(frozen=True, eq=False)
class Scene:
    """Recorded ground truth, the rendered boxes behind it, and features."""

    gt: list[tuple[Box, int]]
    rendered: list[Box]
    features: np.ndarray


def feature_dim(num_classes: int) -> int:
    return 4 + num_classes + 1 + 4


def make_grid(spec: SceneSpec) -> Grid:
    h, w = spec.grid_shape
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    px = (cols.ravel() + 0.5) * spec.stride
    py = (rows.ravel() + 0.5) * spec.stride
    return Grid(px=px, py=py, stride=spec.stride)


def _generate_scene(spec: SceneSpec, rng: np.random.Generator, grid: Grid) -> Scene:
    lo, hi = spec.boxes_per_scene
    count = int(rng.integers(lo, hi + 1))
    smin, smax = spec.box_size_range

    rendered: list[Box] = []
    classes: list[int] = []
    for _ in range(count):
        bw = float(rng.uniform(smin, smax))
        bh = float(rng.uniform(smin, smax))
        x1 = float(rng.uniform(0.0, spec.width - bw))
        y1 = float(rng.uniform(0.0, spec.height - bh))
        rendered.append(Box(x1, y1, x1 + bw, y1 + bh))
        classes.append(int(rng.integers(0, spec.num_classes)))

    recorded: list[tuple[Box, int]] = []
    for box, cls in zip(rendered, classes):
        jitter = rng.normal(0.0, spec.ambiguity_sigma, size=4) if spec.ambiguity_sigma > 0 else np.zeros(4)
        x1 = min(max(box.x1 + jitter[0], 0.0), spec.width)
        y1 = min(max(box.y1 + jitter[1], 0.0), spec.height)
        x2 = min(max(box.x2 + jitter[2], 0.0), spec.width)
        y2 = min(max(box.y2 + jitter[3], 0.0), spec.height)
        if x2 < x1:
            x1, x2 = x2, x1
        if y2 < y1:
            y1, y2 = y2, y1
        recorded.append((Box(x1, y1, x2, y2), cls))

    p = grid.px.size
    fdim = feature_dim(spec.num_classes)
    signal = np.zeros((p, fdim))
    if rendered:
        corners = np.stack([b.as_array() for b in rendered])
        cx = (corners[:, 0] + corners[:, 2]) / 2.0
        cy = (corners[:, 1] + corners[:, 3]) / 2.0
        d2 = (grid.px[:, None] - cx[None, :]) ** 2 + (grid.py[:, None] - cy[None, :]) ** 2
        nearest = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        nb = corners[nearest]
        clip = spec.width / spec.stride
        dists = np.stack(
            [
                (grid.px - nb[:, 0]) / spec.stride,
                (grid.py - nb[:, 1]) / spec.stride,
                (nb[:, 2] - grid.px) / spec.stride,
                (nb[:, 3] - grid.py) / spec.stride,
            ],
            axis=1,
        )
        signal[:, 0:4] = np.clip(dists, -clip, clip)
        cls_arr = np.asarray(classes)[nearest]
        signal[np.arange(p), 4 + cls_arr] = 1.0
        inside = np.all(dists >= 0.0, axis=1)
        signal[:, 4 + spec.num_classes] = inside.astype(np.float64)

    features = signal
    features[:, : fdim - 4] += rng.normal(0.0, spec.feature_noise, size=(p, fdim - 4))
    features[:, fdim - 4 :] = rng.normal(0.0, 1.0, size=(p, 4))
    return Scene(gt=recorded, rendered=rendered, features=features)


def generate(spec: SceneSpec, count: int) -> list[Scene]:
    """Generate ``count`` scenes, each from its own child seed of the spec."""
    if count < 0:
        raise ValueError(f"scene count must be >= 0, got {count}")
    grid = make_grid(spec)
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
        scenes.append(_generate_scene(spec, rng, grid))
    return scenes


# ---------------------------------------------------------------------------
# JSONL persistence


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(d["shape"]).copy()


def _spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "stride": spec.stride,
        "num_classes": spec.num_classes,
        "boxes_per_scene": list(spec.boxes_per_scene),
        "box_size_range": list(spec.box_size_range),
        "ambiguity_sigma": spec.ambiguity_sigma,
        "feature_noise": spec.feature_noise,
        "seed": spec.seed,
    }


def save_scenes(path, spec: SceneSpec, scenes: list[Scene]) -> None:
    """Write a versioned JSONL file: one header line, then one scene per line."""
    with open(path, "w", encoding="ascii") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "spec": _spec_to_dict(spec)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for scene in scenes:
            row = {
                "gt": [[b.x1, b.y1, b.x2, b.y2, cls] for b, cls in scene.gt],
                "rendered": [[b.x1, b.y1, b.x2, b.y2] for b in scene.rendered],
                "features": _encode_array(scene.features),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_scenes(path) -> tuple[SceneSpec, list[Scene]]:
    with open(path, "r", encoding="ascii") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} file: {path}")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported version {header.get('version')} in {path}")
        sd = header["spec"]
        spec = SceneSpec(
            width=sd["width"],
            height=sd["height"],
            stride=sd["stride"],
            num_classes=sd["num_classes"],
            boxes_per_scene=tuple(sd["boxes_per_scene"]),
            box_size_range=tuple(sd["box_size_range"]),
            ambiguity_sigma=sd["ambiguity_sigma"],
            feature_noise=sd["feature_noise"],
            seed=sd["seed"],
        )
        scenes = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            gt = [(Box(x1, y1, x2, y2), int(cls)) for x1, y1, x2, y2, cls in row["gt"]]
            rendered = [Box(x1, y1, x2, y2) for x1, y1, x2, y2 in row["rendered"]]
            scenes.append(Scene(gt=gt, rendered=rendered, features=_decode_array(row["features"])))
    return spec, scenes
