"""Procedural multi-task scenes with controllable domain shift.

Each scene stacks a few slanted, colored geometric primitives over a
background. One scene graph yields all four labels: the class map comes
from primitive type, depth from layer order plus the slanted plane,
normals from the plane orientation, and edges from class boundaries.
Shading ties the image to the normals, so every task is inferable from
pixels and the tasks share structure by construction.

Domain shift transforms the image only: Gaussian noise scaled by the
source image std, then blur, then hue rotation and contrast, then a
clamp. Labels pass through untouched.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .model.tasks import TaskSpec

SHAPES = ("circle", "square", "diamond", "ellipse", "triangle")
PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.25, 0.75, 0.30],
    [0.20, 0.40, 0.85],
    [0.85, 0.80, 0.25],
    [0.80, 0.30, 0.80],
])
LIGHT = np.array([0.35, -0.25, 0.90]) / np.linalg.norm([0.35, -0.25, 0.90])
AMBIENT, DIFFUSE = 0.35, 0.65
# depth-axis compression: keeps each layer's slanted plane inside its own
# depth band so occlusion order and depth values stay consistent
DEPTH_TILT = 0.05
BG_DEPTH = 1.0
BG_NORMAL = np.array([0.0, 0.0, 1.0])

DEFAULT_SIZES = {"train": 512, "val": 64, "stream": 128}


@dataclass(frozen=True)
class GenConfig:
    height: int = 32
    width: int = 32
    n_classes: int = 5
    min_prims: int = 2
    max_prims: int = 8
    max_slant_deg: float = 60.0
    divisible_by: int = 4  # encoder reduction factor the extent must honor

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("spatial extent must be positive")
        if self.divisible_by > 1 and (self.height % self.divisible_by
                                      or self.width % self.divisible_by):
            raise ValueError(
                f"extent {self.height}x{self.width} not divisible by "
                f"{self.divisible_by}")
        if not 1 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
        if not 1 <= self.min_prims <= self.max_prims:
            raise ValueError("need 1 <= min_prims <= max_prims")
        if not 0 <= self.max_slant_deg < 90:
            raise ValueError("max slant must be in [0, 90) degrees")


def dataset_tasks(gen: GenConfig) -> list:
    return [
        TaskSpec("semseg", "categorical-map", n_classes=gen.n_classes + 1,
                 higher_better=True),
        TaskSpec("depth", "scalar-map"),
        TaskSpec("normal", "unit-vector-map"),
        TaskSpec("edge", "scalar-map"),
    ]


@dataclass(frozen=True)
class Prim:
    """One slanted planar primitive. `kind` doubles as the class index
    (background is 0); geometry lives in pixel units at pixel centers."""
    kind: int
    shape: str
    cx: float
    cy: float
    size: float
    ecc: float
    rot: float
    base_depth: float
    normal: np.ndarray  # unit, z > 0
    color: np.ndarray


@dataclass(frozen=True)
class Scene:
    image: np.ndarray    # (H, W, 3) float32 in [0, 1]
    classes: np.ndarray  # (H, W) int64, 0 = background
    depth: np.ndarray    # (H, W) float32 in [0, 1]
    normal: np.ndarray   # (H, W, 3) float32 unit vectors
    edge: np.ndarray     # (H, W) float32 in {0, 1}

    @property
    def labels(self) -> dict:
        return {"semseg": self.classes, "depth": self.depth,
                "normal": self.normal, "edge": self.edge}


def scene_stack(seed: int, gen: GenConfig) -> list:
    """The primitives of a scene, back to front."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(gen.min_prims, gen.max_prims + 1))
    lo = 0.12 * min(gen.height, gen.width)
    hi = 0.35 * min(gen.height, gen.width)
    prims = []
    for i in range(n):
        kind = int(rng.integers(1, gen.n_classes + 1))
        cx = float(rng.uniform(0.1, 0.9) * gen.width)
        cy = float(rng.uniform(0.1, 0.9) * gen.height)
        size = float(rng.uniform(lo, hi))
        ecc = float(rng.uniform(0.5, 0.9))
        rot = float(rng.uniform(0.0, 2 * np.pi))
        theta = float(rng.uniform(0.0, np.deg2rad(gen.max_slant_deg)))
        phi = float(rng.uniform(0.0, 2 * np.pi))
        normal = np.array([np.sin(theta) * np.cos(phi),
                           np.sin(theta) * np.sin(phi),
                           np.cos(theta)])
        color = PALETTE[kind - 1] + rng.uniform(-0.08, 0.08, size=3)
        # back layers get larger (farther) base depths
        base = (n - i) / (n + 1)
        prims.append(Prim(kind=kind, shape=SHAPES[kind - 1], cx=cx, cy=cy,
                          size=size, ecc=ecc, rot=rot, base_depth=base,
                          normal=normal, color=np.clip(color, 0.05, 0.95)))
    return prims


def prim_mask(prim: Prim, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Membership of pixel centers (px, py) in the primitive footprint."""
    dx, dy = px - prim.cx, py - prim.cy
    if prim.shape == "circle":
        return dx * dx + dy * dy <= prim.size ** 2
    if prim.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= prim.size
    if prim.shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= prim.size
    if prim.shape == "ellipse":
        c, s = np.cos(prim.rot), np.sin(prim.rot)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / prim.size) ** 2 + (v / (prim.size * prim.ecc)) ** 2 <= 1.0
    verts = triangle_vertices(prim)
    sign = None
    inside = np.ones(np.shape(dx), dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        cur = cross >= 0
        if sign is None:
            sign = cur
        inside &= cur == sign
    return inside


def triangle_vertices(prim: Prim) -> np.ndarray:
    ang = prim.rot + np.deg2rad([90.0, 210.0, 330.0])
    return np.stack([prim.cx + prim.size * np.cos(ang),
                     prim.cy + prim.size * np.sin(ang)], axis=1)


def prim_depth(prim: Prim, px, py, gen: GenConfig):
    """The primitive's slanted plane, clipped to the unit depth range."""
    s = max(gen.height, gen.width)
    nx, ny, nz = prim.normal
    d = prim.base_depth + DEPTH_TILT * (nx * (px - prim.cx)
                                        + ny * (py - prim.cy)) / (nz * s)
    return np.clip(d, 0.0, 1.0)


def shade(color: np.ndarray, normal: np.ndarray) -> np.ndarray:
    lam = max(0.0, float(normal @ LIGHT))
    return color * (AMBIENT + DIFFUSE * lam)


def edges_from_classes(classes: np.ndarray) -> np.ndarray:
    """1.0 wherever the class differs from any 4-neighbor."""
    e = np.zeros(classes.shape, dtype=bool)
    e[:-1, :] |= classes[:-1, :] != classes[1:, :]
    e[1:, :] |= classes[1:, :] != classes[:-1, :]
    e[:, :-1] |= classes[:, :-1] != classes[:, 1:]
    e[:, 1:] |= classes[:, 1:] != classes[:, :-1]
    return e.astype(np.float32)


def gen_scene(seed: int, gen: GenConfig) -> Scene:
    prims = scene_stack(seed, gen)
    h, w = gen.height, gen.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    classes = np.zeros((h, w), dtype=np.int64)
    depth = np.full((h, w), BG_DEPTH)
    normal = np.tile(BG_NORMAL, (h, w, 1))
    image = np.empty((h, w, 3))
    # background: dim vertical gradient, flat facing the viewer
    grad = np.linspace(0.85, 1.15, h)[:, None, None]
    image[:] = shade(np.array([0.24, 0.26, 0.30]), BG_NORMAL) * grad

    for prim in prims:  # back to front
        m = prim_mask(prim, px, py)
        classes[m] = prim.kind
        depth[m] = prim_depth(prim, px, py, gen)[m]
        normal[m] = prim.normal
        image[m] = shade(prim.color, prim.normal)

    return Scene(image=np.clip(image, 0.0, 1.0).astype(np.float32),
                 classes=classes,
                 depth=depth.astype(np.float32),
                 normal=normal.astype(np.float32),
                 edge=edges_from_classes(classes))


# -- domain shift -----------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    alpha: float = 0.0        # noise std as a fraction of sigma_img
    blur_radius: float = 0.0
    hue: float = 0.0          # rotation angle (radians) about the gray axis
    contrast: float = 0.0     # slope offset around mid-gray
    sigma_img: float = 1.0    # source image std the noise scales against
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("noise scale must be nonnegative")
        if self.blur_radius < 0:
            raise ValueError("blur radius must be nonnegative")
        if self.sigma_img <= 0:
            raise ValueError("sigma_img must be positive")

    @property
    def is_identity(self) -> bool:
        return (self.alpha == 0 and self.blur_radius == 0
                and self.hue == 0 and self.contrast == 0)


def _hue_matrix(angle: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis (Rodrigues form)."""
    u = np.full(3, 1.0 / np.sqrt(3.0))
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return (np.cos(angle) * np.eye(3) + np.sin(angle) * k
            + (1 - np.cos(angle)) * np.outer(u, u))


def apply_shift(scene: Scene, spec: ShiftSpec) -> Scene:
    """Image-only transform: noise, blur, hue/contrast, clamp."""
    if spec.is_identity:
        return scene
    img = scene.image.astype(np.float64)
    if spec.alpha > 0:
        rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.alpha * spec.sigma_img,
                               size=img.shape)
    if spec.blur_radius > 0:
        img = ndimage.gaussian_filter(
            img, sigma=(spec.blur_radius, spec.blur_radius, 0.0))
    if spec.hue != 0:
        img = img @ _hue_matrix(spec.hue).T
    if spec.contrast != 0:
        img = 0.5 + (1.0 + spec.contrast) * (img - 0.5)
    return dataclasses.replace(
        scene, image=np.clip(img, 0.0, 1.0).astype(np.float32))


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (N, H, W, 3) float32
    labels: dict        # task name -> (N, ...) array
    seeds: np.ndarray   # (N,) generation seeds

    def __len__(self):
        return self.images.shape[0]


def _stack_scenes(scenes: list) -> Split:
    return Split(
        images=np.stack([s.image for s in scenes]),
        labels={
            "semseg": np.stack([s.classes for s in scenes]),
            "depth": np.stack([s.depth for s in scenes]),
            "normal": np.stack([s.normal for s in scenes]),
            "edge": np.stack([s.edge for s in scenes]),
        },
        seeds=np.array([-1] * len(scenes)),
    )


@dataclass(frozen=True)
class Dataset:
    gen: GenConfig
    shift: ShiftSpec          # with sigma_img resolved; applied to "stream"
    splits: dict              # name -> Split
    seed_ranges: dict         # name -> (start, stop)
    sigma_img: float

    @property
    def tasks(self) -> list:
        return dataset_tasks(self.gen)

    def batch_at(self, split: str, batch_size: int, index: int,
                 order: np.ndarray = None) -> dict:
        sp = self.splits[split]
        idx = np.arange(len(sp)) if order is None else order
        sel = idx[index * batch_size:(index + 1) * batch_size]
        return {"image": sp.images[sel],
                "labels": {k: v[sel] for k, v in sp.labels.items()}}

    def epoch_order(self, split: str, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).permutation(len(self.splits[split]))

    def n_batches(self, split: str, batch_size: int) -> int:
        return len(self.splits[split]) // batch_size

    def stream_batches(self, batch_size: int):
        """Target batches in fixed arrival order (full batches only)."""
        for i in range(self.n_batches("stream", batch_size)):
            yield self.batch_at("stream", batch_size, i)


def _resolve_ranges(sizes: dict, base_seed: int, seed_ranges: dict) -> dict:
    names = ("train", "val", "stream")
    for name in names:
        if sizes.get(name, 0) < 1:
            raise ValueError(f"split {name!r} needs a positive size")
    if seed_ranges is None:
        out, start = {}, base_seed
        for name in names:
            out[name] = (start, start + sizes[name])
            start += sizes[name]
        return out
    out = {}
    for name in names:
        start, stop = seed_ranges[name]
        if stop - start != sizes[name]:
            raise ValueError(f"seed range for {name!r} has wrong size")
        out[name] = (int(start), int(stop))
    spans = sorted(out.values())
    for (a, b), (c, d) in zip(spans, spans[1:]):
        if c < b:
            raise ValueError(f"overlapping seed ranges: [{a},{b}) and [{c},{d})")
    return out


def make_dataset(gen: GenConfig, shift: ShiftSpec, sizes: dict = None,
                 base_seed: int = 0, seed_ranges: dict = None) -> Dataset:
    """Unshifted source train/val splits and a shifted target stream.

    sigma_img is measured on the source train images and written into the
    stored shift spec; each stream scene gets its own noise substream.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    ranges = _resolve_ranges(sizes, base_seed, seed_ranges)

    def generate(name):
        start, stop = ranges[name]
        scenes = [gen_scene(s, gen) for s in range(start, stop)]
        sp = _stack_scenes(scenes)
        return dataclasses.replace(sp, seeds=np.arange(start, stop)), scenes

    train, _ = generate("train")
    val, _ = generate("val")
    sigma = float(train.images.std())
    resolved = dataclasses.replace(shift, sigma_img=sigma)

    start, stop = ranges["stream"]
    shifted = []
    for s in range(start, stop):
        sub = int(np.random.SeedSequence([resolved.seed, s]).generate_state(1)[0])
        shifted.append(apply_shift(gen_scene(s, gen),
                                   dataclasses.replace(resolved, seed=sub)))
    stream = dataclasses.replace(_stack_scenes(shifted),
                                 seeds=np.arange(start, stop))

    return Dataset(gen=gen, shift=resolved,
                   splits={"train": train, "val": val, "stream": stream},
                   seed_ranges=ranges, sigma_img=sigma)


# -- persistence ------------------------------------------------------------

def dataset_manifest(ds: Dataset) -> dict:
    return {
        "gen": dataclasses.asdict(ds.gen),
        "shift": dataclasses.asdict(ds.shift),
        "sigma_img": ds.sigma_img,
        "seed_ranges": {k: list(v) for k, v in ds.seed_ranges.items()},
        "task_order": [t.name for t in ds.tasks],
        "sizes": {k: len(v) for k, v in ds.splits.items()},
    }


def save_dataset(prefix, ds: Dataset) -> None:
    """`<prefix>.json` carries the manifest, `<prefix>.npz` the arrays."""
    prefix = str(prefix)
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(dataset_manifest(ds), f, indent=2, sort_keys=True)
    arrays = {}
    for name, sp in ds.splits.items():
        arrays[f"{name}.images"] = sp.images
        arrays[f"{name}.seeds"] = sp.seeds
        for task, v in sp.labels.items():
            arrays[f"{name}.label.{task}"] = v
    np.savez_compressed(prefix + ".npz", **arrays)


def load_dataset(prefix) -> Dataset:
    prefix = str(prefix)
    with open(prefix + ".json", encoding="utf-8") as f:
        man = json.load(f)
    gen = GenConfig(**man["gen"])
    shift = ShiftSpec(**man["shift"])
    data = np.load(prefix + ".npz")
    splits = {}
    for name in man["sizes"]:
        labels = {t: data[f"{name}.label.{t}"] for t in man["task_order"]}
        splits[name] = Split(images=data[f"{name}.images"], labels=labels,
                             seeds=data[f"{name}.seeds"])
    return Dataset(gen=gen, shift=shift, splits=splits,
                   seed_ranges={k: tuple(v) for k, v in
                                man["seed_ranges"].items()},
                   sigma_img=float(man["sigma_img"]))
