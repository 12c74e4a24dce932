"""Synthetic turntable-style instance datasets, augmentation and task streams.

Each category is one parametric shape family; each instance of it gets its
own hue, size, aspect and stripe texture. Views vary rotation, position and
background. Two presets exist: ``synthA`` sweeps rotation densely over a
few backgrounds (turntable-like) and ``synthB`` jitters pose and position
over the full background pool (handheld-like).
"""

from __future__ import annotations

import colorsys
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPE_FAMILIES = (
    "disk", "square", "triangle", "cross", "star",
    "ring", "bar", "lshape", "diamond", "wedge",
)
PRESETS = ("synthA", "synthB")
N_BACKGROUNDS = 11
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_SUPERSAMPLE = 2


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    category_id: int
    instance_id: int
    view_id: int
    split: str = "train"


@dataclass(frozen=True)
class InstanceSpec:
    category: int
    instance_id: int
    hue: float
    saturation: float
    value: float
    size: float
    aspect: float
    texture_seed: int

    @property
    def texture(self) -> tuple[float, float]:
        """(stripe frequency, phase) drawn from the texture seed."""
        r = np.random.default_rng(self.texture_seed)
        return float(r.uniform(0.5, 1.5)), float(r.uniform(0.0, 2 * math.pi))


@dataclass(frozen=True)
class ViewParams:
    angle: float
    dx: float = 0.0
    dy: float = 0.0
    background: int = 0
    scale: float = 1.0


@dataclass
class Task:
    index: int
    samples: list[Sample]
    categories: tuple[int, ...]
    instance_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def instance_labels(self) -> np.ndarray:
        return np.array([s.instance_id for s in self.samples], dtype=np.int64)


@dataclass
class TaskStream:
    tasks: list[Task]
    gallery: list[Sample]
    gallery_task_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.tasks)


# -- rendering ---------------------------------------------------------------


def _inside(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    th = np.arctan2(v, u)
    au, av = np.abs(u), np.abs(v)
    if family == "disk":
        return r <= 1.0
    if family == "square":
        return np.maximum(au, av) <= 0.8
    if family == "triangle":
        s3 = math.sqrt(3.0)
        return (v >= -0.5) & (s3 * u + v <= 1.0) & (-s3 * u + v <= 1.0)
    if family == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if family == "star":
        return r <= 0.78 + 0.22 * np.cos(5.0 * th)
    if family == "ring":
        return (r >= 0.55) & (r <= 1.0)
    if family == "bar":
        return (au <= 1.0) & (av <= 0.35)
    if family == "lshape":
        vert = (u >= -0.8) & (u <= -0.2) & (v >= -0.8) & (v <= 0.8)
        foot = (u >= -0.8) & (u <= 0.8) & (v >= 0.2) & (v <= 0.8)
        return vert | foot
    if family == "diamond":
        return au / 0.7 + av <= 1.0
    if family == "wedge":
        return (r <= 1.0) & (np.abs(th) <= math.pi / 3)
    raise ValueError(f"unknown shape family {family!r}")


def background_pool() -> list[tuple[np.ndarray, np.ndarray]]:
    """Eleven muted backgrounds as (base rgb, gradient (gx, gy) amplitude)."""
    pool = []
    for i in range(N_BACKGROUNDS):
        hue = (i * _GOLDEN) % 1.0
        val = 0.42 + 0.12 * ((i * 7) % 11) / 10.0
        base = np.array(colorsys.hsv_to_rgb(hue, 0.12, val))
        ang = 2 * math.pi * i / N_BACKGROUNDS
        grad = 0.06 * np.array([math.cos(ang), math.sin(ang)])
        pool.append((base, grad))
    return pool


_BACKGROUNDS = background_pool()


def render(spec: InstanceSpec, view: ViewParams, image_size: int = 32) -> np.ndarray:
    """Draw one view of an instance; returns (3, H, W) quantized to 1/255."""
    n = image_size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    angle = math.fmod(view.angle, 2 * math.pi)
    ca, sa = math.cos(angle), math.sin(angle)
    px, py = x - view.dx, y - view.dy
    u = ca * px + sa * py
    v = -sa * px + ca * py
    radius = 0.8 * spec.size * view.scale
    root_aspect = math.sqrt(spec.aspect)
    u = u / (radius * root_aspect)
    v = v * root_aspect / radius
    family = SHAPE_FAMILIES[spec.category % len(SHAPE_FAMILIES)]
    alpha = _inside(family, u, v).astype(np.float64)

    freq, phase = spec.texture
    shade = 0.78 + 0.22 * np.sin(freq * math.pi * u + phase)
    rgb = np.array(colorsys.hsv_to_rgb(spec.hue, spec.saturation, spec.value))
    obj = rgb[:, None, None] * shade[None]

    base, grad = _BACKGROUNDS[view.background % N_BACKGROUNDS]
    bg = base[:, None, None] + (grad[0] * x + grad[1] * y)[None]
    img = alpha[None] * obj + (1.0 - alpha[None]) * bg
    img = img.reshape(3, image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE).mean(axis=(2, 4))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def gallery_views(n_views: int, fraction: float, instance_id: int) -> set[int]:
    """Evenly spaced held-out views, offset by the instance id."""
    k = round(fraction * n_views)
    if not 1 <= k < n_views:
        raise ValueError(f"gallery_fraction {fraction} leaves no train or no gallery view "
                         f"out of {n_views}")
    return {(math.floor(j * n_views / k) + instance_id) % n_views for j in range(k)}


def _instance_specs(rng, n_categories, instances_per_category):
    specs = []
    n = n_categories * instances_per_category
    offset = rng.uniform()
    # evenly spaced hues; instances of one category sit 1/instances_per_category apart
    cat_rank = rng.permutation(n_categories)
    for c in range(n_categories):
        for j in range(instances_per_category):
            iid = c * instances_per_category + j
            specs.append(InstanceSpec(
                category=c,
                instance_id=iid,
                hue=float((offset + (j * n_categories + cat_rank[c]) / n) % 1.0),
                saturation=float(rng.uniform(0.65, 0.95)),
                value=float(rng.uniform(0.75, 1.0)),
                size=float(rng.uniform(0.8, 1.0)),
                aspect=float(rng.uniform(0.8, 1.25)),
                texture_seed=int(rng.integers(2**31)),
            ))
    return specs


def _view_params(rng, preset, n_views, view_id, backdrop):
    if preset == "synthA":
        return ViewParams(
            angle=math.pi / 2 * view_id / n_views,
            dx=float(rng.normal(0.0, 0.03)),
            dy=float(rng.normal(0.0, 0.03)),
            background=backdrop,
        )
    return ViewParams(
        angle=float(rng.uniform(0.0, 2 * math.pi)),
        dx=float(rng.uniform(-0.2, 0.2)),
        dy=float(rng.uniform(-0.2, 0.2)),
        background=int(rng.integers(N_BACKGROUNDS)),
        scale=float(rng.uniform(0.85, 1.1)),
    )


def generate_dataset(seed: int = 0, n_categories: int = 10, instances_per_category: int = 4,
                     views_per_instance: int = 24, image_size: int = 32,
                     gallery_fraction: float = 0.25, preset: str = "synthA") -> list[Sample]:
    """Render every (category, instance, view) sample of a synthetic preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if not 1 <= n_categories <= len(SHAPE_FAMILIES):
        raise ValueError(f"n_categories must be in [1, {len(SHAPE_FAMILIES)}], got {n_categories}")
    if instances_per_category < 1:
        raise ValueError(f"instances_per_category must be >= 1, got {instances_per_category}")
    if views_per_instance < 2:
        raise ValueError(f"views_per_instance must be >= 2, got {views_per_instance}")
    if image_size < 4:
        raise ValueError(f"image_size must be >= 4, got {image_size}")
    if not 0.0 < gallery_fraction < 1.0:
        raise ValueError(f"gallery_fraction must be in (0, 1), got {gallery_fraction}")

    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    specs = _instance_specs(rng, n_categories, instances_per_category)
    # synthA films each instance in front of one of three backdrops
    backdrops = rng.permutation(N_BACKGROUNDS)[:3]
    samples = []
    for spec in specs:
        held_out = gallery_views(views_per_instance, gallery_fraction, spec.instance_id)
        view_rng = np.random.default_rng([seed, PRESETS.index(preset), spec.instance_id])
        backdrop = int(backdrops[view_rng.integers(len(backdrops))])
        for v in range(views_per_instance):
            params = _view_params(view_rng, preset, views_per_instance, v, backdrop)
            samples.append(Sample(
                image=render(spec, params, image_size),
                category_id=spec.category,
                instance_id=spec.instance_id,
                view_id=v,
                split="gallery" if v in held_out else "train",
            ))
    return samples


def dataset_digest(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.array([s.category_id, s.instance_id, s.view_id], dtype="<i8").tobytes())
        h.update(s.split.encode())
        h.update(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
    return h.hexdigest()


# -- augmentation ------------------------------------------------------------


def _bilinear_crop(image, top, left, h, w):
    c, H, W = image.shape
    ys = top + (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = left + (np.arange(W) + 0.5) * (w / W) - 0.5
    ys = np.clip(ys, 0.0, H - 1.0)
    xs = np.clip(xs, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = image[:, y0][:, :, x0]
    b = image[:, y0][:, :, x1]
    cc = image[:, y1][:, :, x0]
    d = image[:, y1][:, :, x1]
    top_row = a * (1 - wx) + b * wx
    bottom = cc * (1 - wx) + d * wx
    return top_row * (1 - wy) + bottom * wy


def augment(image: np.ndarray, rng: np.random.Generator, scale: float | None = None,
            aspect: float | None = None, corner: tuple[float, float] | None = None) -> np.ndarray:
    """Random resized crop: area fraction in [0.6, 1], aspect in [3/4, 4/3].

    ``scale``, ``aspect`` and ``corner`` (top, left) pin the random draws.
    """
    _, H, W = image.shape
    if scale is None:
        scale = rng.uniform(0.6, 1.0)
    if aspect is None:
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    area = scale * H * W
    w = min(float(W), math.sqrt(area * aspect))
    h = min(float(H), math.sqrt(area / aspect))
    if corner is None:
        corner = (rng.uniform(0.0, H - h), rng.uniform(0.0, W - w))
    out = _bilinear_crop(image, corner[0], corner[1], h, w)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])


# -- protocol ----------------------------------------------------------------


def split_protocol(dataset: list[Sample], n_tasks: int = 5, categories_per_task: int = 2,
                   instance_subtasks: int = 1, seed: int | None = None) -> TaskStream:
    """Group categories into tasks, optionally splitting each by instance.

    Categories are taken in id order unless ``seed`` is given, in which case
    their order is shuffled deterministically.
    """
    if n_tasks < 1 or categories_per_task < 1 or instance_subtasks < 1:
        raise ValueError("n_tasks, categories_per_task and instance_subtasks must be >= 1")
    categories = sorted({s.category_id for s in dataset})
    needed = n_tasks * categories_per_task
    if needed > len(categories):
        raise ValueError(f"split_protocol: {n_tasks} tasks x {categories_per_task} categories "
                         f"needs {needed} categories, dataset has {len(categories)}")
    if seed is not None:
        categories = [categories[i] for i in np.random.default_rng(seed).permutation(len(categories))]

    tasks: list[Task] = []
    task_of_instance: dict[int, int] = {}
    for t in range(n_tasks):
        cats = tuple(categories[t * categories_per_task:(t + 1) * categories_per_task])
        instances = sorted({s.instance_id for s in dataset if s.category_id in cats})
        if instance_subtasks > len(instances):
            raise ValueError(f"task {t} has {len(instances)} instances, cannot split into "
                             f"{instance_subtasks} subtasks")
        for group in np.array_split(np.array(instances), instance_subtasks):
            ids = tuple(int(i) for i in group)
            idx = len(tasks)
            for i in ids:
                task_of_instance[i] = idx
            members = set(ids)
            train = [s for s in dataset if s.instance_id in members and s.split == "train"]
            tasks.append(Task(idx, train, cats, ids))

    gallery = [s for s in dataset if s.split == "gallery" and s.instance_id in task_of_instance]
    task_ids = np.array([task_of_instance[s.instance_id] for s in gallery], dtype=np.int64)
    return TaskStream(tasks=tasks, gallery=gallery, gallery_task_ids=task_ids)


# -- PPM folders -------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"{path}: PPM needs 3 channels, got {c}")
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: unreadable ({exc})") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    payload = raw[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data ({len(payload)} of {w * h * 3} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_folder_dataset(samples: list[Sample], root) -> Path:
    """Write ``root/<category>/<instance>/<view>.ppm``."""
    root = Path(root)
    for s in samples:
        d = root / f"c{s.category_id:03d}" / f"i{s.instance_id:05d}"
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(d / f"v{s.view_id:04d}.ppm", s.image)
    return root


def load_folder_dataset(path, gallery_fraction: float = 0.25) -> list[Sample]:
    """Read a category/instance/view PPM tree; ids follow lexicographic order."""
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root}: not a directory")
    samples: list[Sample] = []
    shape = None
    instance_id = 0
    cat_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for category_id, cdir in enumerate(cat_dirs):
        for idir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            views = sorted(p for p in idir.iterdir() if p.suffix == ".ppm")
            try:
                held_out = gallery_views(len(views), gallery_fraction, instance_id)
            except ValueError:
                held_out = set()
            for view_id, vpath in enumerate(views):
                img = read_ppm(vpath)
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise ValueError(f"{vpath}: image shape {img.shape} differs from {shape}")
                samples.append(Sample(img, category_id, instance_id, view_id,
                                      "gallery" if view_id in held_out else "train"))
            instance_id += 1
    if not samples:
        warnings.warn(f"{root}: no images found; dataset is empty", stacklevel=2)
    return samples
