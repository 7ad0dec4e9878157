"""Seeded synthetic scenes with a scale-dependent encoder quality model.

Objects are rendered as discs or squares. Their features are clean
(prototype + instance offset) only where the object's effective radius at a
pyramid scale is close to a comfort radius; elsewhere Gaussian noise grows
as quality drops.
"""
from dataclasses import dataclass, field

import numpy as np

from ._rng import generator
from .errors import ArgumentError, ConfigError, DimensionError, ShapeError
from .pyramid import Pyramid, block_mean

SHAPES = ("disc", "square")


@dataclass
class ObjectSpec:
    type_id: int
    center: tuple
    radius: float
    instance_jitter: float = 0.0
    shape: str = "disc"


@dataclass
class SceneSpec:
    canvas: tuple
    objects: list
    background_type: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.validate()

    def validate(self):
        h, w = self.canvas
        if h < 1 or w < 1:
            raise ConfigError(f"canvas must be positive, got {self.canvas}")
        if not self.objects:
            raise ConfigError("a scene needs at least one object")
        for k, o in enumerate(self.objects):
            if o.radius < 1:
                raise ConfigError(f"object {k}: radius {o.radius} < 1")
            r, c = o.center
            if not (0 <= r <= h and 0 <= c <= w):
                raise ConfigError(f"object {k}: center {o.center} outside canvas {self.canvas}")
            if o.shape not in SHAPES:
                raise ConfigError(f"object {k}: shape must be one of {SHAPES}, got {o.shape!r}")
            if o.instance_jitter < 0:
                raise ConfigError(f"object {k}: instance_jitter must be >= 0")

    def check_divisible(self, n_scales):
        f = 1 << (n_scales - 1)
        for axis, dim in zip(("height", "width"), self.canvas):
            if dim % f:
                raise DimensionError(
                    f"canvas {axis} {dim} is not divisible by 2**{n_scales - 1}={f} (n_scales={n_scales})"
                )

    @property
    def type_ids(self):
        return sorted({self.background_type} | {o.type_id for o in self.objects})

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["canvas"]), [ObjectSpec(**{**o, "center": tuple(o["center"])}) for o in d["objects"]],
                   d.get("background_type", 0))

    def to_dict(self):
        return {
            "canvas": list(self.canvas),
            "background_type": self.background_type,
            "objects": [
                {"type_id": o.type_id, "center": list(o.center), "radius": o.radius,
                 "instance_jitter": o.instance_jitter, "shape": o.shape}
                for o in self.objects
            ],
        }


@dataclass
class ComfortModel:
    comfort_radius: float = 4.0
    bandwidth: float = 1.0
    noise_scale: float = 1.5
    background_noise: float = 0.05

    def __post_init__(self):
        for name in ("comfort_radius", "bandwidth", "noise_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.background_noise < 0:
            raise ConfigError("background_noise must be >= 0")

    def quality(self, radius, scale):
        """Representation quality in (0, 1] of an object at a 1-based scale."""
        r_eff = radius / 2 ** (scale - 1)
        return float(np.exp(-np.log2(r_eff / self.comfort_radius) ** 2 / (2 * self.bandwidth ** 2)))

    def noise_std(self, radius, scale):
        return self.noise_scale * (1.0 - self.quality(radius, scale))


@dataclass
class PrototypeBank:
    """One prototype vector per type id (row index = type id)."""

    prototypes: np.ndarray
    instance_offsets: dict = field(default_factory=dict)

    @classmethod
    def random(cls, n_types, c, separation, seed=0):
        """Random prototypes whose closest pair sits exactly ``separation`` apart."""
        if n_types < 1 or c < 1:
            raise ArgumentError("need at least one type and one channel")
        protos = generator(seed, "prototypes").standard_normal((n_types, c))
        if n_types > 1:
            d = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
            dmin = d[np.triu_indices(n_types, 1)].min()
            protos *= separation / dmin
        return cls(protos)

    @property
    def channels(self):
        return self.prototypes.shape[1]

    def min_separation(self):
        p = self.prototypes
        if len(p) < 2:
            return float("inf")
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        return float(d[np.triu_indices(len(p), 1)].min())

    def offsets_for(self, spec, seed):
        """Per-object offsets of norm at most the object's ``instance_jitter``."""
        out = []
        c = self.channels
        for k, obj in enumerate(spec.objects):
            if k in self.instance_offsets:
                out.append(np.asarray(self.instance_offsets[k], dtype=np.float64))
                continue
            rng = generator(seed, "offset", k)
            v = rng.standard_normal(c)
            norm = np.linalg.norm(v)
            v = v / norm if norm > 0 else v
            out.append(v * obj.instance_jitter * rng.uniform())
        return out


def rasterize(spec):
    """Label map of the scene: background 0, object k labelled k + 1."""
    h, w = spec.canvas
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    labels = np.zeros((h, w), dtype=np.int64)
    for k, obj in enumerate(spec.objects):
        cr, cc = obj.center
        if obj.shape == "disc":
            inside = (rows - cr) ** 2 + (cols - cc) ** 2 <= obj.radius ** 2
        else:
            inside = (np.abs(rows - cr) < obj.radius) & (np.abs(cols - cc) < obj.radius)
        labels[inside] = k + 1
    return labels


def downsample_labels(labels):
    """Nearest (top-left of every 2x2 block) label downsampling."""
    labels = np.asarray(labels)
    h, w = labels.shape
    if h % 2 or w % 2:
        raise DimensionError(f"label map {h}x{w} has an odd dimension")
    return labels[::2, ::2].copy()


def _palette(type_ids, seed):
    rng = generator(seed, "palette")
    return {t: rng.uniform(0.0, 1.0, 3) for t in type_ids}


def gen_scene(spec, seed=0):
    """Render an RGB image and its ground-truth labels (background 0)."""
    spec.validate()
    labels = rasterize(spec)
    colors = _palette(spec.type_ids, seed)
    type_of = [spec.background_type] + [o.type_id for o in spec.objects]
    table = np.stack([colors[t] for t in type_of])
    return table[labels], labels


def label_pyramid(labels, n_scales):
    out = [np.asarray(labels)]
    for _ in range(n_scales - 1):
        out.append(downsample_labels(out[-1]))
    return out


def gen_feature_pyramid(spec, bank, model, n_scales=3, seed=0):
    """Per-scale features and labels of ``spec`` under the comfort model.

    At scale ``n`` an object super-pixel holds ``prototype + offset + noise``
    with noise std ``noise_scale * (1 - quality)``; background super-pixels
    get their prototype plus ``background_noise``. Labels at scale ``n`` come
    from nearest downsampling of the scale-1 raster.
    """
    spec.validate()
    spec.check_divisible(n_scales)
    protos = np.asarray(bank.prototypes, dtype=np.float64)
    for t in spec.type_ids:
        if not 0 <= t < len(protos):
            raise ShapeError(f"type id {t} has no prototype (bank holds {len(protos)})")
    offsets = bank.offsets_for(spec, seed)
    c = protos.shape[1]
    labels = label_pyramid(rasterize(spec), n_scales)
    levels = []
    for n in range(1, n_scales + 1):
        lab = labels[n - 1]
        noise = generator(seed, "noise", n).standard_normal(lab.shape + (c,))
        feat = np.empty(lab.shape + (c,))
        bg = lab == 0
        feat[bg] = protos[spec.background_type] + model.background_noise * noise[bg]
        for k, obj in enumerate(spec.objects):
            mask = lab == k + 1
            if not mask.any():
                continue
            base = protos[obj.type_id] + offsets[k]
            std = model.noise_std(obj.radius, n)
            feat[mask] = base + std * noise[mask] if std > 0 else base
        levels.append(feat)
    return Pyramid(tuple(levels)), labels


def patch_encode(image, c, proj_seed=0):
    """Stand-in encoder: 4x4 mean pooling then a fixed random 3 x c projection."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (h, w, 3), got {img.shape}")
    h, w, _ = img.shape
    if h % 4 or w % 4:
        raise DimensionError(f"image {h}x{w} is not divisible by 4")
    pooled = block_mean(img, 4)
    proj = generator(proj_seed, "patch-encoder").standard_normal((3, c))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    return pooled @ proj


def random_scene(seed, canvas=(64, 64), n_objects=4, n_types=3, radii=(4, 8, 16),
                 instance_jitter=1.0, shape="square", align=4):
    """Seeded random scene used by the ablation benchmark.

    Object types are drawn from ``1..n_types`` (0 is the background). Square
    objects are snapped to an ``align`` grid so coarse cells never straddle
    object borders.
    """
    rng = generator(seed, "scene")
    h, w = canvas
    objects = []
    for _ in range(n_objects):
        r = int(rng.choice(radii))
        lo_r, hi_r = r, h - r
        lo_c, hi_c = r, w - r
        cr = int(rng.integers(lo_r, hi_r + 1))
        cc = int(rng.integers(lo_c, hi_c + 1))
        if align and shape == "square":
            cr = min(max(align * round(cr / align), r), h - r)
            cc = min(max(align * round(cc / align), r), w - r)
        objects.append(ObjectSpec(int(rng.integers(1, n_types + 1)), (cr, cc), r, instance_jitter, shape))
    return SceneSpec(tuple(canvas), objects, 0)


def comfort_pair_scene(seed, canvas=(64, 64), small_radius=4, ratio=4, instance_jitter=0.5, align=4):
    """Two squares: one at ``small_radius`` and one ``ratio`` times larger.

    Type 1 is the large object, type 2 the small one. Centres sit on an
    ``align`` grid; the two squares may overlap, the small one is drawn on top.
    """
    rng = generator(seed, "pair-layout")
    h, w = canvas
    big_r = small_radius * ratio
    if 2 * big_r > min(h, w):
        raise ConfigError(f"large radius {big_r} does not fit into canvas {canvas}")

    def place(r):
        rows = np.arange(r, h - r + 1, align)
        cols = np.arange(r, w - r + 1, align)
        return int(rng.choice(rows)), int(rng.choice(cols))

    big = ObjectSpec(1, place(big_r), big_r, instance_jitter, "square")
    small = ObjectSpec(2, place(small_radius), small_radius, instance_jitter, "square")
    return SceneSpec(tuple(canvas), [big, small], 0)
