"""Synthetic ablation benchmark: synth -> fit -> fuse -> k-means -> eval.

All cells of one master seed share the same scenes, prototypes and codebook
seeds, so the grid compares toggles on identical data.
"""
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import derive_seed
from .errors import ConfigError
from .fusion import MsfConfig, ProjectionPair, fit_codebooks, msf_forward, refine_projection
from .metrics import evaluate, kmeans_cluster
from .synth import ComfortModel, PrototypeBank, gen_feature_pyramid, random_scene

CSV_COLUMNS = ("run_id", "inter", "intra", "sv_mode", "n_scales", "guidance", "seed",
               "ari", "ari_fg", "miou", "mbo", "inter_cluster", "intra_cluster", "wall_ms")

# grid axis name -> MsfConfig field
AXES = {
    "inter": "inter_fusion",
    "intra": "intra_fusion",
    "sv_codebooks": "sv_codebooks",
    "n_scales": "n_scales",
    "guidance": "guidance_scales",
    "adjacent_only": "adjacent_only",
}


@dataclass
class Benchmark:
    canvas: tuple = (64, 64)
    n_objects: int = 4
    n_types: int = 3
    radii: tuple = (4, 8, 16)
    instance_jitter: float = 1.0
    shape: str = "square"
    channels: int = 16
    m_group: int = 8
    n_train: int = 0
    epochs: int = 10
    decay: float = 0.9
    replace_dead: bool = True
    refine_iters: int = 0
    separation: float = None
    comfort: ComfortModel = field(default_factory=ComfortModel)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        comfort = ComfortModel(**d.pop("comfort", {}))
        for key in ("canvas", "radii"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(comfort=comfort, **d)

    def to_dict(self):
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["radii"] = list(self.radii)
        return d


def expand_grid(grid, base=None):
    """Cartesian product of the declared axes, in declaration order."""
    if not grid:
        raise ConfigError("the ablation grid is empty")
    unknown = set(grid) - set(AXES)
    if unknown:
        raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
    for name, values in grid.items():
        if not values:
            raise ConfigError(f"grid axis {name!r} has no values")
    base = dict(base or {})
    names = list(grid)
    cells = []
    for combo in itertools.product(*(grid[n] for n in names)):
        cell = {**base, **{AXES[n]: v for n, v in zip(names, combo)}}
        cells.append(cell)
    return cells


def _cell_config(cell, bench):
    kw = {
        "n_scales": 3, "inter_fusion": True, "intra_fusion": True,
        "sv_codebooks": "per_scale", "guidance_scales": (1,), "adjacent_only": False,
    }
    kw.update(cell)
    kw["guidance_scales"] = tuple(kw["guidance_scales"])
    return MsfConfig(c=bench.channels, m_group=bench.m_group, **kw)


def run_cell(cfg, bench, master_seed):
    """Run one grid cell; returns the mean metrics over the guidance scales."""
    start = time.perf_counter()
    bank = PrototypeBank.random(bench.n_types + 1, bench.channels,
                                bench.separation or 4 * bench.comfort.noise_scale, derive_seed(master_seed, "bank"))

    def scene(k):
        spec = random_scene(derive_seed(master_seed, "scene", k), bench.canvas, bench.n_objects,
                            bench.n_types, bench.radii, bench.instance_jitter, bench.shape)
        return gen_feature_pyramid(spec, bank, bench.comfort, cfg.n_scales,
                                   derive_seed(master_seed, "features", k))

    test_pyr, test_labels = scene(0)
    train = [test_pyr] + [scene(k)[0] for k in range(1, bench.n_train + 1)]
    proj = ProjectionPair.random(bench.channels, derive_seed(master_seed, "projection"))
    cb_si, cb_sv = fit_codebooks(train, proj, cfg, derive_seed(master_seed, "codebooks"),
                                 decay=bench.decay, epochs=bench.epochs,
                                 replace_dead=bench.replace_dead)
    if bench.refine_iters:
        proj = refine_projection(train, proj, cb_si, cb_sv, cfg, bench.refine_iters)
    out = msf_forward(test_pyr, proj, cb_si, cb_sv, cfg)
    rows = []
    for g, guidance in zip(cfg.guidance_scales, out.guidance):
        gt = test_labels[g - 1]
        k = len(np.unique(gt))
        pred = kmeans_cluster(guidance, k, derive_seed(master_seed, "kmeans", g))
        rows.append(evaluate(pred.labels, gt, guidance, background_id=0))
    metrics = {key: float(np.mean([r[key] for r in rows]))
               for key in ("ari", "ari_fg", "miou", "mbo", "inter_cluster", "intra_cluster")}
    metrics["wall_ms"] = (time.perf_counter() - start) * 1000.0
    return metrics


def run_grid(grid, master_seed, bench=None, base=None, threads=1):
    """Evaluate every grid cell; returns rows sorted by ``run_id``."""
    bench = bench or Benchmark()
    cells = expand_grid(grid, base)
    cfgs = [_cell_config(c, bench) for c in cells]

    def job(item):
        idx, cfg = item
        m = run_cell(cfg, bench, master_seed)
        return {
            "run_id": idx,
            "inter": cfg.inter_fusion,
            "intra": cfg.intra_fusion,
            "sv_mode": cfg.sv_codebooks,
            "n_scales": cfg.n_scales,
            "guidance": list(cfg.guidance_scales),
            "seed": master_seed,
            **m,
        }

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        rows = list(pool.map(job, enumerate(cfgs)))
    return sorted(rows, key=lambda r: r["run_id"])
