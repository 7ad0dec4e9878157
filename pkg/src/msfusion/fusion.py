"""Inter/intra-scale quantized fusion.

Each pyramid level ``Z_n`` is projected up through the pseudo-inverse of a
``2c x c`` down-projection and split into a scale-invariant half (quantized
with one codebook shared by all scales) and a scale-variant half (quantized
per scale). The scale-invariant indices are then fused across scales by
voting: every super-pixel takes the code of whichever scale matches its
region most confidently. Finally both halves are recombined through the
down-projection.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_seed, generator
from .errors import ArgumentError, ConfigError, ShapeError
from .pyramid import Pyramid, block_mean, build_pyramid, check_feature_map
from .quantizer import Codebook, QuantizeResult, fit_codebook_ema, match, quantize, select

SV_MODES = ("per_scale", "shared")
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class ProjectionPair:
    """Down-projection ``w_down`` (2c x c) and its cached pseudo-inverse ``w_up``."""

    w_down: np.ndarray
    w_up: np.ndarray

    @classmethod
    def from_down(cls, w_down, rcond=PINV_RCOND):
        w = np.array(w_down, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 2 * w.shape[1]:
            raise ShapeError(f"w_down must be a 2c x c matrix, got shape {w.shape}")
        u, s, vt = np.linalg.svd(w, full_matrices=False)
        keep = s > rcond * s.max() if s.size and s.max() > 0 else np.zeros_like(s, dtype=bool)
        rank = int(keep.sum())
        if rank < w.shape[1]:
            raise ArgumentError(f"w_down has rank {rank} < c={w.shape[1]}; it must have full column rank")
        w_up = (vt.T / s) @ u.T
        return cls(w, w_up)

    @classmethod
    def random(cls, c, seed=0):
        """Seeded random projection with orthonormal columns (condition number 1)."""
        g = generator(seed, "projection").standard_normal((2 * c, c))
        q, r = np.linalg.qr(g)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return cls.from_down(q)

    @classmethod
    def identity(cls, c):
        """``[I; 0]``: scale-invariant half carries ``z``, scale-variant half is zero."""
        return cls.from_down(np.vstack([np.eye(c), np.zeros((c, c))]))

    @property
    def channels(self):
        return self.w_down.shape[1]


class SplitMaps(NamedTuple):
    si: np.ndarray
    sv: np.ndarray


@dataclass
class FusedScale:
    probs_si: np.ndarray
    indices_si: np.ndarray
    discrete_si: np.ndarray
    winning_scale: np.ndarray


@dataclass
class MsfConfig:
    n_scales: int = 3
    c: int = 256
    m_group: int = 64
    inter_fusion: bool = True
    intra_fusion: bool = True
    sv_codebooks: str = "per_scale"
    guidance_scales: tuple = (1,)
    adjacent_only: bool = False

    def __post_init__(self):
        for name in ("n_scales", "c", "m_group"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
            setattr(self, name, int(v))
        if self.sv_codebooks not in SV_MODES:
            raise ConfigError(f"sv_codebooks must be one of {SV_MODES}, got {self.sv_codebooks!r}")
        gs = tuple(sorted({int(g) for g in self.guidance_scales}))
        if not gs:
            raise ConfigError("guidance_scales must name at least one scale")
        bad = [g for g in gs if not 1 <= g <= self.n_scales]
        if bad:
            raise ConfigError(f"guidance scales {bad} outside [1, {self.n_scales}]")
        self.guidance_scales = gs

    @property
    def n_sv_codebooks(self):
        return self.n_scales if self.sv_codebooks == "per_scale" else 1


class MsfOutput(NamedTuple):
    guidance: list
    diagnostics: list
    sv_results: list


def project_up(z, proj):
    """Split ``z`` into scale-invariant and scale-variant halves."""
    z = np.asarray(z, dtype=np.float64)
    c = proj.channels
    if z.ndim < 1 or z.shape[-1] != c:
        raise ShapeError(f"feature channels {z.shape[-1] if z.ndim else 0} do not match projection c={c}")
    y = z @ proj.w_up
    return SplitMaps(y[..., :c], y[..., c:])


def intra_scale_fuse(fused_si, x_sv, proj):
    """Recombine the two halves: ``concat(si, sv) @ w_down``."""
    si = np.asarray(fused_si, dtype=np.float64)
    sv = np.asarray(x_sv, dtype=np.float64)
    c = proj.channels
    if si.shape != sv.shape:
        raise ShapeError(f"si shape {si.shape} and sv shape {sv.shape} differ")
    if si.shape[-1] != c:
        raise ShapeError(f"halves have {si.shape[-1]} channels, projection expects {c}")
    return np.concatenate([si, sv], axis=-1) @ proj.w_down


project_down = intra_scale_fuse


def vote_scales(n, n_scales, adjacent_only=False):
    """Scales that vote for super-pixels of scale ``n`` (ascending)."""
    if adjacent_only:
        return list(range(max(1, n - 1), min(n_scales, n + 1) + 1))
    return list(range(1, n_scales + 1))


def _candidates(levels, n, k):
    """Candidate vectors from scale ``k`` for every super-pixel of scale ``n``."""
    if k == n:
        return levels[n - 1]
    if k < n:
        return block_mean(levels[k - 1], 1 << (n - k))
    f = 1 << (k - n)
    return np.repeat(np.repeat(levels[k - 1], f, axis=0), f, axis=1)


def inter_scale_fuse(si_pyramid, cb_shared, adjacent_only=False):
    """Fuse scale-invariant indices across scales by max-probability voting.

    For each super-pixel the candidate from every voting scale (the pooled
    finer block, the cell itself, or the covering coarser cell) is matched
    against the shared codebook; the scale with the highest maximum
    probability wins, lowest scale on ties.
    """
    pyr = si_pyramid if isinstance(si_pyramid, Pyramid) else Pyramid(tuple(si_pyramid))
    if pyr.channels != cb_shared.channels:
        raise ShapeError(
            f"scale-invariant maps have {pyr.channels} channels, codebook has {cb_shared.channels}"
        )
    levels = pyr.levels
    n_scales = pyr.n_scales
    # probs of each level matched as-is, reused for own-scale and coarser votes
    own = [match(lvl, cb_shared)[0] for lvl in levels]
    out = []
    for n in range(1, n_scales + 1):
        scales = vote_scales(n, n_scales, adjacent_only)
        probs = []
        for k in scales:
            if k < n:
                probs.append(match(_candidates(levels, n, k), cb_shared)[0])
            elif k == n:
                probs.append(own[n - 1])
            else:
                f = 1 << (k - n)
                probs.append(np.repeat(np.repeat(own[k - 1], f, axis=0), f, axis=1))
        stacked = np.stack(probs)
        winner = stacked.max(axis=-1).argmax(axis=0)
        fused = np.take_along_axis(stacked, winner[None, :, :, None], axis=0)[0]
        indices = fused.argmax(axis=-1)
        out.append(FusedScale(
            probs_si=fused,
            indices_si=indices,
            discrete_si=select(cb_shared, indices),
            winning_scale=np.asarray(scales)[winner],
        ))
    return out


def _unfused(si_map, cb, n):
    res = quantize(si_map, cb)
    return FusedScale(res.probs, res.indices, res.discrete, np.full(res.indices.shape, n))


def _check_inputs(pyr, proj, cb_si, cb_sv, cfg):
    if pyr.n_scales != cfg.n_scales:
        raise ConfigError(f"pyramid has {pyr.n_scales} levels but n_scales={cfg.n_scales}")
    if pyr.channels != proj.channels:
        raise ShapeError(f"pyramid has {pyr.channels} channels, projection expects {proj.channels}")
    if cb_si.channels != proj.channels:
        raise ShapeError(f"si codebook has {cb_si.channels} channels, expected {proj.channels}")
    if len(cb_sv) != cfg.n_sv_codebooks:
        raise ConfigError(
            f"sv_codebooks={cfg.sv_codebooks!r} needs {cfg.n_sv_codebooks} sv codebook(s), got {len(cb_sv)}"
        )
    for cb in cb_sv:
        if cb.channels != proj.channels:
            raise ShapeError(f"sv codebook {cb.id!r} has {cb.channels} channels, expected {proj.channels}")


def msf_forward(input_pyramid, proj, cb_si, cb_sv, cfg, *, threads=1, bypass_quantization=False):
    """Full multi-scale fusion pass.

    Returns ``(guidance, diagnostics, sv_results)`` where ``guidance`` holds one
    map per entry of ``cfg.guidance_scales`` (ascending). With
    ``bypass_quantization`` both halves skip quantization (a round-trip test
    hook); diagnostics and sv results are then empty.
    """
    pyr = input_pyramid if isinstance(input_pyramid, Pyramid) else Pyramid(tuple(input_pyramid))
    cb_sv = list(cb_sv)
    _check_inputs(pyr, proj, cb_si, cb_sv, cfg)
    n_scales = cfg.n_scales

    def sv_book(n):
        return cb_sv[n - 1] if cfg.sv_codebooks == "per_scale" else cb_sv[0]

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        splits = list(pool.map(lambda lvl: project_up(lvl, proj), pyr.levels))
        if bypass_quantization:
            si_maps = [s.si for s in splits]
            sv_maps = [s.sv for s in splits]
            diagnostics, sv_results = [], []
        else:
            sv_results = list(pool.map(lambda n: quantize(splits[n - 1].sv, sv_book(n)),
                                       range(1, n_scales + 1)))
            if cfg.inter_fusion:
                diagnostics = inter_scale_fuse([s.si for s in splits], cb_si, cfg.adjacent_only)
            else:
                diagnostics = list(pool.map(lambda n: _unfused(splits[n - 1].si, cb_si, n),
                                            range(1, n_scales + 1)))
            si_maps = [d.discrete_si for d in diagnostics]
            sv_maps = [r.discrete for r in sv_results]

    guidance = []
    for n in cfg.guidance_scales:
        sv = sv_maps[n - 1] if cfg.intra_fusion else np.zeros_like(sv_maps[n - 1])
        guidance.append(intra_scale_fuse(si_maps[n - 1], sv, proj))
    return MsfOutput(guidance, diagnostics, sv_results)


class ParamCount(NamedTuple):
    baseline: int
    msf: int
    reduction_pct: float


def count_codebook_params(cfg, baseline_m):
    """Codebook-related parameter counts of a flat codebook vs. the fused design.

    The fused design stores the ``2c x c`` projection plus one shared
    scale-invariant codebook and the scale-variant codebook(s), each
    ``m_group x c``.
    """
    if isinstance(baseline_m, bool) or int(baseline_m) != baseline_m or baseline_m < 1:
        raise ArgumentError(f"baseline_m must be a positive integer, got {baseline_m!r}")
    c = cfg.c
    baseline = int(baseline_m) * c
    msf = c * 2 * c + cfg.m_group * c * (1 + cfg.n_sv_codebooks)
    reduction = 100 * (1 - Fraction(msf, baseline))
    return ParamCount(baseline, msf, float(reduction))


def compute_cost_ratio(n_scales):
    """Relative encoder cost of an ``n_scales`` pyramid (quadratic in resolution)."""
    if isinstance(n_scales, bool) or int(n_scales) != n_scales or n_scales < 1:
        raise ArgumentError(f"n_scales must be a positive integer, got {n_scales!r}")
    return float(sum(Fraction(1, 4 ** k) for k in range(int(n_scales))))


def split_levels(pyr, proj):
    splits = [project_up(lvl, proj) for lvl in pyr.levels]
    return [s.si for s in splits], [s.sv for s in splits]


def _stack(maps):
    # One batch per epoch, so usage ages count epochs rather than levels.
    return np.concatenate([m.reshape(-1, m.shape[-1]) for m in maps])


def fit_codebooks(pyramids, proj, cfg, seed=0, decay=0.99, epochs=20, replace_dead=True,
                  age_threshold=2):
    """Fit the shared si codebook and the sv codebook(s) on a list of pyramids.

    The si codebook pools super-pixels of every scale; per-scale sv
    codebooks only see their own scale.
    """
    si_levels, sv_levels = [], []
    for pyr in pyramids:
        si, sv = split_levels(pyr, proj)
        si_levels.append(si)
        sv_levels.append(sv)
    kw = dict(decay=decay, epochs=epochs, replace_dead=replace_dead, age_threshold=age_threshold)
    cb_si, _ = fit_codebook_ema([_stack(lv for si in si_levels for lv in si)], cfg.m_group,
                                seed=derive_seed(seed, "si"), codebook_id="shared-si", **kw)
    if cfg.sv_codebooks == "shared":
        cb, _ = fit_codebook_ema([_stack(lv for sv in sv_levels for lv in sv)], cfg.m_group,
                                 seed=derive_seed(seed, "sv", 0), codebook_id="sv-shared", **kw)
        cb_sv = [cb]
    else:
        cb_sv = []
        for n in range(1, cfg.n_scales + 1):
            cb, _ = fit_codebook_ema([_stack(sv[n - 1] for sv in sv_levels)], cfg.m_group,
                                     seed=derive_seed(seed, "sv", n), codebook_id=f"sv-scale-{n}", **kw)
            cb_sv.append(cb)
    return cb_si, cb_sv


def refine_projection(pyramids, proj, cb_si, cb_sv, cfg, n_iter=1):
    """Alternating least-squares refinement of ``w_down``.

    Alternates quantization with a least-squares fit of ``w_down`` mapping
    ``concat(si, sv)`` codes back to the original features. Iterations whose
    solution is rank deficient keep the previous projection.
    """
    all_scales = MsfConfig(cfg.n_scales, cfg.c, cfg.m_group, cfg.inter_fusion, True,
                           cfg.sv_codebooks, tuple(range(1, cfg.n_scales + 1)), cfg.adjacent_only)
    for _ in range(int(n_iter)):
        rows, targets = [], []
        for pyr in pyramids:
            out = msf_forward(pyr, proj, cb_si, cb_sv, all_scales)
            for n, lvl in enumerate(pyr.levels):
                x = np.concatenate([out.diagnostics[n].discrete_si, out.sv_results[n].discrete], axis=-1)
                rows.append(x.reshape(-1, 2 * cfg.c))
                targets.append(lvl.reshape(-1, cfg.c))
        w, *_ = np.linalg.lstsq(np.concatenate(rows), np.concatenate(targets), rcond=None)
        try:
            proj = ProjectionPair.from_down(w)
        except ArgumentError:
            break
    return proj


def _as_pyramids(X, n_scales):
    if isinstance(X, Pyramid):
        return [X], True
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Pyramid):
        return list(X), False
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        return [build_pyramid(check_feature_map(arr), n_scales)], True
    if arr.ndim == 4:
        return [build_pyramid(a, n_scales) for a in arr], False
    raise ShapeError(f"expected a Pyramid, a feature map or a stack of maps, got shape {arr.shape}")


class MultiScaleFusion(BaseEstimator, TransformerMixin):
    """Estimator front-end for the fusion pipeline.

    ``fit`` draws the projection and fits all codebooks by EMA k-means;
    ``transform`` returns the guidance map (or a list of maps when several
    guidance scales are requested). Inputs are :class:`Pyramid` objects,
    lists of them, or raw level-1 feature maps that get pooled into a
    pyramid.
    """

    def __init__(self, n_scales=3, n_codes=64, inter_fusion=True, intra_fusion=True,
                 sv_codebooks="per_scale", guidance_scales=(1,), adjacent_only=False,
                 decay=0.99, n_epochs=20, replace_dead=True, refine_iters=0, random_state=0):
        self.n_scales = n_scales
        self.n_codes = n_codes
        self.inter_fusion = inter_fusion
        self.intra_fusion = intra_fusion
        self.sv_codebooks = sv_codebooks
        self.guidance_scales = guidance_scales
        self.adjacent_only = adjacent_only
        self.decay = decay
        self.n_epochs = n_epochs
        self.replace_dead = replace_dead
        self.refine_iters = refine_iters
        self.random_state = random_state

    def _config(self, c):
        return MsfConfig(self.n_scales, c, self.n_codes, self.inter_fusion, self.intra_fusion,
                         self.sv_codebooks, tuple(self.guidance_scales), self.adjacent_only)

    def fit(self, X, y=None):
        pyramids, _ = _as_pyramids(X, self.n_scales)
        c = pyramids[0].channels
        self.config_ = self._config(c)
        seed = self.random_state
        self.projection_ = ProjectionPair.random(c, derive_seed(seed, "projection"))
        self.codebook_si_, self.codebooks_sv_ = fit_codebooks(
            pyramids, self.projection_, self.config_, derive_seed(seed, "codebooks"),
            self.decay, self.n_epochs, self.replace_dead,
        )
        if self.refine_iters:
            self.projection_ = refine_projection(pyramids, self.projection_, self.codebook_si_,
                                                 self.codebooks_sv_, self.config_, self.refine_iters)
        self.n_features_in_ = c
        return self

    def forward(self, X, threads=1):
        check_is_fitted(self, "projection_")
        pyramids, single = _as_pyramids(X, self.n_scales)
        outs = [msf_forward(p, self.projection_, self.codebook_si_, self.codebooks_sv_, self.config_,
                            threads=threads) for p in pyramids]
        return outs[0] if single else outs

    def transform(self, X):
        outs = self.forward(X)
        pick = (lambda o: o.guidance[0]) if len(self.config_.guidance_scales) == 1 else (lambda o: o.guidance)
        return pick(outs) if isinstance(outs, MsfOutput) else [pick(o) for o in outs]

    def predict(self, X):
        """Fused scale-invariant code indices at the finest scale."""
        outs = self.forward(X)
        if isinstance(outs, MsfOutput):
            return outs.diagnostics[0].indices_si
        return [o.diagnostics[0].indices_si for o in outs]


__all__ = [
    "FusedScale", "MsfConfig", "MsfOutput", "MultiScaleFusion", "ParamCount", "ProjectionPair",
    "QuantizeResult", "SplitMaps", "Codebook", "compute_cost_ratio", "count_codebook_params",
    "fit_codebooks", "inter_scale_fuse", "intra_scale_fuse", "msf_forward", "project_down",
    "project_up", "refine_projection", "split_levels", "vote_scales",
]
