"""Codebook matching, selection and EMA k-means fitting.

Matching follows the VQ-VAE bottleneck: probabilities are a softmax over the
negated (unsquared) Euclidean distances to every code, and the selected
index is their argmax with ties going to the lowest code id.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_seed, generator
from .errors import ArgumentError, BoundsError, ShapeError

EMA_EPS = 1e-8
# Rows per distance block; keeps the (rows, m, c) temporary bounded.
_CHUNK_ELEMS = 1 << 22


@dataclass
class Codebook:
    codes: np.ndarray
    id: str = "codebook"

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise ShapeError(f"codebook must be an (m, c) matrix with m >= 1, got {codes.shape}")
        if not np.all(np.isfinite(codes)):
            raise ArgumentError(f"codebook {self.id!r} has non-finite entries")
        self.codes = codes

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def channels(self):
        return self.codes.shape[1]

    def shifted(self, v):
        return Codebook(self.codes + np.asarray(v, dtype=np.float64), self.id)


class QuantizeResult(NamedTuple):
    probs: np.ndarray
    indices: np.ndarray
    discrete: np.ndarray


@dataclass
class EmaFitState:
    cluster_size: np.ndarray
    cluster_sum: np.ndarray
    decay: float
    usage_age: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ArgumentError(f"decay must lie in (0, 1), got {self.decay}")
        if self.usage_age is None:
            self.usage_age = np.zeros(len(self.cluster_size), dtype=np.int64)

    @classmethod
    def from_codes(cls, codes, decay):
        m = codes.shape[0]
        return cls(np.ones(m), codes.astype(np.float64).copy(), decay, np.zeros(m, dtype=np.int64))

    def codes(self):
        return self.cluster_sum / np.maximum(self.cluster_size, EMA_EPS)[:, None]

    def reset(self, k, vector):
        self.cluster_size[k] = 1.0
        self.cluster_sum[k] = vector
        self.usage_age[k] = 0


def _as_codebook(cb):
    return cb if isinstance(cb, Codebook) else Codebook(cb)


def distances(z, codes):
    """Euclidean distances between rows of ``z`` (n, c) and ``codes`` (m, c).

    Each output row depends only on its own input row, so results are
    identical whether a vector is matched alone or inside a batch.
    """
    n, c = z.shape
    m = codes.shape[0]
    out = np.empty((n, m))
    step = max(1, _CHUNK_ELEMS // max(1, m * c))
    for s in range(0, n, step):
        diff = z[s:s + step, None, :] - codes[None, :, :]
        out[s:s + step] = np.sqrt(np.square(diff).sum(axis=-1))
    return out


def _softmax_neg(d):
    logits = -d
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _flatten(z, channels):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] != channels:
        raise ShapeError(
            f"feature channels {z.shape[-1] if z.ndim else 0} do not match codebook channels {channels}"
        )
    return z.reshape(-1, channels), z.shape[:-1]


def match(z, cb):
    """Matching probabilities and indices of every super-pixel in ``z``.

    ``z`` may be any array whose last axis is the channel axis.
    """
    cb = _as_codebook(cb)
    flat, lead = _flatten(z, cb.channels)
    d = distances(flat, cb.codes)
    probs = _softmax_neg(d)
    indices = probs.argmax(axis=-1)
    return probs.reshape(lead + (cb.size,)), indices.reshape(lead)


def select(cb, indices):
    """Replace every index by its code vector."""
    cb = _as_codebook(cb)
    idx = np.asarray(indices)
    if idx.size and (not np.issubdtype(idx.dtype, np.integer)):
        if not np.all(idx == np.round(idx)):
            raise BoundsError("indices must be integers")
        idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise BoundsError(f"indices must lie in [0, {cb.size}), got range [{idx.min()}, {idx.max()}]")
    return cb.codes[idx.astype(np.int64)]


def quantize(z, cb):
    cb = _as_codebook(cb)
    probs, indices = match(z, cb)
    return QuantizeResult(probs, indices, select(cb, indices))


def nearest(z, codes):
    """Index of the nearest code per row (lowest index on ties)."""
    return distances(z, codes).argmin(axis=1)


def quantization_error(z, codes):
    """Total squared distance of every row to its nearest code."""
    d = distances(np.asarray(z, dtype=np.float64), np.asarray(codes, dtype=np.float64))
    return float(np.square(d.min(axis=1)).sum())


def _as_rows(batch):
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim < 2:
        raise ShapeError(f"feature batch must have a channel axis, got shape {arr.shape}")
    return arr.reshape(-1, arr.shape[-1])


def _init_codes(rows, m, rng):
    """k-means++ seeding: ``m`` distinct super-pixels drawn with D^2 weights."""
    uniq = np.unique(rows, axis=0)
    pool = uniq if len(uniq) >= m else rows
    picks = [int(rng.integers(len(pool)))]
    d2 = np.square(distances(pool, pool[picks[0]][None, :])[:, 0])
    for _ in range(1, m):
        d2[picks] = 0.0
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(len(pool), p=d2 / total))
        else:
            # remaining candidates coincide with chosen codes (duplicated rows)
            free = np.setdiff1d(np.arange(len(pool)), picks)
            nxt = int(rng.choice(free))
        picks.append(nxt)
        d2 = np.minimum(d2, np.square(distances(pool, pool[nxt][None, :])[:, 0]))
    return pool[picks].copy()


def ema_step(state, rows):
    """One EMA k-means update on ``rows``; returns per-code assignment counts."""
    codes = state.codes()
    assign = nearest(rows, codes)
    m = codes.shape[0]
    counts = np.bincount(assign, minlength=m).astype(np.float64)
    sums = np.zeros_like(state.cluster_sum)
    # Raster-ordered accumulation keeps the reduction deterministic.
    np.add.at(sums, assign, rows)
    d = state.decay
    state.cluster_size = d * state.cluster_size + (1.0 - d) * counts
    state.cluster_sum = d * state.cluster_sum + (1.0 - d) * sums
    used = counts > 0
    state.usage_age = np.where(used, 0, state.usage_age + 1)
    return counts


def replace_dead_codes(cb, state, batch, age_threshold, seed):
    """Overwrite codes unused for more than ``age_threshold`` steps.

    Each stale code is replaced by a seeded-random super-pixel of ``batch``
    and its EMA statistics restart from that vector; ``state`` is updated in
    place. Returns the new codebook.
    """
    cb = _as_codebook(cb)
    rows = _as_rows(batch)
    if len(rows) == 0:
        raise ArgumentError("replace_dead_codes needs a nonempty batch")
    stale = np.flatnonzero(state.usage_age > age_threshold)
    if stale.size == 0:
        return cb
    rng = generator(seed, "replace")
    picks = rng.integers(0, len(rows), size=stale.size)
    codes = cb.codes.copy()
    for k, p in zip(stale, picks):
        codes[k] = rows[p]
        state.reset(k, rows[p])
    return Codebook(codes, cb.id)


def fit_codebook_ema(feature_batches, m, decay=0.99, epochs=20, seed=0, *, init=None,
                     replace_dead=False, age_threshold=2, codebook_id="codebook"):
    """Fit an ``m``-code codebook by EMA k-means.

    ``feature_batches`` is a sequence of feature maps (any shape with channels
    last); the whole sequence is replayed each epoch in order.
    """
    batches = [_as_rows(b) for b in feature_batches]
    if not batches:
        raise ArgumentError("no feature batches given")
    channels = {b.shape[1] for b in batches}
    if len(channels) != 1:
        raise ShapeError(f"feature batches disagree on channel count: {sorted(channels)}")
    if int(m) != m or m < 1:
        raise ArgumentError(f"m must be a positive integer, got {m!r}")
    if not 0.0 < decay < 1.0:
        raise ArgumentError(f"decay must lie in (0, 1), got {decay}")
    rows = np.concatenate(batches)
    if len(rows) < m:
        raise ArgumentError(f"need at least m={m} super-pixels, got {len(rows)}")

    if init is None:
        init = _init_codes(rows, m, generator(seed, "init"))
    else:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (m, rows.shape[1]):
            raise ShapeError(f"init codes must have shape {(m, rows.shape[1])}, got {init.shape}")
    state = EmaFitState.from_codes(init, decay)
    cb = Codebook(state.codes(), codebook_id)
    step = 0
    for _ in range(int(epochs)):
        for batch in batches:
            ema_step(state, batch)
            cb = Codebook(state.codes(), codebook_id)
            if replace_dead:
                cb = replace_dead_codes(cb, state, batch, age_threshold, derive_seed(seed, "step", step))
            step += 1
    return cb, state


class VectorQuantizer(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`fit_codebook_ema` and :func:`quantize`.

    ``fit`` accepts a feature map, a list of feature maps or an ``(n, c)``
    matrix. ``predict`` returns code indices, ``transform`` the quantized
    features and ``predict_proba`` the matching probabilities.
    """

    def __init__(self, n_codes=64, decay=0.99, n_epochs=20, replace_dead=True,
                 age_threshold=2, random_state=0, codebook_id="codebook"):
        self.n_codes = n_codes
        self.decay = decay
        self.n_epochs = n_epochs
        self.replace_dead = replace_dead
        self.age_threshold = age_threshold
        self.random_state = random_state
        self.codebook_id = codebook_id

    def fit(self, X, y=None):
        batches = X if isinstance(X, (list, tuple)) else [X]
        self.codebook_, self.ema_state_ = fit_codebook_ema(
            batches, self.n_codes, self.decay, self.n_epochs, self.random_state,
            replace_dead=self.replace_dead, age_threshold=self.age_threshold,
            codebook_id=self.codebook_id,
        )
        self.n_features_in_ = self.codebook_.channels
        return self

    @property
    def cluster_centers_(self):
        check_is_fitted(self, "codebook_")
        return self.codebook_.codes

    def predict(self, X):
        check_is_fitted(self, "codebook_")
        return match(X, self.codebook_)[1]

    def predict_proba(self, X):
        check_is_fitted(self, "codebook_")
        return match(X, self.codebook_)[0]

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return quantize(X, self.codebook_).discrete

    def score(self, X, y=None):
        check_is_fitted(self, "codebook_")
        return -quantization_error(_as_rows(X), self.codebook_.codes)
