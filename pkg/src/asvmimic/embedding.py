"""GMM-UBM, Baum-Welch statistics, total-variability training and i-vectors."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from .errors import DataError, NumericalError
from .store import register

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
MIN_FRAMES_PER_COMPONENT = 50
VAR_FLOOR_FRACTION = 1e-3
ABS_VAR_FLOOR = 1e-8


@register
@dataclass
class GmmUbm:
    STORE_VERSION = 1

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """log w_c + log N(x_t; m_c, diag v_c) as a T x C matrix."""
        inv = 1.0 / self.variances
        const = -0.5 * (self.dim * LOG2PI + np.sum(np.log(self.variances), axis=1)
                        + np.sum(self.means ** 2 * inv, axis=1))
        quad = -0.5 * (x ** 2) @ inv.T + x @ (self.means * inv).T
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return quad + const + logw

    def posteriors(self, x: np.ndarray):
        """Return (responsibilities T x C, per-frame log-likelihood T)."""
        lp = self.component_loglik(x)
        mx = lp.max(axis=1, keepdims=True)
        p = np.exp(lp - mx)
        s = p.sum(axis=1, keepdims=True)
        return p / s, (mx + np.log(s))[:, 0]


def _stack_speech(features) -> np.ndarray:
    mats = []
    for f in features:
        mats.append(f if isinstance(f, np.ndarray) else f.speech())
    if not mats:
        raise DataError("no feature matrices supplied")
    return np.vstack(mats)


def em_step(ubm: GmmUbm, x: np.ndarray, var_floor: np.ndarray) -> tuple[GmmUbm, float]:
    """One EM iteration; returns the updated model and the mean per-frame
    log-likelihood of ``x`` under the *input* model."""
    gamma, ll = ubm.posteriors(x)
    avg_ll = float(ll.mean())
    if not np.isfinite(avg_ll):
        raise NumericalError("UBM EM: non-finite log-likelihood")
    n = gamma.sum(axis=0)
    f = gamma.T @ x
    s = gamma.T @ (x ** 2)
    alive = n > 1e-10
    safe_n = np.where(alive, n, 1.0)[:, None]
    means = np.where(alive[:, None], f / safe_n, ubm.means)
    var = np.where(alive[:, None], s / safe_n - means ** 2, ubm.variances)
    var = np.maximum(var, var_floor)
    w = np.maximum(n, 1e-300)
    return GmmUbm(w / w.sum(), means, var), avg_ll


def train_ubm(features: Iterable, n_components: int, iters: int = 5, seed: int = 0,
              on_iteration: Callable[[int, int, float], None] | None = None) -> GmmUbm:
    """Train a diagonal GMM by binary splitting from the global Gaussian.

    After every split level ``iters`` EM iterations are run.  Only
    speech frames are used.  ``on_iteration(n_components, iteration,
    avg_loglik)`` is called after each EM step.
    """
    x = _stack_speech(features)
    if x.shape[0] < MIN_FRAMES_PER_COMPONENT * n_components:
        raise DataError(f"UBM training needs >= {MIN_FRAMES_PER_COMPONENT * n_components} speech frames"
                        f" for C={n_components}, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    # centring keeps s/n - m^2 accurate
    gmean = x.mean(axis=0)
    x = x - gmean
    gvar = x.var(axis=0)
    floor = np.maximum(VAR_FLOOR_FRACTION * gvar, ABS_VAR_FLOOR)
    ubm = GmmUbm(np.ones(1), np.zeros((1, x.shape[1])), np.maximum(gvar, floor)[None, :])

    def run(ubm):
        for it in range(iters):
            ubm, ll = em_step(ubm, x, floor)
            log.debug("UBM C=%d iter %d avg loglik %.6f", ubm.n_components, it, ll)
            if on_iteration is not None:
                on_iteration(ubm.n_components, it, ll)
        return ubm

    ubm = run(ubm)
    while ubm.n_components < n_components:
        k = min(ubm.n_components, n_components - ubm.n_components)
        order = np.argsort(-ubm.weights, kind="stable")[:k]
        means, w = ubm.means.copy(), ubm.weights.copy()
        new_m, new_v = [], []
        for c in order:
            step = 0.1 * np.sqrt(ubm.variances[c]) * rng.choice([-1.0, 1.0], size=x.shape[1])
            new_m.append(means[c] - step)
            new_v.append(ubm.variances[c])
            means[c] = means[c] + step
            w[c] *= 0.5
        ubm = GmmUbm(np.concatenate([w, w[order]]), np.vstack([means] + new_m),
                     np.vstack([ubm.variances] + new_v))
        ubm = run(ubm)
    return GmmUbm(ubm.weights, ubm.means + gmean, ubm.variances)


@register
@dataclass
class BwStats:
    """Zeroth-order occupancies ``n`` (C) and centred first-order sums ``f`` (C x D)."""

    STORE_VERSION = 1

    n: np.ndarray
    f: np.ndarray

    def __add__(self, other: "BwStats") -> "BwStats":
        return BwStats(self.n + other.n, self.f + other.f)

    @staticmethod
    def merge(parts: Sequence["BwStats"]) -> "BwStats":
        if not parts:
            raise DataError("nothing to merge")
        n = np.zeros_like(parts[0].n)
        f = np.zeros_like(parts[0].f)
        for p in parts:
            n = n + p.n
            f = f + p.f
        return BwStats(n, f)


def bw_from_frames(x: np.ndarray, ubm: GmmUbm) -> BwStats:
    if x.shape[0] == 0:
        raise DataError("no speech frames for Baum-Welch statistics")
    gamma, _ = ubm.posteriors(x)
    n = gamma.sum(axis=0)
    f = gamma.T @ x - n[:, None] * ubm.means
    return BwStats(n, f)


def accumulate_bw(feat, ubm: GmmUbm) -> BwStats:
    x = feat if isinstance(feat, np.ndarray) else feat.speech()
    return bw_from_frames(x, ubm)


@register
@dataclass
class TotalVariability:
    STORE_VERSION = 1

    t_matrix: np.ndarray          # (C*D) x R
    sigma: np.ndarray             # C*D diagonal residual covariance (UBM variances)
    n_components: int
    ubm_ref: str = ""

    @property
    def rank(self):
        return self.t_matrix.shape[1]

    @property
    def feat_dim(self):
        return self.t_matrix.shape[0] // self.n_components


def _tv_precisions(t, sigma, c):
    r = t.shape[1]
    tw = (t / sigma[:, None]).reshape(c, -1, r)
    return np.einsum("cdr,cds->crs", t.reshape(c, -1, r), tw)


def _posterior(n_mat, f_mat, t, sigma, c):
    """Posterior precision L (U x R x R) and linear term b (U x R) of w."""
    r = t.shape[1]
    prec = _tv_precisions(t, sigma, c)
    lmat = np.eye(r)[None] + np.einsum("uc,crs->urs", n_mat, prec)
    b = (f_mat / sigma[None, :]) @ t
    return lmat, b


def train_tv(stats: Sequence[BwStats], ubm: GmmUbm, rank: int, iters: int = 5, seed: int = 0,
             on_iteration: Callable[[int, float], None] | None = None,
             init: np.ndarray | None = None) -> TotalVariability:
    """EM for the total-variability matrix with minimum-divergence re-estimation.

    The objective reported to ``on_iteration`` is the part of the data
    log-likelihood that depends on T, ``sum_u (b_u' L_u^-1 b_u - log|L_u|)/2``,
    evaluated before each update.
    """
    c, d = ubm.means.shape
    if rank >= c * d:
        raise DataError(f"rank {rank} must be below supervector size {c * d}")
    if len(stats) < rank:
        warnings.warn(f"train_tv: {len(stats)} utterances for rank {rank}", RuntimeWarning,
                      stacklevel=2)
    sigma = ubm.variances.ravel().astype(np.float64)
    n_mat = np.stack([s.n for s in stats])
    f_mat = np.stack([s.f.ravel() for s in stats])
    n_utt = n_mat.shape[0]
    if init is not None:
        t = np.array(init, dtype=np.float64)
    else:
        rng = np.random.default_rng(seed)
        t = rng.standard_normal((c * d, rank)) * 0.001
    for it in range(iters):
        lmat, b = _posterior(n_mat, f_mat, t, sigma, c)
        try:
            chol = np.linalg.cholesky(lmat)
        except np.linalg.LinAlgError:
            raise NumericalError("train_tv: singular posterior precision") from None
        linv = np.linalg.inv(lmat)
        w = np.einsum("urs,us->ur", linv, b)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        obj = float(0.5 * np.sum(np.einsum("ur,ur->u", b, w) - logdet))
        if not np.isfinite(obj):
            raise NumericalError("train_tv: non-finite objective")
        log.debug("TV iter %d objective %.6f", it, obj)
        if on_iteration is not None:
            on_iteration(it, obj)
        ew2 = linv + np.einsum("ur,us->urs", w, w)
        acc_a = np.einsum("uc,urs->crs", n_mat, ew2)
        acc_c = (f_mat.T @ w).reshape(c, d, rank)
        new_t = np.empty((c, d, rank))
        try:
            for k in range(c):
                new_t[k] = solve(acc_a[k], acc_c[k].T, assume_a="pos").T
        except np.linalg.LinAlgError:
            raise NumericalError("train_tv: singular accumulator; rank too high for the data") from None
        t = new_t.reshape(c * d, rank)
        # minimum divergence: map the empirical second moment of w back to I
        g = np.linalg.cholesky(ew2.sum(axis=0) / n_utt)
        t = t @ g
    return TotalVariability(t, sigma, c)


def tv_objective(stats: Sequence[BwStats], tv: TotalVariability) -> float:
    n_mat = np.stack([s.n for s in stats])
    f_mat = np.stack([s.f.ravel() for s in stats])
    lmat, b = _posterior(n_mat, f_mat, tv.t_matrix, tv.sigma, tv.n_components)
    w = np.linalg.solve(lmat, b[..., None])[..., 0]
    _, logdet = np.linalg.slogdet(lmat)
    return float(0.5 * np.sum(np.einsum("ur,ur->u", b, w) - logdet))


@register
@dataclass
class Embedding:
    STORE_VERSION = 1

    vector: np.ndarray
    profile_id: str = ""
    source: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("embedding must be a vector")
        if not np.all(np.isfinite(self.vector)):
            raise NumericalError(f"embedding {self.source!r} is not finite")

    @property
    def dim(self):
        return self.vector.size


@register
@dataclass
class EmbeddingSet:
    """Utterance embeddings of one profile, one row per id."""

    STORE_VERSION = 1

    ids: list
    matrix: np.ndarray
    profile_id: str = ""
    active_speech_s: np.ndarray | None = None

    def __post_init__(self):
        self.ids = list(self.ids)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DataError(f"embedding matrix {self.matrix.shape} does not match {len(self.ids)} ids")
        if self.active_speech_s is None:
            self.active_speech_s = np.zeros(len(self.ids))
        self._index = {u: i for i, u in enumerate(self.ids)}

    def __getitem__(self, utt_id) -> Embedding:
        return Embedding(self.matrix[self._index[utt_id]], self.profile_id, utt_id)

    def __contains__(self, utt_id):
        return utt_id in self._index

    def active_speech(self, utt_id) -> float:
        return float(self.active_speech_s[self._index[utt_id]])

    def __len__(self):
        return len(self.ids)


def extract_ivector(stats: BwStats, tv: TotalVariability, profile_id: str = "",
                    source: str = "") -> Embedding:
    """Posterior mean of the latent factor: (I + T'S^-1 N T)^-1 T'S^-1 f."""
    c = tv.n_components
    if stats.n.shape != (c,) or stats.f.size != tv.t_matrix.shape[0]:
        raise DataError(f"statistics shape {stats.f.shape} does not match TV model "
                        f"({c} x {tv.feat_dim})")
    lmat, b = _posterior(stats.n[None], stats.f.reshape(1, -1), tv.t_matrix, tv.sigma, c)
    w = cho_solve(cho_factor(lmat[0]), b[0])
    return Embedding(w, profile_id, source)


def average_embeddings(embeddings: Sequence[Embedding], source: str = "") -> Embedding:
    if not embeddings:
        raise DataError("cannot average an empty list of embeddings")
    pid = embeddings[0].profile_id
    dim = embeddings[0].dim
    for e in embeddings:
        if e.profile_id != pid:
            raise DataError(f"mixed profiles in average: {pid!r} vs {e.profile_id!r}")
        if e.dim != dim:
            raise DataError("embeddings differ in dimension")
    mean = np.mean(np.stack([e.vector for e in embeddings]), axis=0)
    return Embedding(mean, pid, source or embeddings[0].source)
