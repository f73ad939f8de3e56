"""LDA, whitening + length normalisation, PLDA training and LLR scoring."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh

from .embedding import Embedding
from .errors import DataError, NumericalError
from .store import register

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
EIG_FLOOR = 1e-8
LDA_REG = 1e-6
ZERO_NORM = 1e-10

HYPOTHESES = ("target", "nontarget", "unknown")
DOMAINS = ("target_domain", "attacker_domain", "cross_domain")


def _as_matrix(x):
    if isinstance(x, Embedding):
        return x.vector[None, :], True
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Embedding):
        return np.stack([e.vector for e in x]), False
    a = np.asarray(x, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def _group(labels):
    labels = list(labels)
    classes = sorted(set(labels))
    idx = {c: [] for c in classes}
    for i, lab in enumerate(labels):
        idx[lab].append(i)
    return classes, [np.array(idx[c]) for c in classes]


# ---------------------------------------------------------------------------
# LDA and whitening
# ---------------------------------------------------------------------------

@register
@dataclass
class LdaTransform:
    STORE_VERSION = 1

    projection: np.ndarray   # R x L
    input_mean: np.ndarray   # R

    def __call__(self, x):
        m, single = _as_matrix(x)
        y = (m - self.input_mean) @ self.projection
        return y[0] if single else y


def _scatters(x, groups):
    mu = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for g in groups:
        xc = x[g]
        mc = xc.mean(axis=0)
        r = xc - mc
        sw += r.T @ r
        sb += len(g) * np.outer(mc - mu, mc - mu)
    n = x.shape[0]
    return sw / n, sb / n, mu


def fisher_objective(projection, x, labels) -> float:
    """trace((P'S_w P)^-1 P'S_b P) -- the quantity LDA maximises."""
    _, groups = _group(labels)
    sw, sb, _ = _scatters(np.asarray(x, float), groups)
    a = projection.T @ sw @ projection
    b = projection.T @ sb @ projection
    return float(np.trace(np.linalg.solve(a, b)))


def train_lda(x, labels, dim: int) -> LdaTransform:
    x = np.asarray(x, dtype=np.float64)
    classes, groups = _group(labels)
    if len(classes) < 2:
        raise DataError("LDA needs at least two classes")
    if min(len(g) for g in groups) < 2:
        raise DataError("LDA needs at least two embeddings per class")
    max_dim = min(len(classes) - 1, x.shape[1])
    if dim > max_dim:
        warnings.warn(f"LDA dim {dim} clamped to {max_dim}", RuntimeWarning, stacklevel=2)
        dim = max_dim
    sw, sb, mu = _scatters(x, groups)
    eps = LDA_REG * np.trace(sw) / dim
    sw = sw + eps * np.eye(sw.shape[0])
    _, vecs = eigh(sb, sw)
    proj = vecs[:, ::-1][:, :dim]
    # fix the sign so retraining is reproducible
    pivot = np.argmax(np.abs(proj), axis=0)
    proj = proj * np.sign(proj[pivot, np.arange(dim)])
    return LdaTransform(proj, mu)


@register
@dataclass
class Whitener:
    STORE_VERSION = 1

    mean: np.ndarray
    whitening: np.ndarray

    def __call__(self, x, length_norm=True):
        m, single = _as_matrix(x)
        z = (m - self.mean) @ self.whitening
        if length_norm:
            norms = np.linalg.norm(z, axis=1)
            if np.any(norms < ZERO_NORM):
                raise DataError("cannot length-normalise a zero vector")
            z = z / norms[:, None]
        return z[0] if single else z


def train_whitener(x) -> Whitener:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, EIG_FLOOR)
    return Whitener(mu, vecs / np.sqrt(vals))


def apply_lda(x, lda: LdaTransform):
    return lda(x)


def apply_whiten_lnorm(x, whitener: Whitener):
    return whitener(x, length_norm=True)


# ---------------------------------------------------------------------------
# PLDA
# ---------------------------------------------------------------------------

@register
@dataclass
class PldaModel:
    """Gaussian PLDA.  ``between``/``within`` are the speaker and residual
    covariances; for the simplified variant ``between = V V'`` with V
    stored in ``loading``."""

    STORE_VERSION = 1

    variant: str
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loading: np.ndarray

    @property
    def dim(self):
        return self.mean.size

    @cached_property
    def _scoring(self):
        b, w = self.between, self.within
        tot = b + w
        tinv = np.linalg.inv(tot)
        cond = tot - b @ tinv @ b
        ainv = np.linalg.inv(cond)
        q = tinv - ainv
        p = tinv @ b @ ainv
        _, ld_t = np.linalg.slogdet(tot)
        sign, ld_c = np.linalg.slogdet(cond)
        if sign <= 0:
            raise NumericalError("PLDA: conditional covariance is not positive definite")
        const = 0.5 * (ld_t - ld_c)
        return 0.5 * (q + q.T), p, const

    def llr_matrix(self, enroll, test) -> np.ndarray:
        """LLRs of every enrollment row against every test row."""
        e, _ = _as_matrix(enroll)
        t, _ = _as_matrix(test)
        if e.shape[1] != self.dim or t.shape[1] != self.dim:
            raise DataError(f"PLDA dimension {self.dim} does not match inputs "
                            f"({e.shape[1]}, {t.shape[1]})")
        q, p, const = self._scoring
        e = e - self.mean
        t = t - self.mean
        qe = 0.5 * np.einsum("ij,jk,ik->i", e, q, e)
        qt = 0.5 * np.einsum("ij,jk,ik->i", t, q, t)
        return qe[:, None] + qt[None, :] + e @ p @ t.T + const


@dataclass
class TrialScore:
    enroll_ref: str
    test_ref: str
    llr: float
    hypothesis_label: str = "unknown"
    domain_tag: str = "target_domain"

    def __post_init__(self):
        if not np.isfinite(self.llr):
            raise NumericalError(f"non-finite LLR for {self.enroll_ref} vs {self.test_ref}")
        if self.hypothesis_label not in HYPOTHESES:
            raise ValueError(f"bad hypothesis label {self.hypothesis_label!r}")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"bad domain tag {self.domain_tag!r}")


def score_llr(model: PldaModel, enroll, test, enroll_ref="", test_ref="",
              hypothesis_label="unknown", domain_tag="target_domain") -> TrialScore:
    """Score a test embedding against an enrollment set.

    Multiple enrollment embeddings are averaged into one vector first.
    """
    e, _ = _as_matrix(enroll)
    if e.shape[0] == 0:
        raise DataError("empty enrollment set")
    t, _ = _as_matrix(test)
    if t.shape[0] != 1:
        raise DataError("score_llr takes a single test embedding")
    llr = float(model.llr_matrix(e.mean(axis=0), t[0])[0, 0])
    return TrialScore(enroll_ref, test_ref, llr, hypothesis_label, domain_tag)


def _sym(a):
    return 0.5 * (a + a.T)


def _floor_pd(a, name):
    a = _sym(a)
    vals, vecs = np.linalg.eigh(a)
    if vals.min() < EIG_FLOOR:
        warnings.warn(f"PLDA: {name} covariance not positive definite "
                      f"(min eigenvalue {vals.min():.3g}); flooring at {EIG_FLOOR}",
                      RuntimeWarning, stacklevel=3)
        vals = np.maximum(vals, EIG_FLOOR)
        a = _sym((vecs * vals) @ vecs.T)
    return a


def _logdet(a):
    sign, ld = np.linalg.slogdet(a)
    if sign <= 0:
        raise NumericalError("PLDA: matrix lost positive definiteness")
    return ld


def _speaker_stats(x, labels):
    _, groups = _group(labels)
    counts = np.array([len(g) for g in groups])
    sums = np.stack([x[g].sum(axis=0) for g in groups])
    scatter = np.stack([x[g].T @ x[g] for g in groups])
    return counts, sums, scatter


def train_plda(x, labels, variant: str = "two_cov", speaker_dim: int | None = None,
               iters: int = 10, seed: int = 0,
               on_iteration: Callable[[int, float], None] | None = None) -> PldaModel:
    """EM training of a two-covariance or simplified PLDA model.

    ``on_iteration(it, loglik)`` receives the total marginal
    log-likelihood of the training data before each M-step.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    if variant not in ("two_cov", "simplified"):
        raise ValueError(f"unknown PLDA variant {variant!r}")
    counts, sums, scatter = _speaker_stats(x, labels)
    if len(counts) < 2:
        raise DataError(f"PLDA needs at least two speakers, got {len(counts)}")
    if len(counts) < 10 or counts.min() < 2:
        warnings.warn(f"PLDA trained on {len(counts)} speakers with min {counts.min()} "
                      "utterances each; estimates will be poor", RuntimeWarning, stacklevel=2)
    if variant == "two_cov":
        return _train_two_cov(x, counts, sums, scatter, iters, on_iteration)
    s = x.shape[1] if speaker_dim is None else int(speaker_dim)
    return _train_simplified(x, counts, sums, scatter, s, iters, seed, on_iteration)


def _train_two_cov(x, counts, sums, scatter, iters, on_iteration):
    n_total, d = x.shape
    n_spk = counts.size
    mu = x.mean(axis=0)
    means = sums / counts[:, None]
    within = (scatter.sum(axis=0) - (means.T * counts) @ means) / n_total
    between = np.cov(means.T, bias=True).reshape(d, d)
    within = _floor_pd(within, "within-class")
    between = _floor_pd(between, "between-class")
    sizes = np.unique(counts)
    for it in range(iters):
        binv = np.linalg.inv(between)
        winv = np.linalg.inv(within)
        ld_w = _logdet(within)
        ld_b = _logdet(between)
        post_cov = {}
        ld_post = {}
        for n in sizes:
            prec = binv + n * winv
            post_cov[n] = np.linalg.inv(prec)
            ld_post[n] = _logdet(prec)
        yhat = np.empty((n_spk, d))
        loglik = 0.0
        acc_yy = np.zeros((d, d))
        acc_w = np.zeros((d, d))
        for s in range(n_spk):
            n = counts[s]
            cov = post_cov[n]
            y = cov @ (binv @ mu + winv @ sums[s])
            yhat[s] = y
            resid = scatter[s] - np.outer(y, sums[s]) - np.outer(sums[s], y) + n * np.outer(y, y)
            dm = y - mu
            # log p(X) = log p(X|y) + log p(y) - log p(y|X), evaluated at the posterior mean
            loglik += (-0.5 * n * (d * LOG2PI + ld_w) - 0.5 * np.sum(winv * resid)
                       - 0.5 * (d * LOG2PI + ld_b + dm @ binv @ dm)
                       + 0.5 * (d * LOG2PI - ld_post[n]))
            acc_yy += cov + np.outer(y, y)
            acc_w += resid + n * cov
        if not np.isfinite(loglik):
            raise NumericalError("PLDA EM: non-finite log-likelihood")
        log.debug("PLDA two_cov iter %d loglik %.6f", it, loglik)
        if on_iteration is not None:
            on_iteration(it, float(loglik))
        mu = yhat.mean(axis=0)
        between = _floor_pd(acc_yy / n_spk - np.outer(mu, mu), "between-class")
        within = _floor_pd(acc_w / n_total, "within-class")
    return PldaModel("two_cov", mu, between, within, np.zeros((d, 0)))


def _train_simplified(x, counts, sums, scatter, s_dim, iters, seed, on_iteration):
    n_total, d = x.shape
    n_spk = counts.size
    if not 1 <= s_dim <= d:
        raise DataError(f"speaker subspace dim {s_dim} must be in [1, {d}]")
    mu = x.mean(axis=0)
    f = sums - counts[:, None] * mu
    means = sums / counts[:, None]
    within = (scatter.sum(axis=0) - (means.T * counts) @ means) / n_total
    sigma = _floor_pd(within, "residual")
    bc = np.cov(means.T, bias=True).reshape(d, d)
    vals, vecs = np.linalg.eigh(bc)
    vals, vecs = vals[::-1][:s_dim], vecs[:, ::-1][:, :s_dim]
    v = vecs * np.sqrt(np.maximum(vals, 0.0))
    weak = vals <= EIG_FLOOR
    if np.any(weak):
        rng = np.random.default_rng(seed)
        v[:, weak] = rng.standard_normal((d, int(weak.sum()))) * 1e-3
    total_scatter = scatter.sum(axis=0) - n_total * np.outer(mu, mu)
    sizes = np.unique(counts)
    for it in range(iters):
        sinv = np.linalg.inv(sigma)
        ld_s = _logdet(sigma)
        vsv = v.T @ sinv @ v
        post_cov = {}
        ld_post = {}
        for n in sizes:
            prec = np.eye(s_dim) + n * vsv
            post_cov[n] = np.linalg.inv(prec)
            ld_post[n] = _logdet(prec)
        zhat = np.empty((n_spk, s_dim))
        acc_zz = np.zeros((s_dim, s_dim))
        loglik = 0.0
        for s in range(n_spk):
            n = counts[s]
            cov = post_cov[n]
            z = cov @ (v.T @ sinv @ f[s])
            zhat[s] = z
            acc_zz += n * (cov + np.outer(z, z))
            m = mu + v @ z
            resid = scatter[s] - np.outer(m, sums[s]) - np.outer(sums[s], m) + n * np.outer(m, m)
            loglik += (-0.5 * n * (d * LOG2PI + ld_s) - 0.5 * np.sum(sinv * resid)
                       - 0.5 * (s_dim * LOG2PI + z @ z)
                       + 0.5 * (s_dim * LOG2PI - ld_post[n]))
        if not np.isfinite(loglik):
            raise NumericalError("PLDA EM: non-finite log-likelihood")
        log.debug("PLDA simplified iter %d loglik %.6f", it, loglik)
        if on_iteration is not None:
            on_iteration(it, float(loglik))
        fz = f.T @ zhat
        v = np.linalg.solve(acc_zz.T, fz.T).T
        sigma = _floor_pd((total_scatter - v @ fz.T) / n_total, "residual")
    return PldaModel("simplified", mu, _sym(v @ v.T), sigma, v)


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def compute_eer(target_scores, nontarget_scores) -> tuple[float, float]:
    """Equal error rate with linear interpolation on the ROC.

    Operating points are taken at every distinct score (accept iff
    score >= threshold, tied scores grouped) plus a final reject-all
    point.  Returns ``(eer, threshold)``; when the crossing falls in the
    reject-all segment the threshold is the largest score.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise DataError("EER needs at least one target and one non-target score")
    thr = np.unique(np.concatenate([tar, non]))
    frr = np.append(np.searchsorted(tar, thr, side="left"), tar.size) / tar.size
    far = np.append(non.size - np.searchsorted(non, thr, side="left"), 0) / non.size
    k = int(np.argmax(frr >= far))
    if frr[k] == far[k]:
        return float(far[k]), float(thr[min(k, thr.size - 1)])
    d0 = far[k - 1] - frr[k - 1]
    d1 = far[k] - frr[k]
    alpha = d0 / (d0 - d1)
    eer = far[k - 1] + alpha * (far[k] - far[k - 1])
    if k < thr.size:
        t = thr[k - 1] + alpha * (thr[k] - thr[k - 1])
    else:
        t = thr[k - 1]
    return float(eer), float(t)
