"""System profiles and the trained i-vector/PLDA pipeline built from them.

Two profiles mirror the two verification systems of the experiment:

* profile ``A`` (the attacker's public system): 60-D MFCC+deltas with
  RASTA/CMVN, i-vectors, LDA, simplified PLDA;
* profile ``B`` (the attacked system): 30-D MFCC with sliding CMN,
  an independently trained i-vector extractor, LDA, two-covariance PLDA.
"""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import backend, embedding
from .backend import LdaTransform, PldaModel, Whitener
from .corpus import Manifest, UtteranceRecord, read_audio, resample
from .embedding import BwStats, Embedding, EmbeddingSet, GmmUbm, TotalVariability
from .errors import DataError
from .frontend import (FeatureMatrix, FrontendConfig, extract_features, profile_a_frontend,
                       profile_b_frontend)
from .store import Store, register

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SystemProfile:
    profile_id: str
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    ubm_components: int = 256
    tv_rank: int = 400
    lda_dim: int = 250
    plda_variant: str = "simplified"
    plda_dim: int | None = 200
    train_partition: str = ""
    ubm_iters: int = 5
    tv_iters: int = 5
    plda_iters: int = 10
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemProfile":
        d = dict(d)
        fe = d.pop("frontend", {})
        if isinstance(fe, dict):
            fe = FrontendConfig(**fe)
        return cls(frontend=fe, **d)


def profile_a(**overrides) -> SystemProfile:
    p = SystemProfile("A", profile_a_frontend(), 256, 400, 250, "simplified", 200, "a")
    return replace(p, **overrides)


def profile_b(**overrides) -> SystemProfile:
    p = SystemProfile("B", profile_b_frontend(), 256, 512, 200, "two_cov", None, "b", seed=1)
    return replace(p, **overrides)


def desk_scale(profile: SystemProfile, components=32, rank=None, lda_dim=None,
               plda_dim=None) -> SystemProfile:
    """Shrink model sizes for laptop-scale corpora, keeping A/B proportions."""
    rank = rank if rank is not None else max(8, profile.tv_rank // 10)
    lda_dim = lda_dim if lda_dim is not None else max(4, profile.lda_dim * 2 // 25)
    if plda_dim is None and profile.plda_dim is not None:
        plda_dim = max(2, int(round(lda_dim * profile.plda_dim / profile.lda_dim)))
    return replace(profile, ubm_components=components, tv_rank=rank, lda_dim=lda_dim,
                   plda_dim=plda_dim)


def check_distinct(a: SystemProfile, b: SystemProfile):
    if a.frontend == b.frontend:
        raise DataError("profiles must differ in front-end configuration")
    if (a.lda_dim, a.plda_variant, a.plda_dim) == (b.lda_dim, b.plda_variant, b.plda_dim):
        raise DataError("profiles must differ in back-end configuration")


@register
@dataclass
class StoredProfile:
    STORE_VERSION = 1

    profile_json: str


# ---------------------------------------------------------------------------
# per-utterance jobs (top level so they pickle into worker processes)
# ---------------------------------------------------------------------------

def load_16k(path, rate=16000):
    audio = read_audio(path)
    return resample(audio, rate) if audio.sample_rate_hz != rate else audio


def _features_job(args) -> FeatureMatrix:
    path, cfg = args
    return extract_features(load_16k(path, cfg.sample_rate_hz), cfg)


def _stats_job(args) -> tuple[BwStats, float]:
    path, cfg, ubm = args
    feat = extract_features(load_16k(path, cfg.sample_rate_hz), cfg)
    return embedding.accumulate_bw(feat, ubm), float(feat.speech_flags.sum() * cfg.hop_ms / 1000.0)


def ordered_map(fn, items, workers=1):
    """map() that optionally fans out to processes; output order = input order."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------------
# the trained system
# ---------------------------------------------------------------------------

ARTIFACTS = ("ubm", "tv", "lda", "whitener", "plda")


@dataclass
class AsvSystem:
    profile: SystemProfile
    ubm: GmmUbm
    tv: TotalVariability
    lda: LdaTransform
    whitener: Whitener
    plda: PldaModel

    @property
    def profile_id(self):
        return self.profile.profile_id

    def features(self, audio) -> FeatureMatrix:
        if audio.sample_rate_hz != self.profile.frontend.sample_rate_hz:
            audio = resample(audio, self.profile.frontend.sample_rate_hz)
        return extract_features(audio, self.profile.frontend)

    def ivector(self, feat: FeatureMatrix, source="") -> Embedding:
        stats = embedding.accumulate_bw(feat, self.ubm)
        return embedding.extract_ivector(stats, self.tv, self.profile_id, source)

    def project(self, x) -> np.ndarray:
        """LDA -> centre/whiten -> length-normalise."""
        if isinstance(x, Embedding):
            x = x.vector
        return self.whitener(self.lda(x))

    def score(self, enroll: Sequence, test) -> float:
        """LLR of a raw test i-vector against raw enrollment i-vectors."""
        e = [self.project(v) for v in enroll]
        return backend.score_llr(self.plda, e, self.project(test)).llr

    def score_matrix(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        return self.plda.llr_matrix(self.project(np.atleast_2d(enroll)),
                                    self.project(np.atleast_2d(test)))

    # persistence ---------------------------------------------------------
    def save(self, store: Store) -> dict[str, str]:
        pid = self.profile_id
        digests = {name: store.put(f"{pid}/{name}", getattr(self, name)) for name in ARTIFACTS}
        store.put(f"{pid}/profile", StoredProfile(self.profile.to_json()))
        return digests

    @classmethod
    def load(cls, store: Store, profile_id: str, profile: SystemProfile | None = None):
        if profile is None:
            stored = store.get(f"{profile_id}/profile")
            profile = SystemProfile.from_dict(json.loads(stored.profile_json))
        parts = {name: store.get(f"{profile_id}/{name}") for name in ARTIFACTS}
        return cls(profile, **parts)


def training_utterances(manifest: Manifest, profile: SystemProfile) -> list[UtteranceRecord]:
    utts = [u for u in manifest.utterances
            if u.partition == profile.train_partition and u.quality_ok]
    if not utts:
        raise DataError(f"manifest has no utterances in training partition "
                        f"{profile.train_partition!r} for profile {profile.profile_id}")
    return utts


def train_system(profile: SystemProfile, manifest: Manifest, workers: int = 1,
                 on_log: Callable[[str, int, float], None] | None = None) -> AsvSystem:
    """Train UBM, TV, LDA, whitener and PLDA on the profile's partition.

    ``on_log(stage, iteration, objective)`` receives every per-iteration
    training objective.
    """
    utts = training_utterances(manifest, profile)
    paths = [manifest.resolve(u) for u in utts]
    labels = [u.speaker_id for u in utts]
    cfg = profile.frontend
    emit = on_log or (lambda *a: None)

    feats = ordered_map(_features_job, [(p, cfg) for p in paths], workers)
    log.info("profile %s: %d training utterances, %d speech frames", profile.profile_id,
             len(feats), sum(int(f.speech_flags.sum()) for f in feats))
    ubm = embedding.train_ubm(feats, profile.ubm_components, profile.ubm_iters, profile.seed,
                              on_iteration=lambda c, it, ll: emit(f"ubm[C={c}]", it, ll))
    stats = [embedding.accumulate_bw(f, ubm) for f in feats]
    tv = embedding.train_tv(stats, ubm, profile.tv_rank, profile.tv_iters, profile.seed,
                            on_iteration=lambda it, obj: emit("tv", it, obj))
    tv.ubm_ref = f"{profile.profile_id}/ubm"
    ivecs = np.stack([embedding.extract_ivector(s, tv).vector for s in stats])
    lda = backend.train_lda(ivecs, labels, profile.lda_dim)
    projected = lda(ivecs)
    whitener = backend.train_whitener(projected)
    normed = whitener(projected)
    plda_dim = profile.plda_dim
    if plda_dim is not None and plda_dim > normed.shape[1]:
        warnings.warn(f"PLDA speaker dim {plda_dim} clamped to {normed.shape[1]}", RuntimeWarning,
                      stacklevel=2)
        plda_dim = normed.shape[1]
    plda = backend.train_plda(normed, labels, profile.plda_variant, plda_dim,
                              profile.plda_iters, profile.seed,
                              on_iteration=lambda it, ll: emit("plda", it, ll))
    return AsvSystem(profile, ubm, tv, lda, whitener, plda)


def extract_embeddings(system: AsvSystem, manifest: Manifest,
                       utterances: Sequence[UtteranceRecord] | None = None,
                       workers: int = 1) -> EmbeddingSet:
    """Raw i-vectors (plus active-speech seconds) for the given utterances."""
    utts = list(manifest.utterances if utterances is None else utterances)
    jobs = [(manifest.resolve(u), system.profile.frontend, system.ubm) for u in utts]
    results = ordered_map(_stats_job, jobs, workers)
    vecs, active = [], []
    for u, (st, act) in zip(utts, results):
        vecs.append(embedding.extract_ivector(st, system.tv).vector)
        active.append(act)
    mat = np.stack(vecs) if vecs else np.zeros((0, system.tv.rank))
    return EmbeddingSet([u.utterance_id for u in utts], mat, system.profile_id,
                        np.asarray(active, dtype=np.float64))


def speaker_embedding(emb: EmbeddingSet, utterance_ids: Sequence[str], source="") -> Embedding:
    """Average raw i-vector over a set of utterances."""
    return embedding.average_embeddings([emb[u] for u in utterance_ids], source)


def heldout_utterances(manifest: Manifest, profile: SystemProfile) -> list[UtteranceRecord]:
    """Target utterances outside the profile's training partition."""
    roles = {s.speaker_id: s.role for s in manifest.speakers}
    return [u for u in manifest.utterances
            if roles.get(u.speaker_id) == "target" and u.partition != profile.train_partition
            and u.quality_ok]


def heldout_eer(system: AsvSystem, manifest: Manifest, emb: EmbeddingSet | None = None,
                workers: int = 1) -> dict:
    """EER over all single-utterance pairs of held-out target speakers."""
    utts = heldout_utterances(manifest, system.profile)
    if len({u.speaker_id for u in utts}) < 2:
        raise DataError(f"need held-out utterances from at least 2 speakers for profile "
                        f"{system.profile_id}")
    if emb is None or any(u.utterance_id not in emb for u in utts):
        emb = extract_embeddings(system, manifest, utts, workers)
    x = system.project(np.stack([emb[u.utterance_id].vector for u in utts]))
    scores = system.plda.llr_matrix(x, x)
    labels = np.array([u.speaker_id for u in utts])
    iu = np.triu_indices(len(utts), 1)
    same = (labels[:, None] == labels[None, :])[iu]
    s = scores[iu]
    eer, thr = backend.compute_eer(s[same], s[~same])
    return {"profile_id": system.profile_id, "eer": float(eer), "threshold": float(thr),
            "n_target": int(same.sum()), "n_nontarget": int((~same).sum()),
            "n_utterances": len(utts)}
