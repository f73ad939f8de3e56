"""Acoustic front-end: MFCCs, deltas, RASTA, energy SAD and normalisation."""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import lfilter

from .corpus import AudioBuffer
from .errors import DataError
from .store import register

MEL_FLOOR = 1e-10
VAR_FLOOR = 1e-10
ENERGY_EPS = 1e-20

# RASTA band-pass: FIR slope (2, 1, 0, -1, -2)/6 made causal, single pole at 0.94
RASTA_B = np.array([2.0, 1.0, 0.0, -1.0, -2.0]) / 6.0
RASTA_A = np.array([1.0, -0.94])


@dataclass(frozen=True)
class FrontendConfig:
    n_mfcc: int = 20
    n_mel_filters: int = 20
    include_deltas: bool = True
    rasta: bool = True
    norm: str = "cmvn"
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    preemphasis: float = 0.97
    sliding_window_frames: int = 300
    delta_window: int = 2
    sample_rate_hz: int = 16000
    n_fft: int = 512
    sad_dynamic_range_db: float = 30.0
    sad_floor_db: float | None = -60.0

    def __post_init__(self):
        if self.n_mfcc > self.n_mel_filters:
            raise ValueError("n_mfcc must not exceed n_mel_filters")
        if not (self.frame_ms > self.hop_ms > 0):
            raise ValueError("need frame_ms > hop_ms > 0")
        if self.norm not in ("cmvn", "sliding_cmn"):
            raise ValueError(f"unknown normalisation {self.norm!r}")
        if self.frame_len > self.n_fft:
            raise ValueError("n_fft shorter than the analysis frame")

    @property
    def frame_len(self):
        return int(round(self.frame_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_len(self):
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def output_dim(self):
        return self.n_mfcc * (3 if self.include_deltas else 1)


def profile_a_frontend() -> FrontendConfig:
    """20 static MFCCs from 20 filters + deltas, RASTA, SAD, CMVN (60-D)."""
    return FrontendConfig()


def profile_b_frontend() -> FrontendConfig:
    """30 MFCCs from 30 filters, no deltas, sliding CMN, SAD (30-D)."""
    return FrontendConfig(n_mfcc=30, n_mel_filters=30, include_deltas=False, rasta=False,
                          norm="sliding_cmn")


@register
@dataclass
class FeatureMatrix:
    STORE_VERSION = 1

    frames: np.ndarray
    speech_flags: np.ndarray
    frame_times_s: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        self.speech_flags = np.asarray(self.speech_flags, dtype=bool)
        self.frame_times_s = np.asarray(self.frame_times_s, dtype=np.float64)
        t = self.frames.shape[0]
        if self.speech_flags.shape != (t,) or self.frame_times_s.shape != (t,):
            raise ValueError("speech_flags and frame_times_s must have one entry per frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains NaN/Inf")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    def speech(self) -> np.ndarray:
        return self.frames[self.speech_flags]

    def with_frames(self, frames) -> "FeatureMatrix":
        return FeatureMatrix(frames, self.speech_flags.copy(), self.frame_times_s.copy())


# ---------------------------------------------------------------------------
# framing and filterbank
# ---------------------------------------------------------------------------

def n_frames_for(n_samples, frame_len, hop):
    if n_samples < frame_len:
        return 0
    return 1 + (n_samples - frame_len) // hop


def frame_signal(x, frame_len, hop):
    n = n_frames_for(len(x), frame_len, hop)
    if n == 0:
        raise DataError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def frame_times(n_frames, frame_len, hop, sr):
    return (np.arange(n_frames) * hop + frame_len / 2.0) / sr


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, sr, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters evaluated on the rfft bin frequencies."""
    fmax = sr / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_filters, bins.size))
    for m in range(n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB_CACHE: dict = {}


def _fb(cfg: FrontendConfig):
    key = (cfg.n_mel_filters, cfg.n_fft, cfg.sample_rate_hz)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def _check_rate(audio, cfg):
    if audio.sample_rate_hz != cfg.sample_rate_hz:
        raise DataError(f"front-end expects {cfg.sample_rate_hz} Hz audio, got {audio.sample_rate_hz} Hz"
                        " (resample first)")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compute_mfcc(audio: AudioBuffer, config: FrontendConfig) -> FeatureMatrix:
    """Static MFCCs c0..c{n_mfcc-1}.  Speech flags are all set."""
    _check_rate(audio, config)
    x = audio.samples
    x = np.append(x[0], x[1:] - config.preemphasis * x[:-1])
    frames = frame_signal(x, config.frame_len, config.hop_len)
    frames = frames * np.hamming(config.frame_len)
    power = np.abs(rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = power @ _fb(config).T
    logmel = np.log(np.maximum(mel, MEL_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :config.n_mfcc]
    t = ceps.shape[0]
    return FeatureMatrix(ceps, np.ones(t, bool),
                         frame_times(t, config.frame_len, config.hop_len, config.sample_rate_hz))


def append_deltas(feat: FeatureMatrix, window: int = 2) -> FeatureMatrix:
    """Stack static, delta and delta-delta blocks (regression deltas, edge replication)."""
    t = feat.n_frames
    if t < 2 * window + 1:
        raise DataError(f"need at least {2 * window + 1} frames for deltas, got {t}")
    d1 = _regression_delta(feat.frames, window)
    d2 = _regression_delta(d1, window)
    return feat.with_frames(np.hstack([feat.frames, d1, d2]))


def _regression_delta(x, window):
    t = x.shape[0]
    padded = np.pad(x, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x)
    for k in range(1, window + 1):
        out += k * (padded[window + k:window + k + t] - padded[window - k:window - k + t])
    return out / denom


def rasta_filter(feat: FeatureMatrix) -> FeatureMatrix:
    """Band-pass each feature trajectory along time (zero initial state)."""
    return feat.with_frames(lfilter(RASTA_B, RASTA_A, feat.frames, axis=0))


def frame_energy_db(audio: AudioBuffer, frame_len, hop):
    frames = frame_signal(audio.samples, frame_len, hop)
    return 10.0 * np.log10(np.mean(frames ** 2, axis=1) + ENERGY_EPS)


def sad_energy(audio: AudioBuffer, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Energy speech activity detector on the raw (un-emphasised) signal.

    A frame is speech iff its log energy exceeds
    ``max(max_energy - dynamic_range_db, floor_db)``; energies are in dB
    relative to a full-scale square wave.  ``sad_floor_db=None`` disables
    the absolute floor.
    """
    _check_rate(audio, config)
    e = frame_energy_db(audio, config.frame_len, config.hop_len)
    thr = e.max() - config.sad_dynamic_range_db
    if config.sad_floor_db is not None:
        thr = max(thr, config.sad_floor_db)
    return e > thr


def cmvn(feat: FeatureMatrix) -> FeatureMatrix:
    speech = feat.speech()
    if speech.shape[0] < 2:
        raise DataError("CMVN needs at least two speech frames")
    mu = speech.mean(axis=0)
    var = speech.var(axis=0)
    low = var < VAR_FLOOR
    if np.any(low):
        warnings.warn(f"CMVN: {int(low.sum())} zero-variance dimension(s) floored", RuntimeWarning,
                      stacklevel=2)
        var = np.where(low, np.inf, var)
    return feat.with_frames((feat.frames - mu) / np.sqrt(var))


def sliding_cmn(feat: FeatureMatrix, window_frames: int = 300) -> FeatureMatrix:
    """Subtract a centred running mean.

    Near the edges the window is shifted (not shrunk) so that it always
    spans ``min(window_frames, T)`` frames.
    """
    x = feat.frames
    t = x.shape[0]
    w = min(window_frames, t)
    start = np.clip(np.arange(t) - window_frames // 2, 0, t - w)
    end = start + w
    cs = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    means = (cs[end] - cs[start]) / w
    return feat.with_frames(x - means)


def extract_features(audio: AudioBuffer, config: FrontendConfig) -> FeatureMatrix:
    """Full front-end chain for one profile.

    cmvn profiles: MFCC -> RASTA -> deltas -> SAD -> CMVN.
    sliding profiles: MFCC -> sliding CMN -> SAD.
    """
    feat = compute_mfcc(audio, config)
    if config.rasta:
        feat = rasta_filter(feat)
    if config.include_deltas:
        feat = append_deltas(feat, config.delta_window)
    if config.norm == "sliding_cmn":
        feat = sliding_cmn(feat, config.sliding_window_frames)
    feat = FeatureMatrix(feat.frames, sad_energy(audio, config), feat.frame_times_s)
    if config.norm == "cmvn":
        feat = cmvn(feat)
    return feat


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"ASVF"


def write_features(path, feat: FeatureMatrix):
    """Binary layout: magic, version, dims, count, dtype tag, then frames/flags/times."""
    hdr = _FEAT_MAGIC + struct.pack("<III8s", 1, feat.dim, feat.n_frames, b"<f8".ljust(8))
    body = (feat.frames.astype("<f8").tobytes() + feat.speech_flags.astype(np.uint8).tobytes()
            + feat.frame_times_s.astype("<f8").tobytes())
    Path(path).write_bytes(hdr + body)


def read_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != _FEAT_MAGIC:
        raise DataError(f"{path}: not a feature file")
    ver, dims, count, tag = struct.unpack("<III8s", raw[4:24])
    if ver != 1 or tag.strip() != b"<f8":
        raise DataError(f"{path}: unsupported feature file version/dtype")
    off = 24
    n = dims * count * 8
    frames = np.frombuffer(raw[off:off + n], "<f8").reshape(count, dims)
    off += n
    flags = np.frombuffer(raw[off:off + count], np.uint8).astype(bool)
    off += count
    times = np.frombuffer(raw[off:off + 8 * count], "<f8")
    if times.size != count:
        raise DataError(f"{path}: truncated feature file")
    return FeatureMatrix(frames.copy(), flags, times.copy())


def write_features_csv(path, feat: FeatureMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "speech"] + [f"c{i}" for i in range(feat.dim)])
        for t, s, row in zip(feat.frame_times_s, feat.speech_flags, feat.frames):
            w.writerow([repr(float(t)), int(s)] + [repr(float(v)) for v in row])
