"""Prosodic and formant measurements of mimicked speech.

* F0 by windowed autocorrelation with Viterbi path selection (the
  classic Praat "ac" tracker: candidate strengths normalised by the
  window autocorrelation, octave cost, octave-jump and voicing
  transition costs);
* speaking rate from syllable nuclei (intensity peaks that are voiced and
  separated by dips);
* F1-F3 from Burg LPC roots, DTW alignment of two utterances and the mean
  absolute formant difference over mutually reliable aligned frames.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .corpus import AudioBuffer, resample
from .errors import DataError
from .frontend import FeatureMatrix, FrontendConfig, extract_features, frame_times, n_frames_for


# ---------------------------------------------------------------------------
# F0
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PitchConfig:
    floor_hz: float = 75.0
    ceiling_hz: float = 600.0
    timestep_s: float = 0.010
    silence_threshold: float = 0.03
    voicing_threshold: float = 0.45
    octave_cost: float = 0.01
    octave_jump_cost: float = 0.35
    vuv_cost: float = 0.14
    max_candidates: int = 15
    periods_per_window: float = 3.0

    def __post_init__(self):
        if not 0 < self.floor_hz < self.ceiling_hz:
            raise DataError(f"pitch floor {self.floor_hz} must be below ceiling {self.ceiling_hz}")
        if min(self.octave_cost, self.octave_jump_cost, self.vuv_cost) < 0:
            raise DataError("pitch path costs must be non-negative")
        if self.max_candidates < 2 or self.timestep_s <= 0:
            raise DataError("need max_candidates >= 2 and a positive time step")

    @property
    def window_s(self):
        return self.periods_per_window / self.floor_hz


def pitch_config_for(gender: str, **kw) -> PitchConfig:
    """Gender-specific search range: male 75-200 Hz, female 100-300 Hz."""
    lo, hi = {"male": (75.0, 200.0), "female": (100.0, 300.0)}.get(gender, (75.0, 300.0))
    return PitchConfig(floor_hz=lo, ceiling_hz=hi, **kw)


@dataclass
class PitchTrack:
    frame_times_s: np.ndarray
    f0_hz: np.ndarray  # NaN marks unvoiced frames
    strengths: np.ndarray

    @property
    def voiced(self):
        return np.isfinite(self.f0_hz)

    def voiced_at(self, times):
        """Voicing of the frames nearest to each query time (False outside)."""
        times = np.asarray(times, dtype=np.float64)
        if len(self.frame_times_s) == 0:
            return np.zeros(times.shape, dtype=bool)
        dt = self.frame_times_s[1] - self.frame_times_s[0] if len(self.frame_times_s) > 1 else 1.0
        idx = np.rint((times - self.frame_times_s[0]) / dt).astype(int)
        ok = (idx >= 0) & (idx < len(self.frame_times_s))
        out = np.zeros(times.shape, dtype=bool)
        out[ok] = self.voiced[idx[ok]]
        return out


def _window_autocorr(w, nfft):
    r = np.fft.irfft(np.abs(np.fft.rfft(w, nfft)) ** 2, nfft)
    return r / r[0]


def _frame_candidates(seg, win, r_win, nfft, fs, cfg, min_lag, max_lag):
    """Voiced candidates (freq, strength) for one frame, strongest first."""
    seg = (seg - seg.mean()) * win
    r = np.fft.irfft(np.abs(np.fft.rfft(seg, nfft)) ** 2, nfft)[:max_lag + 2]
    if r[0] <= 0:
        return []
    r = r / r[0] / r_win[:max_lag + 2]
    lags = np.arange(min_lag, max_lag + 1)
    mid = r[lags]
    peaks = lags[(mid > 0.5 * cfg.voicing_threshold) & (mid > r[lags - 1]) & (mid >= r[lags + 1])]
    cands = []
    for i in peaks:
        a, b, c = r[i - 1], r[i], r[i + 1]
        den = a - 2 * b + c
        d = 0.5 * (a - c) / den if den != 0 else 0.0
        lag = i + d
        strength = b - 0.25 * (a - c) * d
        if strength > 1:
            strength = 1.0 / strength
        f = fs / lag
        if cfg.floor_hz <= f <= cfg.ceiling_hz:
            cands.append((f, strength))
    # keep the locally best, favouring higher frequencies like the original
    cands.sort(key=lambda fs_: -(fs_[1] + cfg.octave_cost * np.log2(fs_[0] / cfg.floor_hz)))
    return cands[:cfg.max_candidates - 1]


def track_f0(audio: AudioBuffer, config: PitchConfig = PitchConfig()) -> PitchTrack:
    cfg = config
    fs = audio.sample_rate_hz
    x = np.asarray(audio.samples, dtype=np.float64)
    dur = len(x) / fs
    if dur < cfg.window_s:
        raise DataError(f"audio of {dur:.3f}s is shorter than the pitch window {cfg.window_s:.3f}s")
    nwin = int(round(cfg.window_s * fs))
    n_frames = int(np.floor((dur - cfg.window_s) / cfg.timestep_s)) + 1
    t0 = 0.5 * (dur - (n_frames - 1) * cfg.timestep_s)
    times = t0 + cfg.timestep_s * np.arange(n_frames)

    win = np.hanning(nwin + 2)[1:-1]
    nfft = 1 << int(np.ceil(np.log2(2 * nwin)))
    r_win = _window_autocorr(win, nfft)
    min_lag = max(2, int(np.floor(fs / cfg.ceiling_hz)))
    max_lag = min(int(np.ceil(fs / cfg.floor_hz)), nwin // 2 + nwin // 4, nfft // 2 - 2)

    global_peak = float(np.max(np.abs(x - x.mean())))
    starts = np.clip(np.rint(times * fs).astype(int) - nwin // 2, 0, len(x) - nwin)

    # per-frame candidate lists; index 0 is the unvoiced candidate
    freqs, strengths, deltas = [], [], []
    vt = cfg.voicing_threshold
    for s in starts:
        seg = x[s:s + nwin]
        local_peak = float(np.max(np.abs(seg - seg.mean())))
        if global_peak == 0:
            unv = vt + 2.0
            cands = []
        else:
            unv = vt + max(0.0, 2.0 - (local_peak / global_peak) / (cfg.silence_threshold / (1.0 + vt)))
            cands = _frame_candidates(seg, win, r_win, nfft, fs, cfg, min_lag, max_lag) if local_peak > 0 else []
        f = [np.nan] + [c[0] for c in cands]
        st = [unv] + [c[1] for c in cands]
        dl = [unv] + [c[1] - cfg.octave_cost * np.log2(cfg.ceiling_hz / c[0]) for c in cands]
        freqs.append(np.array(f))
        strengths.append(np.array(st))
        deltas.append(np.array(dl))

    path = _viterbi(freqs, deltas, cfg)
    f0 = np.array([freqs[t][k] for t, k in enumerate(path)])
    strength = np.array([strengths[t][k] for t, k in enumerate(path)])
    return PitchTrack(times, f0, strength)


def _transition(prev_f, cur_f, cfg, scale):
    pv = np.isfinite(prev_f)[:, None]
    cv = np.isfinite(cur_f)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = cfg.octave_jump_cost * np.abs(np.log2(prev_f[:, None] / cur_f[None, :]))
    cost = np.where(pv & cv, jump, np.where(pv ^ cv, cfg.vuv_cost, 0.0))
    return cost * scale


def _viterbi(freqs, deltas, cfg):
    scale = 0.01 / cfg.timestep_s
    score = deltas[0].copy()
    back = []
    for t in range(1, len(freqs)):
        total = score[:, None] - _transition(freqs[t - 1], freqs[t], cfg, scale)
        arg = np.argmax(total, axis=0)
        back.append(arg)
        score = total[arg, np.arange(total.shape[1])] + deltas[t]
    k = int(np.argmax(score))
    path = [k]
    for arg in reversed(back):
        k = int(arg[k])
        path.append(k)
    return path[::-1]


def f0_summary(track: PitchTrack) -> tuple[float, float]:
    """Median and population standard deviation over voiced frames."""
    v = track.f0_hz[track.voiced]
    if v.size == 0:
        raise DataError("pitch track has no voiced frames")
    return float(np.median(v)), float(np.std(v))


# ---------------------------------------------------------------------------
# speaking rate
# ---------------------------------------------------------------------------

INTENSITY_WIN_S = 0.064
INTENSITY_HOP_S = 0.016
NUCLEUS_DIP_DB = 2.0
PAUSE_DB_BELOW_MAX = 25.0
MIN_PAUSE_S = 0.3


@dataclass(frozen=True)
class SpeakingRate:
    rate: float  # nuclei per second of total duration
    count: int
    phonation_time_s: float
    duration_s: float


def intensity_db(audio: AudioBuffer, win_s=INTENSITY_WIN_S, hop_s=INTENSITY_HOP_S):
    """Windowed mean-square level in dB and frame centre times."""
    fs = audio.sample_rate_hz
    x = np.asarray(audio.samples, dtype=np.float64)
    n = int(round(win_s * fs))
    hop = int(round(hop_s * fs))
    if len(x) < n:
        raise DataError("audio shorter than one intensity window")
    w = np.hanning(n + 2)[1:-1]
    w /= w.sum()
    count = n_frames_for(len(x), n, hop)
    idx = np.arange(n)[None, :] + hop * np.arange(count)[:, None]
    seg = x[idx]
    seg = seg - seg.mean(axis=1, keepdims=True)
    ms = (seg ** 2 * w).sum(axis=1)
    return 10.0 * np.log10(ms + 1e-20), frame_times(count, n, hop, fs)


def speaking_rate(audio: AudioBuffer, pitch: PitchConfig | None = None) -> SpeakingRate:
    dur = audio.duration_s
    if dur < 0.5:
        raise DataError(f"need at least 0.5 s of audio for speaking rate, got {dur:.3f}s")
    db, times = intensity_db(audio)
    peaks, _ = find_peaks(db, height=np.median(db), prominence=NUCLEUS_DIP_DB)
    if peaks.size and np.ptp(db) > 0:
        voiced = track_f0(audio, pitch or PitchConfig()).voiced_at(times[peaks])
        count = int(voiced.sum())
    else:
        count = 0
    # pauses: long stretches well below the loudest frame
    silent = db < db.max() - PAUSE_DB_BELOW_MAX
    pause = 0.0
    hop = INTENSITY_HOP_S
    run = 0
    for s in np.append(silent, False):
        if s:
            run += 1
        else:
            if run * hop >= MIN_PAUSE_S:
                pause += run * hop
            run = 0
    return SpeakingRate(count / dur, count, max(0.0, dur - pause), dur)


# ---------------------------------------------------------------------------
# formants
# ---------------------------------------------------------------------------

FORMANT_RATE_HZ = 10000
LPC_ORDER = 12
MAX_BANDWIDTH_HZ = 400.0
FORMANT_RANGE_HZ = (90.0, 4900.0)
N_FORMANTS = 3


def burg_lpc(x, order: int) -> np.ndarray:
    """Prediction polynomial [1, a1..ap] by Burg's lattice recursion."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= order:
        raise DataError(f"need more than {order} samples for order-{order} LPC")
    a = np.array([1.0])
    ef, eb = x[1:].copy(), x[:-1].copy()
    for _ in range(order):
        den = ef @ ef + eb @ eb
        k = -2.0 * (eb @ ef) / den if den > 0 else 0.0
        ext = np.append(a, 0.0)
        a = ext + k * ext[::-1]
        ef, eb = (ef + k * eb)[1:], (eb + k * ef)[:-1]
    return a


def lpc_resonances(a, fs):
    """(frequency, bandwidth) pairs from the LPC polynomial roots, sorted."""
    roots = np.roots(a)
    roots = roots[np.imag(roots) > 0]
    freq = np.angle(roots) * fs / (2 * np.pi)
    bw = -np.log(np.abs(roots)) * fs / np.pi
    order = np.argsort(freq)
    return freq[order], bw[order]


@dataclass
class FormantTrack:
    frame_times_s: np.ndarray
    freqs: np.ndarray  # T x 3, NaN where fewer than 3 candidates
    reliable: np.ndarray

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.float64).reshape(-1, N_FORMANTS)
        self.reliable = np.asarray(self.reliable, dtype=bool)
        f = self.freqs[self.reliable]
        if f.size and not (np.all(f[:, 0] > 0) and np.all(np.diff(f, axis=1) > 0)):
            raise DataError("reliable formant frames must satisfy 0 < F1 < F2 < F3")

    @property
    def n_frames(self):
        return len(self.frame_times_s)


def _gauss_window(n):
    i = np.arange(n)
    e = np.exp(-12.0)
    return (np.exp(-12.0 * ((i + 0.5) / n - 0.5) ** 2) - e) / (1 - e)


def extract_formants(audio: AudioBuffer, frame_ms=25.0, hop_ms=10.0, grid_rate_hz=16000,
                     pitch: PitchConfig | None = None) -> FormantTrack:
    """F1-F3 per frame on the MFCC frame grid (frame/hop at ``grid_rate_hz``).

    Frames are unreliable when fewer than three resonances pass the
    bandwidth/range screen, when the frame is silent, or when it is unvoiced.
    """
    n_grid = int(round(audio.duration_s * grid_rate_hz))
    flen = int(round(frame_ms * grid_rate_hz / 1000))
    hop = int(round(hop_ms * grid_rate_hz / 1000))
    count = n_frames_for(n_grid, flen, hop) if n_grid >= flen else 0
    times = frame_times(count, flen, hop, grid_rate_hz)

    x = resample(audio, FORMANT_RATE_HZ).samples if audio.sample_rate_hz != FORMANT_RATE_HZ \
        else np.asarray(audio.samples, dtype=np.float64)
    alpha = np.exp(-2 * np.pi * 50.0 / FORMANT_RATE_HZ)
    x = np.append(x[0], x[1:] - alpha * x[:-1])
    n = int(round(frame_ms * FORMANT_RATE_HZ / 1000))
    win = _gauss_window(n)
    freqs = np.full((count, N_FORMANTS), np.nan)
    ok = np.zeros(count, dtype=bool)
    for t, c in enumerate(times):
        s = int(round(c * FORMANT_RATE_HZ)) - n // 2
        seg = x[max(0, s):s + n]
        if len(seg) < n:
            seg = np.pad(seg, (0, n - len(seg)))
        seg = seg * win
        if not np.any(seg):
            continue
        f, bw = lpc_resonances(burg_lpc(seg, LPC_ORDER), FORMANT_RATE_HZ)
        keep = (bw < MAX_BANDWIDTH_HZ) & (f > FORMANT_RANGE_HZ[0]) & (f < FORMANT_RANGE_HZ[1])
        f = f[keep]
        if len(f) >= N_FORMANTS:
            freqs[t] = f[:N_FORMANTS]
            ok[t] = True
    if count and ok.any():
        try:
            voiced = track_f0(audio, pitch or PitchConfig()).voiced_at(times)
        except DataError:
            voiced = np.zeros(count, dtype=bool)
        ok &= voiced
    return FormantTrack(times, freqs, ok)


# ---------------------------------------------------------------------------
# DTW and formant difference
# ---------------------------------------------------------------------------

@dataclass
class AlignmentPath:
    pairs: np.ndarray  # K x 2 (i, j)
    cost: float

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        steps = np.diff(self.pairs, axis=0)
        if len(self.pairs) == 0 or tuple(self.pairs[0]) != (0, 0):
            raise DataError("alignment path must start at (0, 0)")
        if steps.size and not (np.all(steps >= 0) and np.all(steps <= 1) and np.all(steps.sum(1) >= 1)):
            raise DataError("alignment path has an invalid step")

    @property
    def mean_cost(self):
        return self.cost / len(self.pairs)


def cosine_distances(a, b):
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return np.clip(1.0 - (a / na) @ (b / nb).T, 0.0, 2.0)


def dtw_from_cost(cost) -> AlignmentPath:
    """Minimum-sum monotone path; ties prefer the diagonal, then (1,0)."""
    cost = np.asarray(cost, dtype=np.float64)
    ta, tb = cost.shape
    if ta == 0 or tb == 0:
        raise DataError("cannot align an empty sequence")
    acc = np.full((ta + 1, tb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, ta + 1):
        up = acc[i - 1]
        row = acc[i]
        c = cost[i - 1]
        for j in range(1, tb + 1):
            row[j] = c[j - 1] + min(up[j - 1], up[j], row[j - 1])
    i, j = ta, tb
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        opts = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in opts)
        _, i, j = next(o for o in opts if o[0] == best)
        path.append((i - 1, j - 1))
    return AlignmentPath(np.array(path[::-1]), float(acc[ta, tb]))


def dtw_align(feat_a, feat_b) -> AlignmentPath:
    a = feat_a.frames if isinstance(feat_a, FeatureMatrix) else np.atleast_2d(feat_a)
    b = feat_b.frames if isinstance(feat_b, FeatureMatrix) else np.atleast_2d(feat_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("cannot align an empty feature matrix")
    if a.shape[1] != b.shape[1]:
        raise DataError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return dtw_from_cost(cosine_distances(a, b))


def formant_difference(track_a: FormantTrack, track_b: FormantTrack,
                       path: AlignmentPath) -> tuple[float, int]:
    """Mean |F_a - F_b| over formants and mutually reliable aligned frames."""
    i, j = path.pairs[:, 0], path.pairs[:, 1]
    if i.max() >= track_a.n_frames or j.max() >= track_b.n_frames:
        raise DataError("alignment path indexes beyond the formant tracks")
    both = track_a.reliable[i] & track_b.reliable[j]
    used = int(both.sum())
    if used == 0:
        raise DataError("no mutually reliable aligned frames")
    diff = np.abs(track_a.freqs[i[both]] - track_b.freqs[j[both]])
    return float(diff.sum() / (N_FORMANTS * used)), used


# ---------------------------------------------------------------------------
# utterance-pair analysis
# ---------------------------------------------------------------------------

MAX_MEAN_PATH_DISTANCE = 0.6


def alignment_frontend() -> FrontendConfig:
    """Static MFCCs with CMVN (no deltas, no RASTA) for DTW."""
    return FrontendConfig(include_deltas=False, rasta=False, norm="cmvn")


@dataclass
class PairResult:
    d_hz: float
    frames_used: int
    mean_path_distance: float
    rejected: bool
    reason: str = ""


def analyze_pair(audio_a: AudioBuffer, audio_b: AudioBuffer,
                 pitch_a: PitchConfig | None = None, pitch_b: PitchConfig | None = None) -> PairResult:
    """Align two utterances on speech frames and compare their formants.

    Pairs that cannot be aligned well (mean path cosine distance above
    0.6) or that share no reliable frames are returned as rejected.
    """
    cfg = alignment_frontend()
    sides = []
    for audio, pitch in ((audio_a, pitch_a), (audio_b, pitch_b)):
        a16 = resample(audio, cfg.sample_rate_hz) if audio.sample_rate_hz != cfg.sample_rate_hz else audio
        try:
            feat = extract_features(a16, cfg)
        except DataError as e:
            return PairResult(float("nan"), 0, float("nan"), True, f"features: {e}")
        track = extract_formants(a16, cfg.frame_ms, cfg.hop_ms, cfg.sample_rate_hz, pitch)
        speech = np.flatnonzero(feat.speech_flags[:track.n_frames])
        if speech.size == 0:
            return PairResult(float("nan"), 0, float("nan"), True, "no speech frames")
        sides.append((feat.frames[speech],
                      FormantTrack(track.frame_times_s[speech], track.freqs[speech], track.reliable[speech])))
    (fa, ta), (fb, tb) = sides
    path = dtw_align(fa, fb)
    if path.mean_cost > MAX_MEAN_PATH_DISTANCE:
        return PairResult(float("nan"), 0, path.mean_cost, True, "misaligned")
    try:
        d, used = formant_difference(ta, tb, path)
    except DataError:
        return PairResult(float("nan"), 0, path.mean_cost, True, "no reliable frames")
    return PairResult(d, used, path.mean_cost, False)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_pitch_csv(path, track: PitchTrack):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "f0_hz", "strength"])
        for t, f, s in zip(track.frame_times_s, track.f0_hz, track.strengths):
            w.writerow([f"{t:.4f}", "" if np.isnan(f) else repr(float(f)), repr(float(s))])


def write_formants_csv(path, track: FormantTrack):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "f1_hz", "f2_hz", "f3_hz", "reliable"])
        for t, f, ok in zip(track.frame_times_s, track.freqs, track.reliable):
            w.writerow([f"{t:.4f}"] + ["" if np.isnan(v) else repr(float(v)) for v in f] + [int(ok)])


FORMANT_REPORT_COLUMNS = ["attacker_id", "target_id", "condition", "d_hz", "frames_used",
                          "mean_path_distance", "rejected", "reason"]
