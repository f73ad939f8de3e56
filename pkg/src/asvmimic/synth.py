"""Seeded synthetic corpus with known speaker structure.

Each speaker is a source-filter voice: a glottal pulse train (F0 level,
range and jitter, spectral tilt, breathiness) drives a cascade of formant
resonators whose frequencies are the canonical vowel formants scaled by a
vocal-tract factor plus per-formant offsets.  Voices are drawn around a
few cluster centres, so some speakers are much closer to each other than
others, which gives target rankings a meaningful structure.

Utterances are syllable sequences fixed by a prompt id (so the same
prompt spoken by two voices shares content) with consonant-like noise
gaps and pauses, recorded through a random channel with background noise.
Attackers may optionally be recorded in a cleaner "studio" domain.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .corpus import (AudioBuffer, Manifest, SpeakerRecord, UtteranceRecord, load_manifest,
                     resample, save_manifest, write_audio)
from .errors import DataError

VOWELS = {
    "a": (730.0, 1090.0, 2440.0),
    "e": (530.0, 1840.0, 2480.0),
    "i": (270.0, 2290.0, 3010.0),
    "o": (570.0, 840.0, 2410.0),
    "u": (300.0, 870.0, 2240.0),
}
BANDWIDTHS = (70.0, 100.0, 140.0)
UPPER_FORMANTS_HZ = (3500.0, 4500.0)
UPPER_BANDWIDTHS = (200.0, 300.0)
N_LATENT = 12
# latent rows driving prosody (F0 level, F0 range, rate) get a smaller share
# of the speaker manifold than the spectral-envelope rows
PROSODIC_ROWS = (0, 1, 11)


@dataclass(frozen=True)
class Voice:
    gender: str
    f0_hz: float
    f0_range_st: float  # intonation excursion, semitones
    vtl_scale: float  # multiplies all formants
    formant_offsets: tuple  # Hz added to F1..F3 after scaling
    bw_scale: float
    tilt: float  # one-pole glottal lowpass coefficient
    breathiness: float  # aspiration noise relative level
    rate_syl_s: float
    upper_formants: tuple = UPPER_FORMANTS_HZ  # vowel-independent F4, F5

    def formants(self, vowel):
        base = np.asarray(VOWELS[vowel]) * self.vtl_scale + np.asarray(self.formant_offsets)
        return np.maximum.accumulate(np.maximum(base, 150.0) + np.array([0.0, 1.0, 2.0]))


def voice_from_latent(z, gender, rng) -> Voice:
    """Map a standard-normal parameter vector (length N_LATENT) to a voice."""
    male = gender == "male"
    f0 = (120.0 if male else 210.0) * 2 ** (z[0] * 2.5 / 12)
    return Voice(
        gender=gender,
        f0_hz=float(np.clip(f0, 85 if male else 150, 180 if male else 290)),
        f0_range_st=float(np.clip(2.5 + 0.8 * z[1], 0.5, 5.0)),
        vtl_scale=float(np.clip((1.0 if male else 1.15) * (1 + 0.06 * z[2]), 0.8, 1.35)),
        formant_offsets=(float(40 * z[3]), float(110 * z[4]), float(150 * z[5])),
        bw_scale=float(np.clip(1 + 0.2 * z[6], 0.6, 1.6)),
        tilt=float(np.clip(0.9 + 0.04 * z[7], 0.75, 0.98)),
        breathiness=float(np.clip(0.05 + 0.03 * z[8], 0.0, 0.2)),
        rate_syl_s=float(np.clip(4.5 + 0.6 * z[11], 3.0, 6.5)),
        upper_formants=tuple(float(f * (1 + 0.05 * z[2] + 0.04 * dz))
                             for f, dz in zip(UPPER_FORMANTS_HZ, z[9:11])),
    )


def blend_voices(src: Voice, dst: Voice, prosody: float, spectral: float) -> Voice:
    """Move ``src`` toward ``dst``: prosodic traits by ``prosody``, the
    spectral envelope by ``spectral`` (fractions in [0, 1])."""
    def mix(a, b, w):
        return a + w * (b - a)

    return Voice(
        gender=src.gender,
        f0_hz=float(src.f0_hz * (dst.f0_hz / src.f0_hz) ** prosody),
        f0_range_st=mix(src.f0_range_st, dst.f0_range_st, prosody),
        vtl_scale=mix(src.vtl_scale, dst.vtl_scale, spectral),
        formant_offsets=tuple(mix(a, b, spectral) for a, b in zip(src.formant_offsets, dst.formant_offsets)),
        bw_scale=mix(src.bw_scale, dst.bw_scale, spectral),
        tilt=mix(src.tilt, dst.tilt, spectral),
        breathiness=mix(src.breathiness, dst.breathiness, spectral),
        rate_syl_s=mix(src.rate_syl_s, dst.rate_syl_s, prosody),
        upper_formants=tuple(mix(a, b, spectral) for a, b in zip(src.upper_formants, dst.upper_formants)),
    )


# ---------------------------------------------------------------------------
# signal construction
# ---------------------------------------------------------------------------

def resonator(freq, bw, fs):
    """Unit-DC-gain two-pole resonator coefficients (b, a)."""
    r = np.exp(-np.pi * bw / fs)
    a = np.array([1.0, -2 * r * np.cos(2 * np.pi * freq / fs), r * r])
    return np.array([a.sum()]), a


def pulse_train(f0_contour, fs, rng=None, jitter=0.0):
    """Unit impulses at the zero crossings of the accumulated F0 phase."""
    f0 = np.asarray(f0_contour, dtype=np.float64)
    if jitter and rng is not None:
        f0 = f0 * (1 + jitter * rng.standard_normal(len(f0)))
    phase = np.cumsum(f0 / fs)
    out = np.zeros(len(f0))
    out[np.flatnonzero(np.diff(np.floor(phase), prepend=0.0) > 0)] = 1.0
    return out


def vowel(f0_contour, formants, fs, bandwidths=BANDWIDTHS, tilt=0.9, breathiness=0.0,
          rng=None, jitter=0.0):
    """Pulse-excited cascade of formant resonators; resonances at or above
    Nyquist are skipped."""
    src = pulse_train(f0_contour, fs, rng, jitter)
    pole = _pole_at(tilt, fs)
    src = lfilter([1 - pole], [1, -pole], src)
    if breathiness and rng is not None:
        src = src + breathiness * np.std(src) * rng.standard_normal(len(src))
    y = src
    for f, bw in zip(formants, bandwidths):
        if f < fs / 2:
            b, a = resonator(f, bw, fs)
            y = lfilter(b, a, y)
    return y


def _pole_at(coef, fs, ref_hz=16000):
    """One-pole coefficient giving the same cutoff at ``fs`` as ``coef`` at 16 kHz."""
    return coef ** (ref_hz / fs)


def _ramp(n, fs, ms=15.0):
    k = min(n // 2, int(fs * ms / 1000))
    env = np.ones(n)
    if k:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = r
        env[-k:] = r[::-1]
    return env


def prompt_plan(prompt_id: str, n_min=12, n_max=18):
    """Content of a prompt: vowel sequence, relative lengths and pause slots."""
    rng = np.random.default_rng(zlib.crc32(prompt_id.encode()))
    n = int(rng.integers(n_min, n_max + 1))
    vowels = [str(v) for v in rng.choice(sorted(VOWELS), size=n)]
    lengths = rng.uniform(0.8, 1.25, size=n)
    accents = rng.uniform(-1, 1, size=n)
    pauses = [i for i in range(2, n - 1) if rng.random() < 0.15]
    return vowels, lengths, accents, pauses


SYNTH_RATE_HZ = 16000
DOMAINS = {
    # (channel tilt spread, SNR range in dB)
    "wild": (0.15, (30.0, 40.0)),
    "studio": (0.03, (40.0, 50.0)),
}


def render_utterance(voice: Voice, prompt_id: str, rng, domain="wild",
                     fs: int = SYNTH_RATE_HZ) -> np.ndarray:
    """Speak ``prompt_id`` with ``voice`` under a recording ``domain``.

    Synthesis runs at 16 kHz; other ``fs`` values are reached by
    resampling, as if the 16 kHz-bandlimited voice had been recorded at
    that rate.
    """
    tilt_spread, (snr_lo, snr_hi) = DOMAINS[domain]
    sr = SYNTH_RATE_HZ
    vowels, lengths, accents, pauses = prompt_plan(prompt_id)
    syl = 1.0 / voice.rate_syl_s
    pieces = [0.0005 * rng.standard_normal(int(0.25 * sr))]
    n_syl = len(vowels)
    for k, (v, ln, acc) in enumerate(zip(vowels, lengths, accents)):
        n_v = int(0.62 * syl * ln * sr)
        pos = k / max(1, n_syl - 1)
        st = voice.f0_range_st * (0.5 * acc + 0.5 - pos)  # accent + declination
        f0 = voice.f0_hz * 2 ** ((st + np.linspace(0.3, -0.3, n_v)) / 12)
        fm = np.concatenate([voice.formants(v) * (1 + 0.01 * rng.standard_normal(3)),
                             voice.upper_formants])
        bws = tuple(b * voice.bw_scale for b in BANDWIDTHS + UPPER_BANDWIDTHS)
        y = vowel(f0, fm, sr, bws, voice.tilt, voice.breathiness, rng, jitter=0.003)
        y = y / (np.max(np.abs(y)) + 1e-12) * _ramp(n_v, sr) * (0.8 + 0.2 * rng.random())
        pieces.append(y)
        # consonant-like gap: weak high-passed noise
        n_c = int(0.38 * syl * ln * sr)
        pieces.append(lfilter([1, -0.95], [1], rng.standard_normal(n_c)) * 0.02 * _ramp(n_c, sr, 5))
        if k in pauses:
            pieces.append(0.0005 * rng.standard_normal(int(0.4 * sr)))
    pieces.append(0.0005 * rng.standard_normal(int(0.25 * sr)))
    x = np.concatenate(pieces)
    # recording channel: tilt, gain and background noise
    x = lfilter([1, -tilt_spread * rng.standard_normal()], [1], x)
    x = x / np.max(np.abs(x)) * 10 ** (-(3 + 6 * rng.random()) / 20)
    snr_db = snr_lo + (snr_hi - snr_lo) * rng.random()
    x = x + np.sqrt(np.mean(x ** 2) / 10 ** (snr_db / 10)) * rng.standard_normal(len(x))
    x = np.clip(x, -1.0, 1.0)
    if fs != sr:
        x = np.clip(resample(AudioBuffer(x, sr), fs).samples, -1.0, 1.0)
    return x


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

SIDE_FILE = "speakers.json"
NATIONALITIES = ("FI", "US", "GB", "IN", "DE")


def _utt_rng(seed, *keys):
    return np.random.default_rng([seed] + [zlib.crc32(str(k).encode()) for k in keys])


STRUCTURES = ("planted", "random")


def _speaker_latents(rng, n_attackers, n_targets, structure, n_clusters, spread, dim,
                     center_scale=1.5):
    """Latent positions and genders for attackers then targets.

    ``planted``: one cluster per attacker, cluster centres evenly spaced
    ``center_scale`` apart along a random direction (a graded voice
    continuum).  Each attacker sits at its centre; targets of both genders
    are scattered around every centre, so any attacker ranking
    same-gender targets finds clearly close, middling and far ones.
    ``random``: speakers scattered around random cluster centres.
    """
    n = n_attackers + n_targets
    if structure == "planted" and n_attackers > 0:
        n_clusters = n_attackers
        axis = rng.standard_normal(dim)
        axis /= np.linalg.norm(axis)
        pos = (np.arange(n_clusters) - (n_clusters - 1) / 2) * center_scale
        centers = pos[:, None] * axis[None, :]
        lat = [centers[c] for c in range(n_attackers)]
        gen = ["male" if c % 2 == 0 else "female" for c in range(n_attackers)]
        for t in range(n_targets):
            lat.append(centers[t % n_clusters] + spread * rng.standard_normal(dim))
            gen.append("male" if (t // n_clusters) % 2 == 0 else "female")
        return np.array(lat), gen
    if structure not in STRUCTURES:
        raise DataError(f"unknown similarity structure {structure!r}")
    n_clusters = n_clusters or max(2, n // 6)
    centers = rng.standard_normal((n_clusters, dim))
    lat = centers[rng.integers(n_clusters, size=n)] + spread * rng.standard_normal((n, dim))
    return lat, ["male" if k % 2 == 0 else "female" for k in range(n)]


def generate_corpus(out_dir, n_speakers=50, n_utterances=10, n_attackers=5, seed=0,
                    structure="planted", n_clusters=None, spread=0.5, latent_dim=2,
                    center_scale=1.5, prosodic_weight=0.3, attacker_domain="wild",
                    target_rate_hz=16000, attacker_rate_hz=44100) -> Manifest:
    """Write WAVs, ``manifest.csv`` and the voice side file under ``out_dir``.

    Targets (session ``wild``) alternate in pairs between training
    partitions ``a`` and ``b``; attackers (session ``natural``) get
    partition ``attack`` and are never used for system training.
    """
    if n_speakers <= n_attackers or n_attackers < 0 or n_utterances < 2:
        raise DataError("need more speakers than attackers and at least 2 utterances each")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_targets = n_speakers - n_attackers
    # speakers live on a low-dimensional manifold mixed into all parameters
    mixing = rng.standard_normal((N_LATENT, latent_dim))
    mixing /= np.linalg.norm(mixing, axis=1, keepdims=True)
    mixing[list(PROSODIC_ROWS)] *= prosodic_weight
    latents, genders = _speaker_latents(rng, n_attackers, n_targets, structure, n_clusters,
                                        spread, latent_dim, center_scale)
    voices, speakers, utts = {}, [], []
    ids = [f"A{i + 1:02d}" for i in range(n_attackers)] + [f"T{i + 1:03d}" for i in range(n_targets)]
    for k, sid in enumerate(ids):
        gender = genders[k]
        attacker = sid.startswith("A")
        nat = "FI" if attacker or rng.random() < 0.6 else str(rng.choice(NATIONALITIES[1:]))
        voice = voice_from_latent(mixing @ latents[k], gender, rng)
        voices[sid] = voice
        speakers.append(SpeakerRecord(sid, "attacker" if attacker else "target", gender, nat, ""))
        fs = attacker_rate_hz if attacker else target_rate_hz
        session = "natural" if attacker else "wild"
        part = "attack" if attacker else ("a" if (k - n_attackers) // 2 % 2 == 0 else "b")
        for j in range(n_utterances):
            uid = f"{sid}-{j + 1:02d}"
            x = render_utterance(voice, uid, _utt_rng(seed, sid, j, session),
                                 attacker_domain if attacker else "wild", fs)
            rel = f"wav/{uid}.wav"
            write_audio(out / rel, AudioBuffer(x, fs))
            utts.append(UtteranceRecord(uid, sid, rel, session, len(x) / fs, fs, part, uid, True))
    manifest = Manifest(speakers, utts, out)
    save_manifest(manifest, out / "manifest.csv")
    (out / SIDE_FILE).write_text(json.dumps(
        {"seed": seed, "attacker_rate_hz": attacker_rate_hz, "attacker_domain": attacker_domain,
         "voices": {k: asdict(v) for k, v in voices.items()}}, indent=1, sort_keys=True))
    return load_manifest(out / "manifest.csv")


def load_voices(corpus_dir) -> tuple[dict[str, Voice], dict]:
    meta = json.loads((Path(corpus_dir) / SIDE_FILE).read_text())
    voices = {k: Voice(**{**v, "formant_offsets": tuple(v["formant_offsets"]),
                          "upper_formants": tuple(v["upper_formants"])})
              for k, v in meta["voices"].items()}
    return voices, meta


def generate_attack_sessions(corpus_dir, assignments: Sequence, tests: dict[str, list[str]],
                             prosody_shift=0.5, spectral_shift=0.15) -> Manifest:
    """Add zero-effort and mimicry recordings for each assignment.

    For every test utterance of the assigned target the attacker reads the
    same prompt once in their own voice and once imitating the target
    (prosody moved ``prosody_shift`` and the spectral envelope
    ``spectral_shift`` of the way toward the target).
    """
    from .attack import attack_utterance_id

    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir / "manifest.csv")
    voices, meta = load_voices(corpus_dir)
    fs = int(meta["attacker_rate_hz"])
    have = {u.utterance_id for u in manifest.utterances}
    new = []
    for a in assignments:
        for test_id in sorted(tests.get(a.target_id, ())):
            prompt = manifest.utterance(test_id).prompt_id or test_id
            att, tgt = voices[a.attacker_id], voices[a.target_id]
            for session, voice in (("zero_effort", att),
                                   ("mimicry", blend_voices(att, tgt, prosody_shift, spectral_shift))):
                uid = attack_utterance_id(a.attacker_id, a.target_id, session, prompt)
                if uid in have:
                    continue
                have.add(uid)
                x = render_utterance(voice, prompt, _utt_rng(meta["seed"], uid),
                                     meta.get("attacker_domain", "wild"), fs)
                rel = f"wav/{uid}.wav"
                write_audio(corpus_dir / rel, AudioBuffer(x, fs))
                new.append(UtteranceRecord(uid, a.attacker_id, rel, session, len(x) / fs, fs,
                                           "attack", prompt, True))
    manifest = Manifest(manifest.speakers, list(manifest.utterances) + new, corpus_dir)
    save_manifest(manifest, corpus_dir / "manifest.csv")
    return load_manifest(corpus_dir / "manifest.csv")
