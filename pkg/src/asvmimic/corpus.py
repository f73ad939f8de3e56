"""Corpus metadata, audio I/O and resampling.

A manifest is a CSV file with one row per utterance::

    # asvmimic-manifest v1
    speaker_id,role,gender,nationality,utterance_id,audio_path,session,sample_rate_hz,duration_s,partition,prompt_id,quality

The first nine columns are required; ``partition``, ``prompt_id``,
``quality`` and ``display_name`` are optional.  A row with an empty
``utterance_id`` declares a speaker only.  A row with empty speaker
attributes (role/gender/nationality) only references a speaker that
must be declared by some other row.  A ``.jsonl`` manifest holds the
same columns as one JSON object per line.
"""
from __future__ import annotations

import csv
import functools
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
from scipy.signal import firwin, resample_poly

from .errors import AudioFormatError, ManifestError

MANIFEST_VERSION = 1
MANIFEST_MAGIC = "# asvmimic-manifest v"

REQUIRED_COLUMNS = (
    "speaker_id", "role", "gender", "nationality", "utterance_id",
    "audio_path", "session", "sample_rate_hz", "duration_s",
)
OPTIONAL_COLUMNS = ("partition", "prompt_id", "quality", "display_name")

ROLES = ("attacker", "target")
GENDERS = ("male", "female", "unknown")
SESSIONS = ("natural", "zero_effort", "mimicry", "wild")
ATTACKER_SESSIONS = ("natural", "zero_effort", "mimicry")


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    role: str
    gender: str = "unknown"
    nationality: str = ""
    display_name: str = ""


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    session: str
    duration_s: float
    sample_rate_hz: int
    partition: str = ""
    prompt_id: str = ""
    quality_ok: bool = True


@dataclass
class Manifest:
    speakers: list[SpeakerRecord] = field(default_factory=list)
    utterances: list[UtteranceRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        self._speakers = {s.speaker_id: s for s in self.speakers}
        self._utts = {u.utterance_id: u for u in self.utterances}

    def validate(self):
        """Check every manifest invariant, raising :class:`ManifestError`."""
        seen = set()
        for s in self.speakers:
            if s.speaker_id in seen:
                raise ManifestError(f"duplicate speaker id {s.speaker_id!r}")
            seen.add(s.speaker_id)
            _check_speaker(s)
        seen = set()
        for u in self.utterances:
            if u.utterance_id in seen:
                raise ManifestError(f"duplicate utterance id {u.utterance_id!r}")
            seen.add(u.utterance_id)
            if u.speaker_id not in self._speakers:
                raise ManifestError(
                    f"utterance {u.utterance_id!r} references unknown speaker {u.speaker_id!r}")
            _check_utterance(u, self._speakers[u.speaker_id])
        return self

    def speaker(self, speaker_id):
        try:
            return self._speakers[speaker_id]
        except KeyError:
            raise ManifestError(f"unknown speaker {speaker_id!r}") from None

    def utterance(self, utterance_id):
        try:
            return self._utts[utterance_id]
        except KeyError:
            raise ManifestError(f"unknown utterance {utterance_id!r}") from None

    def utterances_of(self, speaker_id, session=None):
        return [u for u in self.utterances
                if u.speaker_id == speaker_id and (session is None or u.session == session)]

    def speakers_with(self, role=None, **attrs):
        out = []
        for s in self.speakers:
            if role is not None and s.role != role:
                continue
            if all(getattr(s, k) == v for k, v in attrs.items()):
                out.append(s)
        return out

    def resolve(self, utt: UtteranceRecord) -> Path:
        p = Path(utt.audio_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def _check_speaker(s, line=None):
    if not s.speaker_id:
        raise ManifestError("empty speaker_id", line)
    if s.role not in ROLES:
        raise ManifestError(f"speaker {s.speaker_id!r}: role {s.role!r} not in {ROLES}", line)
    if s.gender not in GENDERS:
        raise ManifestError(f"speaker {s.speaker_id!r}: gender {s.gender!r} not in {GENDERS}", line)


def _check_utterance(u, speaker, line=None):
    if u.session not in SESSIONS:
        raise ManifestError(f"utterance {u.utterance_id!r}: session {u.session!r} not in {SESSIONS}", line)
    if not (u.duration_s > 0 and math.isfinite(u.duration_s)):
        raise ManifestError(f"utterance {u.utterance_id!r}: duration_s must be > 0", line)
    if u.sample_rate_hz <= 0:
        raise ManifestError(f"utterance {u.utterance_id!r}: sample_rate_hz must be > 0", line)
    if speaker.role == "target" and u.session != "wild":
        raise ManifestError(
            f"utterance {u.utterance_id!r}: target speakers only carry session 'wild'", line)
    if speaker.role == "attacker" and u.session not in ATTACKER_SESSIONS:
        raise ManifestError(
            f"utterance {u.utterance_id!r}: attacker session must be one of {ATTACKER_SESSIONS}", line)


def _parse_bool(text, line):
    t = str(text).strip().lower()
    if t in ("", "1", "true", "yes", "ok", "good"):
        return True
    if t in ("0", "false", "no", "bad", "reject"):
        return False
    raise ManifestError(f"cannot parse quality flag {text!r}", line)


def _rows_from_csv(text):
    lines = text.splitlines()
    offset = 0
    # Skip comment lines, honouring the version tag.
    while offset < len(lines) and lines[offset].startswith("#"):
        _check_version_comment(lines[offset], offset + 1)
        offset += 1
    body = "\n".join(lines[offset:])
    if not body.strip():
        return []
    reader = csv.DictReader(io.StringIO(body))
    missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ManifestError(f"missing columns: {', '.join(missing)}", offset + 1)
    rows = []
    for row in reader:
        lineno = offset + reader.line_num
        if None in row:
            raise ManifestError("too many fields", lineno)
        rows.append((lineno, {k: (v or "").strip() for k, v in row.items()}))
    return rows


def _check_version_comment(line, lineno):
    if line.startswith(MANIFEST_MAGIC):
        ver = line[len(MANIFEST_MAGIC):].strip()
        if ver != str(MANIFEST_VERSION):
            raise ManifestError(f"unsupported manifest version {ver!r}", lineno)


def _rows_from_jsonl(text):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON: {e.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ManifestError("expected a JSON object", lineno)
        if "schema_version" in obj and len(obj) == 1:
            if obj["schema_version"] != MANIFEST_VERSION:
                raise ManifestError(f"unsupported manifest version {obj['schema_version']!r}", lineno)
            continue
        rows.append((lineno, {k: "" if v is None else str(v).strip() for k, v in obj.items()}))
    return rows


def _build(rows, root):
    speakers: dict[str, SpeakerRecord] = {}
    utterances: list[UtteranceRecord] = []
    utt_ids: set[str] = set()
    refs: list[tuple[int, UtteranceRecord]] = []
    for lineno, row in rows:
        sid = row.get("speaker_id", "")
        if not sid:
            raise ManifestError("empty speaker_id", lineno)
        if row.get("role"):
            spk = SpeakerRecord(sid, row["role"], row.get("gender") or "unknown",
                                row.get("nationality", ""), row.get("display_name", ""))
            _check_speaker(spk, lineno)
            prev = speakers.get(sid)
            if prev is not None and prev != spk:
                raise ManifestError(f"duplicate speaker id {sid!r} with conflicting attributes", lineno)
            speakers[sid] = spk
        uid = row.get("utterance_id", "")
        if not uid:
            continue
        if uid in utt_ids:
            raise ManifestError(f"duplicate utterance id {uid!r}", lineno)
        utt_ids.add(uid)
        try:
            sr = int(row["sample_rate_hz"])
            dur = float(row["duration_s"])
        except (KeyError, ValueError):
            raise ManifestError(f"utterance {uid!r}: bad sample_rate_hz/duration_s", lineno) from None
        utt = UtteranceRecord(uid, sid, row.get("audio_path", ""), row.get("session", ""), dur, sr,
                              row.get("partition", ""), row.get("prompt_id", ""),
                              _parse_bool(row.get("quality", ""), lineno))
        refs.append((lineno, utt))
        utterances.append(utt)
    for lineno, utt in refs:
        spk = speakers.get(utt.speaker_id)
        if spk is None:
            raise ManifestError(
                f"utterance {utt.utterance_id!r} references unknown speaker {utt.speaker_id!r}", lineno)
        _check_utterance(utt, spk, lineno)
    return Manifest(list(speakers.values()), utterances, root)


def load_manifest(path) -> Manifest:
    """Parse and validate a CSV or JSON-lines manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".jsonl", ".ndjson"):
        rows = _rows_from_jsonl(text)
    else:
        rows = _rows_from_csv(text)
    return _build(rows, path.parent.resolve())


def save_manifest(manifest: Manifest, path):
    path = Path(path)
    cols = list(REQUIRED_COLUMNS) + list(OPTIONAL_COLUMNS)
    rows = []
    described = set()
    for u in manifest.utterances:
        s = manifest.speaker(u.speaker_id)
        described.add(s.speaker_id)
        rows.append(_row(s, u))
    for s in manifest.speakers:
        if s.speaker_id not in described:
            rows.append(_row(s, None))
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix in (".jsonl", ".ndjson"):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"schema_version": MANIFEST_VERSION}) + "\n")
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    else:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"{MANIFEST_MAGIC}{MANIFEST_VERSION}\n")
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    os.replace(tmp, path)


def _row(s, u):
    r = {"speaker_id": s.speaker_id, "role": s.role, "gender": s.gender,
         "nationality": s.nationality, "display_name": s.display_name}
    if u is None:
        r.update(utterance_id="", audio_path="", session="", sample_rate_hz="", duration_s="",
                 partition="", prompt_id="", quality="")
    else:
        r.update(utterance_id=u.utterance_id, audio_path=u.audio_path, session=u.session,
                 sample_rate_hz=str(u.sample_rate_hz), duration_s=repr(float(u.duration_s)),
                 partition=u.partition, prompt_id=u.prompt_id,
                 quality="" if u.quality_ok else "0")
    return r


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise AudioFormatError("audio must be mono (1-D)")
        if x.size == 0:
            raise AudioFormatError("audio buffer is empty")
        if not np.all(np.isfinite(x)):
            raise AudioFormatError("audio contains non-finite samples")
        self.samples = x
        self.sample_rate_hz = int(self.sample_rate_hz)

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz

    def __len__(self):
        return self.samples.size


def read_audio(path) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV file as a mono buffer in [-1, 1]."""
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        try:
            sr, data = scipy.io.wavfile.read(path)
        except (ValueError, EOFError, OSError, Warning) as e:
            # scipy only warns when the data chunk is shorter than the header says
            if "EOF" in str(e) or isinstance(e, (EOFError, Warning)):
                raise AudioFormatError(f"{path}: truncated file ({e})") from None
            raise AudioFormatError(f"{path}: {e}") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    return AudioBuffer(x, sr)


def write_audio(path, audio: AudioBuffer):
    """Write 16-bit PCM (samples are clipped to the int16 range)."""
    q = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    scipy.io.wavfile.write(tmp, audio.sample_rate_hz, q)
    os.replace(tmp, path)


KAISER_BETA = 8.6
# transition band as a fraction of the lower Nyquist frequency
TRANSITION_FRACTION = 0.02


@functools.lru_cache(maxsize=32)
def _lowpass(up: int, down: int, fs_in: int):
    fs_up = fs_in * up
    cutoff = min(fs_in, fs_in * up / down) / 2.0
    width = TRANSITION_FRACTION * cutoff
    atten = KAISER_BETA / 0.1102 + 8.7
    ntaps = int(math.ceil((atten - 7.95) / (2.285 * 2 * math.pi * width / fs_up))) + 1
    ntaps += 1 - ntaps % 2  # odd length keeps the delay an integer
    h = firwin(ntaps, cutoff, window=("kaiser", KAISER_BETA), fs=fs_up)
    return h  # resample_poly applies the interpolation gain itself


def resample(audio: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Band-limited rational resampling with a Kaiser-windowed sinc filter."""
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    src = audio.sample_rate_hz
    if target_hz == src:
        return AudioBuffer(audio.samples.copy(), src)
    ratio = Fraction(target_hz, src)
    up, down = ratio.numerator, ratio.denominator
    h = _lowpass(up, down, src)
    y = resample_poly(audio.samples, up, down, window=h)
    n_out = max(1, int(round(audio.samples.size * target_hz / src)))
    if y.size > n_out:
        y = y[:n_out]
    elif y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return AudioBuffer(y, target_hz)
