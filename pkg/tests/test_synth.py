import dataclasses
import shutil

import numpy as np
import pytest

from asvmimic.attack import TargetAssignment, attack_utterance_id
from asvmimic.corpus import read_audio
from asvmimic.errors import DataError
from asvmimic.prosody import f0_summary, pitch_config_for, track_f0
from asvmimic.synth import (blend_voices, generate_attack_sessions, generate_corpus, load_voices,
                            prompt_plan, render_utterance, voice_from_latent)

from conftest import buffer


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return out, generate_corpus(out, n_speakers=6, n_utterances=2, n_attackers=1, seed=3)


def test_layout(corpus):
    out, m = corpus
    assert [s.speaker_id for s in m.speakers] == ["A01", "T001", "T002", "T003", "T004", "T005"]
    att = m.utterances_of("A01")
    assert all(u.session == "natural" and u.partition == "attack" and u.sample_rate_hz == 44100 for u in att)
    parts = [u.partition for u in m.utterances if u.speaker_id.startswith("T")][::2]
    # targets alternate in pairs between the two training partitions
    assert parts == ["a", "a", "b", "b", "a"]
    for u in m.utterances:
        a = read_audio(m.resolve(u))
        assert a.sample_rate_hz == u.sample_rate_hz
        assert abs(a.duration_s - u.duration_s) < 1e-6
        assert np.max(np.abs(a.samples)) <= 1.0


def test_seeded_bytes_identical(corpus, tmp_path):
    out, m = corpus
    generate_corpus(tmp_path, n_speakers=6, n_utterances=2, n_attackers=1, seed=3)
    assert (tmp_path / "manifest.csv").read_bytes() == (out / "manifest.csv").read_bytes()
    for u in m.utterances:
        assert (tmp_path / u.audio_path).read_bytes() == (out / u.audio_path).read_bytes()


def test_different_seed_differs(corpus, tmp_path):
    out, m = corpus
    generate_corpus(tmp_path, n_speakers=6, n_utterances=2, n_attackers=1, seed=4)
    u = m.utterances[2]
    assert (tmp_path / u.audio_path).read_bytes() != (out / u.audio_path).read_bytes()


def test_bad_sizes(tmp_path):
    with pytest.raises(DataError):
        generate_corpus(tmp_path, n_speakers=2, n_attackers=2)
    with pytest.raises(DataError):
        generate_corpus(tmp_path, n_speakers=4, n_utterances=1)
    with pytest.raises(DataError, match="structure"):
        generate_corpus(tmp_path, n_speakers=4, n_utterances=2, n_attackers=1, structure="spiral")


def test_prompt_plan_deterministic():
    def flat(plan):
        vowels, lengths, accents, pauses = plan
        return vowels, lengths.tolist(), accents.tolist(), pauses

    assert flat(prompt_plan("p1")) == flat(prompt_plan("p1"))
    assert flat(prompt_plan("p1")) != flat(prompt_plan("p2"))


def test_blend_endpoints():
    rng = np.random.default_rng(0)
    a = voice_from_latent(rng.standard_normal(12), "male", rng)
    b = voice_from_latent(rng.standard_normal(12), "male", rng)
    same = blend_voices(a, b, 0.0, 0.0)
    for f in dataclasses.fields(a):
        assert getattr(same, f.name) == pytest.approx(getattr(a, f.name))
    full = blend_voices(a, b, 1.0, 1.0)
    for f in dataclasses.fields(a):
        assert getattr(full, f.name) == pytest.approx(getattr(b, f.name))


def test_rendered_pitch_follows_voice():
    rng = np.random.default_rng(1)
    v = voice_from_latent(np.zeros(12), "male", rng)
    x = render_utterance(v, "prompt-x", np.random.default_rng(2))
    med, _ = f0_summary(track_f0(buffer(x), pitch_config_for("male")))
    assert abs(med - v.f0_hz) / v.f0_hz < 0.15


def test_attack_sessions_added_once(corpus, tmp_path):
    out, _ = corpus
    work = tmp_path / "c"
    shutil.copytree(out, work)
    a = [TargetAssignment("A01", "T002", "closest", "native")]
    tests = {"T002": ["T002-02"]}
    m = generate_attack_sessions(work, a, tests)
    new = [u for u in m.utterances if u.session in ("zero_effort", "mimicry")]
    assert sorted(u.utterance_id for u in new) == sorted(
        attack_utterance_id("A01", "T002", s, "T002-02") for s in ("zero_effort", "mimicry"))
    assert all(u.prompt_id == "T002-02" and u.sample_rate_hz == 44100 for u in new)
    again = generate_attack_sessions(work, a, tests)
    assert len(again.utterances) == len(m.utterances)
    voices, meta = load_voices(work)
    assert meta["seed"] == 3 and set(voices) == {s.speaker_id for s in m.speakers}
