import csv
import json
import warnings

import pytest

from asvmimic import cli
from asvmimic.attack import write_assignments
from asvmimic.corpus import Manifest, load_manifest, save_manifest
from asvmimic.store import Store
from asvmimic.synth import generate_corpus
from asvmimic.system import desk_scale, profile_a, profile_b, train_system


def run(*argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """Small corpus plus both profiles trained at reduced size and stored."""
    base = tmp_path_factory.mktemp("cli")
    m = generate_corpus(base / "corpus", n_speakers=14, n_utterances=4, n_attackers=2, seed=0)
    store = base / "store"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for p in (profile_a(), profile_b()):
            train_system(desk_scale(p, components=8, rank=8, lda_dim=4), m).save(Store(store))
    return base, base / "corpus" / "manifest.csv", store


def test_help_and_version(capsys):
    assert run("--help") == 0
    assert "synth-corpus" in capsys.readouterr().out
    assert run("--version") == 0


def test_usage_errors(env, tmp_path):
    _, manifest, store = env
    assert run("no-such-command") == cli.EXIT_USAGE
    assert run("rank", "--manifest", manifest) == cli.EXIT_USAGE
    common = ["--manifest", manifest, "--store", store, "--out", tmp_path]
    assert run("rank", "--profile", "A", "--pool", "galactic", *common) == cli.EXIT_USAGE
    assert run("rank", "--profile", "A", "--filter", "shoe_size=9", *common) == cli.EXIT_USAGE


def test_missing_manifest_is_data_error(tmp_path):
    assert run("extract", "--profile", "A", "--manifest", tmp_path / "nope.csv",
               "--store", tmp_path) == cli.EXIT_DATA


def test_single_speaker_training_fails(env, tmp_path, capsys):
    _, manifest, _ = env
    m = load_manifest(manifest)
    keep = {"T001"}
    one = Manifest([s for s in m.speakers if s.speaker_id in keep],
                   [u for u in m.utterances if u.speaker_id in keep], m.root)
    save_manifest(one, manifest.parent / "one.csv")
    # small models so that training gets as far as the speaker-level stages
    (tmp_path / "run.toml").write_text("[desk.A]\ncomponents = 2\nrank = 2\nlda_dim = 1\n")
    code = run("train", "--profile", "A", "--config", tmp_path / "run.toml",
               "--manifest", manifest.parent / "one.csv", "--store", tmp_path)
    assert code == cli.EXIT_DATA
    assert "two classes" in capsys.readouterr().err


def test_train_with_desk_config(env, tmp_path):
    _, manifest, _ = env
    (tmp_path / "run.toml").write_text("[desk.B]\ncomponents = 4\nrank = 4\nlda_dim = 2\n")
    assert run("train", "--profile", "B", "--config", tmp_path / "run.toml", "--manifest", manifest,
               "--store", tmp_path / "s", "--log-file", tmp_path / "log.json") == 0
    log = json.loads((tmp_path / "log.json").read_text())
    assert {"tv", "plda"} <= {r["stage"] for r in log}
    prof = json.loads(Store(tmp_path / "s").get("B/profile").profile_json)
    assert (prof["ubm_components"], prof["tv_rank"], prof["lda_dim"]) == (4, 4, 2)


def test_bad_config(tmp_path):
    (tmp_path / "run.toml").write_text("[desk.B]\nbogus = 1\n")
    assert run("eer", "--profile", "B", "--config", tmp_path / "run.toml") == cli.EXIT_DATA
    (tmp_path / "broken.toml").write_text("[[[")
    assert run("eer", "--profile", "B", "--config", tmp_path / "broken.toml") == cli.EXIT_DATA


def test_rank_outputs_and_nationality_filter(env, tmp_path):
    _, manifest, store = env
    common = ["--manifest", manifest, "--store", store]
    assert run("rank", "--profile", "A", "--pool", "all", "--out", tmp_path / "all", *common) == 0
    ranked = rows(tmp_path / "all" / "rankings_A.csv")
    m = load_manifest(manifest)
    nat = {s.speaker_id: s.nationality for s in m.speakers}
    wanted = sorted({nat[r["target_id"]] for r in ranked})[0]
    assert run("rank", "--profile", "A", "--pool", "all", "--filter", f"nationality={wanted}",
               "--out", tmp_path / "f", *common) == 0
    filtered = rows(tmp_path / "f" / "rankings_A.csv")
    assert filtered and {nat[r["target_id"]] for r in filtered} == {wanted}
    assert {r["filter_tag"] for r in filtered} == {f"all;nationality={wanted}"}
    # ranks are contiguous and scores descend per attacker
    for att in {r["attacker_id"] for r in ranked}:
        mine = [r for r in ranked if r["attacker_id"] == att]
        assert [int(r["rank"]) for r in mine] == list(range(len(mine)))
        scores = [float(r["score"]) for r in mine]
        assert scores == sorted(scores, reverse=True)


def test_unknown_attacker(env, tmp_path):
    _, manifest, store = env
    assert run("rank", "--profile", "A", "--attacker", "T001", "--manifest", manifest,
               "--store", store, "--out", tmp_path) == cli.EXIT_DATA


def test_empty_assignments_give_empty_outputs(env, tmp_path):
    _, manifest, store = env
    write_assignments(tmp_path / "a.csv", [])
    (tmp_path / "tests.csv").write_text("target_id,utterance_id\n")
    assert run("attack", "--profile", "B", "--assignments", tmp_path / "a.csv", "--tests",
               tmp_path / "tests.csv", "--manifest", manifest, "--store", store,
               "--out", tmp_path / "out") == 0
    assert rows(tmp_path / "out" / "trials_B.csv") == []
    assert rows(tmp_path / "out" / "pairs.csv") == []
    assert json.loads((tmp_path / "out" / "summary_B.json").read_text())["n_trials"] == 0


def test_malformed_assignments(env, tmp_path):
    _, manifest, store = env
    (tmp_path / "a.csv").write_text("who,what\nx,y\n")
    (tmp_path / "tests.csv").write_text("target_id,utterance_id\n")
    assert run("attack", "--profile", "B", "--assignments", tmp_path / "a.csv", "--tests",
               tmp_path / "tests.csv", "--manifest", manifest, "--store", store,
               "--out", tmp_path / "out") == cli.EXIT_DATA


@pytest.fixture(scope="module")
def attacked(env):
    """rank -> select-utterances -> attack sessions -> attack (extends the module corpus)."""
    base, manifest, store = env
    out = base / "run"
    common = ["--manifest", manifest, "--store", store, "--out", out]
    assert run("rank", "--profile", "A", "--pool", "all", *common) == 0
    assert run("select-utterances", "--profile", "A", "--assignments", out / "assignments_A.csv",
               "--min-active", 3, *common) == 0
    assert run("synth-corpus", manifest.parent, "--attack-sessions", "--assignments",
               out / "assignments_A.csv", "--tests", out / "tests.csv") == 0
    assert run("attack", "--profile", "B", "--assignments", out / "assignments_A.csv",
               "--tests", out / "tests.csv", *common) == 0
    return out


def test_attack_outputs(attacked):
    trials = rows(attacked / "trials_B.csv")
    assert {t["condition"] for t in trials} == {"genuine", "zero_effort", "mimicry"}
    assert all(t["profile_id"] == "B" for t in trials)
    pairs = rows(attacked / "pairs.csv")
    assert pairs and {p["condition"] for p in pairs} == {"zero_effort", "mimicry"}
    dom = rows(attacked / "domain_scores_B.csv")
    assert {d["hypothesis"] for d in dom} <= {"target", "nontarget"} and dom


def test_transfer_report(attacked, capsys):
    out = attacked
    assert run("transfer-report", "--public", out / "rankings_A.csv", "--black", out / "rankings_A.csv",
               "--assignments", out / "assignments_A.csv", "--out", out / "self") == 0
    rep = json.loads((out / "self" / "transfer.json").read_text())
    # a system compared with itself keeps its own order exactly
    assert all(e["order_preserved"] and e["spearman"] == pytest.approx(1.0) for e in rep["entries"])


def test_identical_prosody_pair(env, attacked, tmp_path):
    _, manifest, _ = env
    m = load_manifest(manifest)
    mim = next(u for u in m.utterances if u.session == "mimicry")
    tgt = next(u for u in m.utterances if u.speaker_id.startswith("T"))
    with open(tmp_path / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cli.PAIR_COLUMNS)
        w.writerow([mim.speaker_id, tgt.speaker_id, "zero_effort", tgt.utterance_id, tgt.utterance_id])
        w.writerow([mim.speaker_id, tgt.speaker_id, "mimicry", tgt.utterance_id, tgt.utterance_id])
    assert run("prosody", "--manifest", manifest, "--pairs", tmp_path / "pairs.csv",
               "--out", tmp_path / "out") == 0
    rep = rows(tmp_path / "out" / "formant_report.csv")
    assert [float(r["d_hz"]) for r in rep] == [0.0, 0.0]
    changes = rows(tmp_path / "out" / "prosody_changes.csv")
    assert changes and not any(c["improved"] == "1" or c["improved"] == "True" for c in changes)


def test_prosody_bad_pairs_file(env, tmp_path):
    _, manifest, _ = env
    (tmp_path / "pairs.csv").write_text("a,b\n1,2\n")
    assert run("prosody", "--manifest", manifest, "--pairs", tmp_path / "pairs.csv",
               "--out", tmp_path) == cli.EXIT_DATA


def test_report_rerun_byte_identical(attacked, tmp_path, capsys):
    out = attacked
    args = ["report", "--trials", out / "trials_B.csv", "--domain-scores", out / "domain_scores_B.csv",
            "--figures"]
    assert run(*args, "--out", tmp_path / "r1") == 0
    table = capsys.readouterr().out
    assert run(*args, "--out", tmp_path / "r2") == 0
    assert table == (tmp_path / "r1" / "delta_table.txt").read_text()
    files = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert {"report.json", "delta_table.txt", "category_means.png", "domain_distributions.png"} <= set(files)
    for name in files:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name


def test_report_schema_mismatch(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps({"schema_version": 99, "entries": []}))
    assert run("report", "--transfer", tmp_path / "t.json", "--out", tmp_path / "r") == cli.EXIT_DATA


def test_report_rejects_foreign_trial_file(tmp_path):
    (tmp_path / "t.csv").write_text("a,b\n1,2\n")
    assert run("report", "--trials", tmp_path / "t.csv", "--out", tmp_path / "r") == cli.EXIT_DATA


def test_empty_report_warns(tmp_path, capsys):
    assert run("report", "--out", tmp_path) == 0
    assert "empty" in capsys.readouterr().err
    assert json.loads((tmp_path / "report.json").read_text())["schema_version"] == 1


def test_eer_command(env, capsys):
    _, manifest, store = env
    assert run("eer", "--profile", "B", "--manifest", manifest, "--store", store) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0.0 <= res["eer"] < 0.5 and res["profile_id"] == "B"


def test_config_file_and_env_store(env, tmp_path, monkeypatch, capsys):
    _, manifest, store = env
    monkeypatch.setenv("ASVMIMIC_STORE", str(store))
    (tmp_path / "run.toml").write_text(f'[paths]\nmanifest = "{manifest}"\nout_dir = "{tmp_path / "o"}"\n')
    assert run("rank", "--profile", "B", "--config", tmp_path / "run.toml") == 0
    assert (tmp_path / "o" / "rankings_B.csv").exists()


def test_listening_trials_command(tmp_path, capsys):
    from test_analysis import _combos, _listening_manifest, _tests

    m = _listening_manifest()
    save_manifest(m, tmp_path / "m.csv")
    write_assignments(tmp_path / "a.csv", _combos())
    with open(tmp_path / "tests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_id", "utterance_id"])
        for t, ids in _tests().items():
            w.writerows([t, u] for u in ids)
    assert run("trials", "--manifest", tmp_path / "m.csv", "--assignments", tmp_path / "a.csv",
               "--tests", tmp_path / "tests.csv", "--seed", 3, "--out", tmp_path / "o") == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n_trials"] == 600 and set(res["groups"].values()) == {120}
    assert run("trials", "--manifest", tmp_path / "m.csv", "--assignments", tmp_path / "a.csv",
               "--tests", tmp_path / "tests.csv", "--per-combination", 9,
               "--out", tmp_path / "o") == cli.EXIT_DATA


def test_common_target_from_config(env, tmp_path):
    _, manifest, store = env
    m = load_manifest(manifest)
    att = m.speakers_with("attacker")[0]
    common = next(s for s in m.speakers_with("target") if s.gender == att.gender).speaker_id
    (tmp_path / "run.toml").write_text(f'[common]\n"all.{att.gender}" = "{common}"\n')
    assert run("rank", "--profile", "A", "--pool", "all", "--config", tmp_path / "run.toml",
               "--manifest", manifest, "--store", store, "--out", tmp_path / "o") == 0
    got = [a for a in rows(tmp_path / "o" / "assignments_A.csv") if a["rank_category"] == "common"]
    assert got and {a["target_id"] for a in got} == {common}
