"""Acceptance suite: one test per criterion.

Each test records a title and the measured values; the conftest summary
hook prints one PASS/FAIL line per criterion at the end of the run.
The end-to-end tests drive the real command line on a 50 x 10 synthetic
corpus, so this module takes a few minutes.
"""
import contextlib
import hashlib
import json
import math
import shutil
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from asvmimic import cli
from asvmimic.analysis import mean_ci, read_deltas, render_delta_table
from asvmimic.backend import PldaModel, compute_eer
from asvmimic.embedding import BwStats, GmmUbm, accumulate_bw
from asvmimic.prosody import (AlignmentPath, FormantTrack, PitchConfig, dtw_from_cost,
                              extract_formants, f0_summary, formant_difference, pitch_config_for,
                              speaking_rate, track_f0)

from conftest import buffer, resonant_pulses
from oracles import brute_dtw, eer_brute_force
from plda_oracle import llr_1d, llr_grid

FIXTURES = Path(__file__).parent / "fixtures"
SEED = 7
WORKERS = 2
pytestmark = pytest.mark.slow


def run(*argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = cli.main([str(a) for a in argv])
    assert code == 0, f"asvmimic {' '.join(map(str, argv))} exited {code}"


def tree_digest(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def train_and_rank(base, manifest, workers):
    store, out = base / "store", base / "out"
    common = ["--manifest", manifest, "--store", store, "--seed", SEED, "--workers", workers,
              "--deterministic"]
    for pid in ("A", "B"):
        run("train", "--profile", pid, *common)
        run("rank", "--profile", pid, "--pool", "all", "--out", out, *common)
    return store, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-corpus, train both profiles, held-out EER, then the full attack
    chain: rank on both systems, pick test utterances with the attacker's
    system, record attack sessions, score them on the attacked system."""
    base = tmp_path_factory.mktemp("e2e")
    corpus = base / "corpus"
    manifest = corpus / "manifest.csv"
    t0 = time.perf_counter()
    run("synth-corpus", corpus, "--speakers", 50, "--utterances", 10, "--attackers", 5, "--seed", SEED)
    store, out = train_and_rank(base, manifest, WORKERS)
    # attack sessions extend manifest.csv below; the serial rerun needs the original
    shutil.copy(manifest, corpus / "manifest_base.csv")
    snapshot = tree_digest(store), {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    eers = {}
    for pid in ("A", "B"):
        eer_out = base / f"eer_{pid}.json"
        with open(eer_out, "w") as fh, contextlib.redirect_stdout(fh):
            run("eer", "--profile", pid, "--manifest", manifest, "--store", store, "--workers", WORKERS)
        eers[pid] = json.loads(eer_out.read_text())
    train_time = time.perf_counter() - t0

    common = ["--manifest", manifest, "--store", store, "--out", out, "--workers", WORKERS]
    run("select-utterances", "--profile", "A", "--assignments", out / "assignments_A.csv",
        "--min-active", 6, *common)
    run("synth-corpus", corpus, "--attack-sessions", "--assignments", out / "assignments_A.csv",
        "--tests", out / "tests.csv")
    run("attack", "--profile", "B", "--assignments", out / "assignments_A.csv",
        "--tests", out / "tests.csv", *common)
    run("transfer-report", "--public", out / "rankings_A.csv", "--black", out / "rankings_B.csv",
        "--assignments", out / "assignments_A.csv", "--trials", out / "trials_B.csv", "--out", out)
    return {"base": base, "manifest": corpus / "manifest_base.csv", "eers": eers, "train_time": train_time,
            "snapshot": snapshot, "transfer": json.loads((out / "transfer.json").read_text())}


# 1 ----------------------------------------------------------------------------

def test_criterion_01_end_to_end_eer(pipeline, record_property):
    record_property("title", "end-to-end synthetic pipeline, held-out EER < 10% per profile, < 10 min")
    eers, secs = pipeline["eers"], pipeline["train_time"]
    record_property("measured", ", ".join(f"EER {p} = {100 * r['eer']:.2f}% ({r['n_target']} target / "
                                          f"{r['n_nontarget']} non-target trials)" for p, r in eers.items())
                    + f", synth+train+eer {secs:.0f} s")
    assert set(eers) == {"A", "B"}
    for r in eers.values():
        assert r["eer"] < 0.10 and r["n_target"] > 0 and r["n_nontarget"] > 0
    assert secs < 600


# 2 ----------------------------------------------------------------------------

def test_criterion_02_rank_transfer(pipeline, record_property):
    record_property("title", "closest > median > furthest on the attacked system for >= 4/5 attackers, "
                             "median Spearman > 0.5")
    rep = pipeline["transfer"]
    entries = rep["entries"]
    n_ok = sum(e["order_preserved"] for e in entries)
    rho = float(np.median([e["spearman"] for e in entries]))
    record_property("measured", f"{n_ok}/{len(entries)} attackers in order, median Spearman {rho:.3f}")
    assert len({e["attacker_id"] for e in entries}) == 5
    # means over scored attack trials, not the ranking scores
    assert all(e["category_means"][c]["n"] > 1 for e in entries for c in ("closest", "median", "furthest"))
    assert n_ok >= 4 and rho > 0.5


# 3 ----------------------------------------------------------------------------

def random_pd(rng, d, lo=0.3, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


def two_cov(mu, b, w):
    return PldaModel("two_cov", np.atleast_1d(mu).astype(float), np.atleast_2d(b).astype(float),
                     np.atleast_2d(w).astype(float), np.zeros((np.size(mu), 0)))


def test_criterion_03_plda_oracle(record_property):
    record_property("title", "two-covariance LLR vs numeric integration, 1-D and 3-D, 100 trials each, 1e-6")
    rng = np.random.default_rng(2024)
    worst1 = worst3 = 0.0
    for _ in range(100):
        b, w = rng.uniform(0.2, 3.0, 2)
        mu, x, y = rng.standard_normal(), *(rng.standard_normal(2) * 2)
        got = two_cov(mu, b, w).llr_matrix(np.array([x]), np.array([y]))[0, 0]
        worst1 = max(worst1, abs(got - llr_1d(x, y, mu, b, w)))
    for _ in range(100):
        b, w = random_pd(rng, 3), random_pd(rng, 3)
        mu = rng.standard_normal(3)
        x, y = rng.standard_normal((2, 3)) * 1.5
        got = two_cov(mu, b, w).llr_matrix(x, y)[0, 0]
        worst3 = max(worst3, abs(got - llr_grid(x, y, mu, b, w)))
    record_property("measured", f"max error 1-D {worst1:.2e}, 3-D {worst3:.2e}")
    assert worst1 <= 1e-6 and worst3 <= 1e-6


# 4 ----------------------------------------------------------------------------

def test_criterion_04_eer_oracle(record_property):
    record_property("title", "EER equals the exhaustive threshold sweep on 50 random score sets")
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        # two decimals so that ties between and within classes occur
        tar = list(rng.normal(1.0, 1.0, rng.integers(1, 25)).round(2))
        non = list(rng.normal(0.0, 1.0, rng.integers(1, 25)).round(2))
        mismatches += compute_eer(tar, non) != eer_brute_force(tar, non)
    record_property("measured", f"{50 - mismatches}/50 identical (EER and threshold)")
    assert mismatches == 0


# 5 ----------------------------------------------------------------------------

def test_criterion_05_dtw_oracle(record_property):
    record_property("title", "DTW cost equals exhaustive path enumeration, 200 instances with T <= 6")
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        cost = rng.random((rng.integers(1, 7), rng.integers(1, 7)))
        path = dtw_from_cost(cost)
        worst = max(worst, abs(path.cost - brute_dtw(cost)))
        assert math.isclose(path.cost, sum(cost[i, j] for i, j in path.pairs), abs_tol=1e-12)
    record_property("measured", f"max |DP - brute force| = {worst:.1e}")
    assert worst <= 1e-12


# 6 ----------------------------------------------------------------------------

def test_criterion_06_f0_accuracy(record_property):
    record_property("title", "median F0 within 2% at 110/150/220 Hz, silence fully unvoiced")
    cfg = PitchConfig(floor_hz=75.0, ceiling_hz=300.0)
    errs = {}
    for f0 in (110.0, 150.0, 220.0):
        med, _ = f0_summary(track_f0(buffer(resonant_pulses(f0, 1.0)), cfg))
        errs[f0] = abs(med - f0) / f0
    silent = track_f0(buffer(np.zeros(16000)), cfg)
    voiced_frac = float(silent.voiced.mean())
    record_property("measured", ", ".join(f"{f:.0f} Hz: {100 * e:.2f}%" for f, e in errs.items())
                    + f", silence voiced fraction {voiced_frac:.0%}")
    assert max(errs.values()) <= 0.02 and voiced_frac == 0.0


# 7 ----------------------------------------------------------------------------

def seeded_bursts(seed, fs=16000):
    """k in 5..15 Hanning-shaped voiced bursts with random lengths, gaps,
    levels and pitch."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(5, 16))
    f0 = rng.uniform(100, 180)
    parts = [np.zeros(int(rng.uniform(0.1, 0.3) * fs))]
    for _ in range(k):
        v = resonant_pulses(f0 * rng.uniform(0.95, 1.05), rng.uniform(0.12, 0.25), fs)
        parts += [v * np.hanning(len(v)) * rng.uniform(0.4, 1.0), np.zeros(int(rng.uniform(0.08, 0.2) * fs))]
    parts.append(np.zeros(int(0.2 * fs)))
    return k, np.concatenate(parts)


def test_criterion_07_speaking_rate(record_property):
    record_property("title", "burst count within +-1 for >= 90% of 50 seeded k-burst signals")
    hits = 0
    for seed in range(50):
        k, x = seeded_bursts(seed)
        hits += abs(speaking_rate(buffer(x), pitch_config_for("male")).count - k) <= 1
    record_property("measured", f"{hits}/50 within +-1")
    assert hits >= 45


# 8 ----------------------------------------------------------------------------

def _ftrack(freqs, reliable=None):
    f = np.asarray(freqs, float)
    return FormantTrack(np.arange(len(f)) * 0.01, f, np.ones(len(f), bool) if reliable is None else reliable)


def _diag(n):
    return AlignmentPath(np.stack([np.arange(n)] * 2, axis=1), 0.0)


def test_criterion_08_formant_metric(record_property):
    record_property("title", "formant distance d(a,a)=0, symmetric, +30 Hz F1 gives 10 Hz, "
                             "(500,1500,2500) recovered within 50 Hz")
    rng = np.random.default_rng(8)
    a = np.sort(rng.uniform(200, 4000, (20, 3)), axis=1)
    b = np.sort(rng.uniform(200, 4000, (20, 3)), axis=1)
    ra, rb = rng.random(20) < 0.8, rng.random(20) < 0.8
    ra[0] = rb[0] = True
    self_d, _ = formant_difference(_ftrack(a, ra), _ftrack(a, ra), _diag(20))
    asym = abs(formant_difference(_ftrack(a, ra), _ftrack(b, rb), _diag(20))[0]
               - formant_difference(_ftrack(b, rb), _ftrack(a, ra), _diag(20))[0])
    f = np.tile([500.0, 1500.0, 2500.0], (6, 1))
    shift, _ = formant_difference(_ftrack(f), _ftrack(f + [30.0, 0.0, 0.0]), _diag(6))
    track = extract_formants(buffer(resonant_pulses(120, 1.0)), pitch=pitch_config_for("male"))
    med = np.median(track.freqs[track.reliable], axis=0)
    err = np.abs(med - [500, 1500, 2500])
    record_property("measured", f"d(a,a)={self_d}, asymmetry {asym:.1e}, +30 Hz -> {shift:.12g} Hz, "
                                f"recovered {np.round(med).astype(int).tolist()} Hz")
    assert self_d == 0.0 and asym <= 1e-12 and abs(shift - 10.0) <= 1e-9
    assert np.all(err <= 50)


# 9 ----------------------------------------------------------------------------

def test_criterion_09_map_reduce(pipeline, record_property):
    record_property("title", "sharded Baum-Welch merge within 1e-9, workers 1 vs 2 byte-identical")
    rng = np.random.default_rng(9)
    ubm = GmmUbm(np.full(8, 1 / 8), rng.standard_normal((8, 4)) * 3, rng.uniform(0.5, 2.0, (8, 4)))
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((300, 4)) * 3
        whole = accumulate_bw(x, ubm)
        cuts = np.sort(rng.choice(np.arange(1, 300), int(rng.integers(1, 8)), replace=False))
        merged = BwStats.merge([accumulate_bw(p, ubm) for p in np.split(x, cuts)])
        worst = max(worst, np.max(np.abs(merged.n - whole.n)), np.max(np.abs(merged.f - whole.f)))

    store_digest, outputs = pipeline["snapshot"]
    store, out = train_and_rank(pipeline["base"] / "serial", pipeline["manifest"], 1)
    same_store = tree_digest(store) == store_digest
    same_out = {p.name: p.read_bytes() for p in sorted(out.iterdir())} == outputs
    record_property("measured", f"max merge error {worst:.1e}; {len(store_digest)} stored artifacts and "
                                f"{len(outputs)} ranking outputs identical: {same_store and same_out}")
    assert worst <= 1e-9 and same_store and same_out


# 10 ---------------------------------------------------------------------------

def test_criterion_10_report_fidelity(record_property):
    record_property("title", "published delta table rendered exactly, mean_ci({0,2}) = (1, 1.3859 +- 1e-4)")
    rendered = render_delta_table(read_deltas(FIXTURES / "published_deltas.csv"))
    m, h = mean_ci([0.0, 2.0])
    record_property("measured", f"table identical: {rendered == (FIXTURES / 'published_deltas_rendered.txt').read_text()}, "
                                f"mean_ci = ({m}, {h:.6f})")
    assert rendered == (FIXTURES / "published_deltas_rendered.txt").read_text()
    assert m == 1.0 and abs(h - 1.3859) <= 1e-4
