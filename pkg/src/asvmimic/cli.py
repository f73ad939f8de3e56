"""Command-line interface.

Every subcommand writes machine-readable output to files or standard
output and diagnostics to standard error.  Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.

Settings come from (highest precedence first) command-line flags, a TOML
config file given with ``--config`` and built-in defaults.  The artifact
store root defaults to ``$ASVMIMIC_STORE`` or ``./asvmimic-store``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, attack, prosody, synth, system
from .corpus import Manifest, load_manifest, read_audio
from .embedding import EmbeddingSet
from .errors import AsvError, DataError, NumericalError
from .frontend import FrontendConfig
from .store import STORE_ENV, Store

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("asvmimic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

BASE_PROFILES = {"A": system.profile_a, "B": system.profile_b}
DESK_KEYS = ("components", "rank", "lda_dim", "plda_dim")


@dataclass
class RunConfig:
    manifest: str | None = None
    store: str | None = None
    out_dir: str = "."
    seed: int = 0
    workers: int = 1
    scale: str = "desk"  # desk | full
    # every stage is seeded and worker results are merged in input order, so
    # runs are reproducible regardless; the flag records the intent
    deterministic: bool = False
    desk: dict = field(default_factory=dict)  # profile id -> {components, rank, lda_dim, plda_dim}
    profiles: dict = field(default_factory=dict)  # profile id -> SystemProfile (unscaled)
    common: dict = field(default_factory=dict)  # "pool.gender" -> target id

    def __post_init__(self):
        if not self.profiles:
            self.profiles = {pid: make() for pid, make in BASE_PROFILES.items()}
        if len(self.profiles) < 2:
            raise DataError("config must define at least two system profiles")
        if self.scale not in ("desk", "full"):
            raise DataError(f"scale must be 'desk' or 'full', not {self.scale!r}")
        if self.workers < 1:
            raise DataError("workers must be >= 1")

    def profile(self, pid) -> system.SystemProfile:
        if pid not in self.profiles:
            raise DataError(f"unknown profile {pid!r} (defined: {', '.join(sorted(self.profiles))})")
        p = self.profiles[pid]
        if self.scale == "desk":
            p = system.desk_scale(p, **self.desk.get(pid, {}))
        return p


def _profile_from_table(pid, table: dict) -> system.SystemProfile:
    table = dict(table)
    base = table.pop("base", pid if pid in BASE_PROFILES else None)
    if base not in BASE_PROFILES:
        raise DataError(f"profile {pid}: unknown base {base!r}")
    p = BASE_PROFILES[base](profile_id=pid)
    fe = table.pop("frontend", None)
    if fe:
        known = {f.name for f in fields(FrontendConfig)}
        bad = set(fe) - known
        if bad:
            raise DataError(f"profile {pid}: unknown frontend keys {sorted(bad)}")
        p = replace(p, frontend=replace(p.frontend, **fe))
    known = {f.name for f in fields(system.SystemProfile)} - {"profile_id", "frontend"}
    bad = set(table) - known
    if bad:
        raise DataError(f"profile {pid}: unknown keys {sorted(bad)}")
    return replace(p, **table)


def load_config(path=None) -> RunConfig:
    """Read a TOML config.  Recognised tables: ``[paths]`` (manifest, store,
    out_dir), ``[run]`` (seed, workers, scale), ``[desk.<profile>]``,
    ``[profiles.<id>]`` (``base`` plus SystemProfile fields and a
    ``frontend`` sub-table) and ``[common]`` (``"<pool>.<gender>" = id``)."""
    if path is None:
        return RunConfig()
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise DataError(f"cannot read config {path}: {e}") from None
    paths, run = data.get("paths", {}), data.get("run", {})
    profiles = {pid: _profile_from_table(pid, t) for pid, t in data.get("profiles", {}).items()}
    for pid, make in BASE_PROFILES.items():
        profiles.setdefault(pid, make())
    desk = data.get("desk", {})
    for pid, d in desk.items():
        bad = set(d) - set(DESK_KEYS)
        if bad:
            raise DataError(f"desk.{pid}: unknown keys {sorted(bad)}")
    return RunConfig(manifest=paths.get("manifest"), store=paths.get("store"),
                     out_dir=paths.get("out_dir", "."), seed=int(run.get("seed", 0)),
                     workers=int(run.get("workers", 1)), scale=run.get("scale", "desk"),
                     desk=desk, profiles=profiles, common=dict(data.get("common", {})))


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    for name in ("manifest", "store", "seed", "workers", "scale"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "out", None) is not None:
        over["out_dir"] = args.out
    cfg = replace(cfg, deterministic=bool(args.deterministic), **over)
    if cfg.store is None:
        cfg.store = os.environ.get(STORE_ENV, "asvmimic-store")
    return cfg


def _manifest(cfg: RunConfig) -> Manifest:
    if not cfg.manifest:
        raise UsageError("no manifest given (use --manifest or [paths] manifest)")
    return load_manifest(cfg.manifest)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=attack._jsonable) + "\n")


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def _embedding_key(pid):
    return f"{pid}/embeddings"


def ensure_embeddings(asv: system.AsvSystem, manifest: Manifest, store: Store, ids=None,
                      workers=1) -> EmbeddingSet:
    """Stored embeddings for ``ids`` (default: every utterance), extracting
    and persisting any that are missing."""
    key = _embedding_key(asv.profile_id)
    have = store.get(key) if store.has(key) else None
    wanted = [u for u in manifest.utterances if ids is None or u.utterance_id in ids]
    missing = [u for u in wanted if have is None or u.utterance_id not in have]
    if not missing:
        return have
    log.info("profile %s: extracting %d embeddings", asv.profile_id, len(missing))
    new = system.extract_embeddings(asv, manifest, missing, workers)
    if have is not None:
        new = EmbeddingSet(list(have.ids) + list(new.ids), np.vstack([have.matrix, new.matrix]),
                           asv.profile_id,
                           np.concatenate([have.active_speech_s, new.active_speech_s]))
    store.put(key, new)
    return new


def _load_system(cfg, store, pid) -> system.AsvSystem:
    return system.AsvSystem.load(store, pid)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_corpus(args, cfg):
    if args.attack_sessions:
        if not (args.assignments and args.tests):
            raise UsageError("--attack-sessions needs --assignments and --tests")
        m = synth.generate_attack_sessions(args.corpus_dir, attack.read_assignments(args.assignments),
                                           attack.read_test_lists(args.tests),
                                           args.prosody_shift, args.spectral_shift)
    else:
        m = synth.generate_corpus(args.corpus_dir, args.speakers, args.utterances, args.attackers,
                                  cfg.seed, args.structure, spread=args.spread,
                                  center_scale=args.center_scale)
    _emit({"manifest": str(Path(args.corpus_dir) / "manifest.csv"),
           "n_speakers": len(m.speakers), "n_utterances": len(m.utterances)})


def cmd_train(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    prof = cfg.profile(args.profile)
    history = []

    def on_log(stage, it, obj):
        history.append({"stage": stage, "iteration": it, "objective": obj})
        log.info("train %s: %s iter %d objective %.6g", prof.profile_id, stage, it, obj)

    asv = system.train_system(prof, manifest, cfg.workers, on_log)
    digests = asv.save(store)
    if args.log_file:
        Path(args.log_file).write_text(json.dumps(history, indent=1) + "\n")
    _emit({"profile_id": prof.profile_id, "digests": digests})


def cmd_extract(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    asv = _load_system(cfg, store, args.profile)
    emb = ensure_embeddings(asv, manifest, store, None, cfg.workers)
    _emit({"profile_id": asv.profile_id, "n_embeddings": len(emb.ids),
           "digest": store.digest(_embedding_key(asv.profile_id))})


def _parse_filters(items):
    out = {}
    for it in items or ():
        if "=" not in it:
            raise UsageError(f"filter {it!r} is not key=value")
        k, v = it.split("=", 1)
        if k not in ("nationality", "gender", "role"):
            raise UsageError(f"cannot filter on {k!r}")
        out[k] = v
    return out


def _pool_predicate(pool, attacker, filters, gender_match):
    def keep(rec):
        if rec.role != "target":
            return False
        if gender_match and rec.gender != attacker.gender:
            return False
        if pool == "native" and rec.nationality != attacker.nationality:
            return False
        if pool == "nonnative" and rec.nationality == attacker.nationality:
            return False
        return all(getattr(rec, k) == v for k, v in filters.items())
    return keep


def cmd_rank(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    asv = _load_system(cfg, store, args.profile)
    emb = ensure_embeddings(asv, manifest, store, None, cfg.workers)
    speakers = {s.speaker_id: s for s in manifest.speakers}
    if args.attacker:
        for a in args.attacker:
            if a not in speakers or speakers[a].role != "attacker":
                raise DataError(f"unknown attacker {a!r}")
        attackers = list(args.attacker)
    else:
        attackers = [s.speaker_id for s in manifest.speakers_with("attacker")]
    targets = {}
    for s in manifest.speakers_with("target"):
        ids = [u.utterance_id for u in manifest.utterances_of(s.speaker_id) if u.quality_ok]
        if ids:
            targets[s.speaker_id] = system.speaker_embedding(emb, ids).vector
    filters = _parse_filters(args.filter)
    pools = [p.strip() for p in args.pool.split(",")]
    for p in pools:
        if p not in attack.POOLS:
            raise UsageError(f"unknown pool {p!r}")
    rankings, assignments, summary = [], [], []
    for a in attackers:
        nat = [u.utterance_id for u in manifest.utterances_of(a, "natural") if u.quality_ok]
        if not nat:
            raise DataError(f"attacker {a} has no natural-voice utterances")
        avec = system.speaker_embedding(emb, nat).vector
        for pool in pools:
            keep = _pool_predicate(pool, speakers[a], filters, not args.any_gender)
            tag = pool + "".join(f";{k}={v}" for k, v in sorted(filters.items()))
            r = attack.rank_targets(a, avec, targets, asv.score, speakers, keep, tag, asv.profile_id)
            rankings.append(r)
            if len(r.entries) >= 3:
                picks = attack.select_targets(r, pool)
                assignments.extend(picks[c] for c in attack.CATEGORIES)
                summary.append({"attacker_id": a, "pool": pool, "n_ranked": len(r.entries),
                                **{c: picks[c].target_id for c in attack.CATEGORIES}})
            else:
                warnings.warn(f"attacker {a}, pool {pool}: only {len(r.entries)} targets; "
                              "no category assignment", RuntimeWarning)
            common = cfg.common.get(f"{pool}.{speakers[a].gender}")
            if common:
                if common not in speakers:
                    raise DataError(f"common target {common!r} is not in the manifest")
                assignments.append(attack.TargetAssignment(a, common, "common", pool,
                                                           r.score_of(common) if common in r.ids
                                                           else float("nan")))
    out = _out(cfg)
    attack.write_rankings(out / f"rankings_{asv.profile_id}.csv", rankings)
    attack.write_assignments(out / f"assignments_{asv.profile_id}.csv", assignments)
    for s in summary:
        print(f"{s['attacker_id']} [{s['pool']}]: closest {s['closest']}, median {s['median']}, "
              f"furthest {s['furthest']} (of {s['n_ranked']})", file=sys.stderr)
    _emit({"profile_id": asv.profile_id, "rankings": str(out / f"rankings_{asv.profile_id}.csv"),
           "assignments": str(out / f"assignments_{asv.profile_id}.csv"), "selection": summary})


def cmd_select_utterances(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    asv = _load_system(cfg, store, args.profile)
    emb = ensure_embeddings(asv, manifest, store, None, cfg.workers)
    assignments = attack.read_assignments(args.assignments)
    rows, chosen_for = [], {}
    for a in assignments:
        if a.target_id in chosen_for:
            # a target shared by several attackers keeps its first selection
            continue
        nat = [u.utterance_id for u in manifest.utterances_of(a.attacker_id, "natural") if u.quality_ok]
        if not nat:
            raise DataError(f"attacker {a.attacker_id} has no natural-voice utterances")
        avec = system.speaker_embedding(emb, nat).vector
        utts = manifest.utterances_of(a.target_id)
        cands = [attack.UtteranceCandidate(u.utterance_id, asv.score([emb[u.utterance_id].vector], avec),
                                           emb.active_speech(u.utterance_id), u.quality_ok)
                 for u in utts]
        picked = attack.select_utterances(cands, a.rank_category, args.min_active)
        usable = sum(c.quality_ok for c in cands)
        if usable - len(picked) < args.min_enroll:
            picked = picked[:max(0, usable - args.min_enroll)]
        if not picked:
            raise DataError(f"target {a.target_id}: too few utterances to hold out a test set")
        chosen_for[a.target_id] = picked
        by_id = {c.utterance_id: c for c in cands}
        for uid in picked:
            rows.append([a.target_id, uid, a.attacker_id, a.rank_category, repr(by_id[uid].score),
                         repr(by_id[uid].active_speech_s)])
    out = _out(cfg)
    path = out / "tests.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_id", "utterance_id", "attacker_id", "rank_category", "score",
                    "active_speech_s"])
        w.writerows(rows)
    _emit({"tests": str(path), "n_targets": len(chosen_for), "n_utterances": len(rows)})


DOMAIN_SCORE_COLUMNS = ["domain_tag", "hypothesis", "enroll_ids", "test_id", "profile_id", "llr"]
PAIR_COLUMNS = ["attacker_id", "target_id", "condition", "attacker_utterance", "target_utterance"]


def cmd_attack(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    try:
        assignments = attack.read_assignments(args.assignments)
    except (KeyError, ValueError) as e:
        raise DataError(f"{args.assignments}: malformed assignment file ({e})") from None
    tests = attack.read_test_lists(args.tests) if assignments else {}
    out = _out(cfg)
    pid = args.profile
    trials = attack.build_attack_trials(assignments, manifest, tests).trials if assignments else []
    scored, domain_rows = [], []
    if trials:
        asv = _load_system(cfg, store, pid)
        dom = attack.build_domain_trials(trials, manifest)
        needed = {t.test_id for t in trials} | {e for t in trials for e in t.enroll_ids}
        needed |= {d.test_id for d in dom} | {e for d in dom for e in d.enroll_ids}
        emb = ensure_embeddings(asv, manifest, store, needed, cfg.workers)

        def score(enroll_ids, test_id):
            return asv.score([emb[e].vector for e in enroll_ids], emb[test_id].vector)

        scored = attack.score_trials(trials, score, pid)
        domain_rows = [(d, score(list(d.enroll_ids), d.test_id)) for d in dom]
    attack.write_trials(out / f"trials_{pid}.csv", scored)
    with open(out / f"domain_scores_{pid}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DOMAIN_SCORE_COLUMNS)
        for d, s in domain_rows:
            w.writerow([d.domain_tag, d.hypothesis, ";".join(d.enroll_ids), d.test_id, pid, repr(s)])
    # content-matched attacker/target pairs for the prosody analysis
    genuine = {(t.target_id, t.prompt_id): t.test_id for t in trials if t.condition == "genuine"}
    pairs = sorted({(t.attacker_id, t.target_id, t.condition, t.test_id, genuine[(t.target_id, t.prompt_id)])
                    for t in trials if t.condition != "genuine" and (t.target_id, t.prompt_id) in genuine})
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PAIR_COLUMNS)
        w.writerows(pairs)
    summaries = analysis.summarize_categories(scored)
    deltas = analysis.mimicry_deltas(scored)
    analysis.write_deltas(out / f"deltas_{pid}.csv", deltas)
    summary = {"schema_version": analysis.REPORT_SCHEMA_VERSION, "profile_id": pid,
               "n_trials": len(scored),
               "category_summaries": [s.__dict__ for s in summaries],
               "mimicry_deltas": [d.__dict__ for d in deltas]}
    attack.write_json(out / f"summary_{pid}.json", summary)
    _emit({"profile_id": pid, "n_trials": len(scored), "trials": str(out / f"trials_{pid}.csv")})


def cmd_transfer_report(args, cfg):
    public = attack.read_rankings(args.public)
    black = attack.read_rankings(args.black)
    assignments = attack.read_assignments(args.assignments)
    trials = None
    if args.trials:
        trials = [t for t in attack.read_trials(args.trials) if isinstance(t, attack.ScoredTrial)]
    rep = attack.transfer_report(public, black, assignments, trials)
    out = _out(cfg)
    attack.write_json(out / "transfer.json", rep)
    _emit(rep["summary"])


def _utterance_prosody(audio, gender):
    pc = prosody.pitch_config_for(gender)
    row = {}
    try:
        row["rate"] = prosody.speaking_rate(audio, pc).rate
    except DataError:
        pass
    try:
        row["f0_median"], row["f0_std"] = prosody.f0_summary(prosody.track_f0(audio, pc))
    except DataError:
        pass
    return row


def _mean_dict(rows):
    keys = sorted({k for r in rows for k in r})
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


def cmd_prosody(args, cfg):
    manifest = _manifest(cfg)
    with open(args.pairs, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PAIR_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{args.pairs}: missing columns {missing}")
        pairs = [tuple(r[c] for c in PAIR_COLUMNS) for r in reader]
    gender = {s.speaker_id: s.gender for s in manifest.speakers}
    audio_cache, stats_cache = {}, {}

    def audio(uid):
        if uid not in audio_cache:
            audio_cache[uid] = read_audio(manifest.resolve(manifest.utterance(uid)))
        return audio_cache[uid]

    def stats(uid):
        if uid not in stats_cache:
            spk = manifest.utterance(uid).speaker_id
            stats_cache[uid] = _utterance_prosody(audio(uid), gender.get(spk, "unknown"))
        return stats_cache[uid]

    formant_rows = []
    per_combo: dict[tuple, dict] = {}
    for att, tgt, cond, ua, ut in pairs:
        res = prosody.analyze_pair(audio(ua), audio(ut),
                                   prosody.pitch_config_for(gender.get(att, "unknown")),
                                   prosody.pitch_config_for(gender.get(tgt, "unknown")))
        formant_rows.append([att, tgt, cond, repr(res.d_hz), res.frames_used,
                             repr(res.mean_path_distance), int(res.rejected), res.reason, ua, ut])
        slot = per_combo.setdefault((att, tgt), {"target": {}, "zero_effort": {}, "mimicry": {}})
        slot["target"][ut] = stats(ut)
        s = dict(stats(ua))
        if not res.rejected:
            s["formant_d"] = res.d_hz
        slot.setdefault(cond, {})[ua] = s
    combined = {k: {c: _mean_dict(list(v.values())) for c, v in conds.items()}
                for k, conds in per_combo.items()}
    changes = analysis.prosody_report(combined)
    out = _out(cfg)
    with open(out / "formant_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(prosody.FORMANT_REPORT_COLUMNS + ["attacker_utterance", "target_utterance"])
        w.writerows(formant_rows)
    with open(out / "utterance_prosody.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "rate", "f0_median", "f0_std"])
        for uid in sorted(stats_cache):
            s = stats_cache[uid]
            w.writerow([uid] + [repr(s[k]) if k in s else "" for k in ("rate", "f0_median", "f0_std")])
    analysis.write_prosody_changes(out / "prosody_changes.csv", changes)
    _emit({"n_pairs": len(pairs), "n_rejected": sum(r[6] for r in formant_rows),
           "n_improved": sum(c.improved for c in changes), "n_changes": len(changes)})


def cmd_trials(args, cfg):
    manifest = _manifest(cfg)
    trials = analysis.generate_listening_trials(manifest, attack.read_assignments(args.assignments),
                                                attack.read_test_lists(args.tests),
                                                args.per_combination, cfg.seed)
    analysis.check_triplets(trials)
    out = _out(cfg)
    analysis.write_listening_trials(out / "listening_trials.csv", trials)
    counts = {g: sum(t.group == g for t in trials) for g in analysis.LISTENING_GROUPS}
    _emit({"n_trials": len(trials), "groups": counts})


def _read_scored(path):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header != attack.TRIAL_COLUMNS:
        raise DataError(f"{path}: not a scored-trial file of the current schema")
    rows = attack.read_trials(path)
    if any(not isinstance(r, attack.ScoredTrial) for r in rows):
        raise DataError(f"{path}: trials without scores")
    return rows


def _read_domain_scores(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DOMAIN_SCORE_COLUMNS:
            raise DataError(f"{path}: not a domain-score file of the current schema")
        return [(r["profile_id"], r["domain_tag"], r["hypothesis"], float(r["llr"])) for r in reader]


def cmd_report(args, cfg):
    warn = []
    scored = [s for p in args.trials or () for s in _read_scored(p)]
    deltas = [d for p in args.deltas or () for d in analysis.read_deltas(p)]
    if scored:
        computed = analysis.mimicry_deltas(scored)
        have = {(d.profile_id, d.rank_category) for d in deltas}
        deltas += [d for d in computed if (d.profile_id, d.rank_category) not in have]
    summaries = analysis.summarize_categories(scored)
    dom_rows = [r for p in args.domain_scores or () for r in _read_domain_scores(p)]
    dists = []
    for pid in sorted({r[0] for r in dom_rows}):
        dists += analysis.domain_distributions([(d, h, s) for p, d, h, s in dom_rows if p == pid],
                                               profile_id=pid)
    changes = [c for p in args.prosody or () for c in analysis.read_prosody_changes(p)]
    transfer = None
    if args.transfer:
        transfer = json.loads(Path(args.transfer).read_text())
        analysis.check_schema(transfer, args.transfer)
    if not (scored or deltas or dom_rows or changes or transfer):
        warn.append("no inputs given; the bundle is empty")
    for w in warn:
        print(f"warning: {w}", file=sys.stderr)
    bundle = analysis.build_bundle(summaries, deltas, dists, changes, transfer, warn)
    out = _out(cfg)
    analysis.write_bundle(out, bundle)
    (out / "delta_table.txt").write_text(bundle["delta_table"])
    with open(out / "category_summaries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["profile_id", "rank_category", "language_pool", "condition", "mean_llr",
                    "ci_halfwidth", "n_trials"])
        for s in summaries:
            w.writerow([s.profile_id, s.rank_category, s.language_pool, s.condition, repr(s.mean_llr),
                        repr(s.ci_halfwidth), s.n_trials])
    analysis.write_deltas(out / "mimicry_deltas.csv", deltas)
    with open(out / "domain_histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["profile_id", "domain_tag", "hypothesis", "bin_lo", "bin_hi", "count"])
        for d in dists:
            for lo, hi, c in zip(d.bin_edges[:-1], d.bin_edges[1:], d.counts):
                w.writerow([d.profile_id, d.domain_tag, d.hypothesis, repr(lo), repr(hi), c])
    analysis.write_prosody_changes(out / "prosody_changes.csv", changes)
    figures = []
    if args.figures:
        from . import plotting
        figures.append(plotting.plot_category_means(summaries, out / "category_means.png"))
        figures.append(plotting.plot_domain_distributions(dists, out / "domain_distributions.png"))
        figures.append(plotting.plot_prosody_changes(changes, out / "prosody_changes.png"))
        figures.append(plotting.plot_transfer(transfer, out / "transfer.png"))
    sys.stdout.write(bundle["delta_table"])
    print(json.dumps({"bundle": str(out / analysis.BUNDLE_FILE),
                      "figures": [str(f) for f in figures]}, sort_keys=True), file=sys.stderr)


def cmd_eer(args, cfg):
    manifest = _manifest(cfg)
    store = Store(cfg.store)
    asv = _load_system(cfg, store, args.profile)
    held = {u.utterance_id for u in system.heldout_utterances(manifest, asv.profile)}
    emb = ensure_embeddings(asv, manifest, store, held, cfg.workers)
    _emit(system.heldout_eer(asv, manifest, emb, cfg.workers))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="TOML run configuration")
    g.add_argument("--manifest", help="corpus manifest (CSV or JSONL)")
    g.add_argument("--store", help=f"artifact store root (default ${STORE_ENV} or ./asvmimic-store)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--workers", type=int, help="worker processes for per-utterance stages")
    g.add_argument("--scale", choices=("desk", "full"), help="model sizes (default desk)")
    g.add_argument("--deterministic", action="store_true",
                   help="fixed seeds; outputs are byte-identical across runs and worker counts")
    g.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="asvmimic", description="ASV-assisted target selection and mimicry analysis.")
    p.add_argument("--version", action="version", version=f"asvmimic {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-corpus", parents=[common], help="generate the synthetic corpus")
    s.add_argument("corpus_dir")
    s.add_argument("--speakers", type=int, default=50)
    s.add_argument("--utterances", type=int, default=10)
    s.add_argument("--attackers", type=int, default=5)
    s.add_argument("--structure", choices=synth.STRUCTURES, default="planted")
    s.add_argument("--spread", type=float, default=0.5)
    s.add_argument("--center-scale", type=float, default=1.5)
    s.add_argument("--attack-sessions", action="store_true",
                   help="add zero-effort and mimicry recordings to an existing corpus")
    s.add_argument("--assignments")
    s.add_argument("--tests")
    s.add_argument("--prosody-shift", type=float, default=0.5)
    s.add_argument("--spectral-shift", type=float, default=0.15)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("train", parents=[common], help="train one system profile")
    s.add_argument("--profile", required=True)
    s.add_argument("--log-file", help="write per-iteration objectives as JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", parents=[common], help="extract and store utterance embeddings")
    s.add_argument("--profile", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("rank", parents=[common], help="rank targets for attackers")
    s.add_argument("--profile", required=True)
    s.add_argument("--attacker", action="append", help="attacker id (repeatable; default all)")
    s.add_argument("--pool", default="native,nonnative",
                   help="comma-separated pools: native, nonnative, all")
    s.add_argument("--filter", action="append", help="extra key=value predicate on targets")
    s.add_argument("--any-gender", action="store_true", help="do not restrict to the attacker's gender")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("select-utterances", parents=[common], help="choose target test utterances")
    s.add_argument("--profile", required=True)
    s.add_argument("--assignments", required=True)
    s.add_argument("--min-active", type=float, default=30.0, help="active speech seconds to collect")
    s.add_argument("--min-enroll", type=int, default=1, help="utterances always left for enrollment")
    s.set_defaults(func=cmd_select_utterances)

    s = sub.add_parser("attack", parents=[common], help="build and score attack trials")
    s.add_argument("--profile", required=True)
    s.add_argument("--assignments", required=True)
    s.add_argument("--tests", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("transfer-report", parents=[common], help="compare rankings across systems")
    s.add_argument("--public", required=True, help="rankings from the attacker's system")
    s.add_argument("--black", required=True, help="rankings from the attacked system")
    s.add_argument("--assignments", required=True)
    s.add_argument("--trials", help="scored attacked-system trials (category means over trials)")
    s.set_defaults(func=cmd_transfer_report)

    s = sub.add_parser("prosody", parents=[common], help="prosody and formant analysis of pairs")
    s.add_argument("--pairs", required=True)
    s.set_defaults(func=cmd_prosody)

    s = sub.add_parser("trials", parents=[common], help="generate listening-test trial lists")
    s.add_argument("--assignments", required=True)
    s.add_argument("--tests", required=True)
    s.add_argument("--per-combination", type=int, default=5)
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("report", parents=[common], help="consolidate results into a report bundle")
    s.add_argument("--trials", nargs="*", help="scored trial CSVs")
    s.add_argument("--deltas", nargs="*", help="precomputed mimicry-delta CSVs")
    s.add_argument("--domain-scores", nargs="*")
    s.add_argument("--prosody", nargs="*", help="prosody change CSVs")
    s.add_argument("--transfer", help="transfer report JSON")
    s.add_argument("--figures", action="store_true", help="render PNG figures")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("eer", parents=[common], help="held-out all-pairs EER of a trained profile")
    s.add_argument("--profile", required=True)
    s.set_defaults(func=cmd_eer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except UsageError as e:
        print(f"asvmimic: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"asvmimic: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AsvError, OSError) as e:
        print(f"asvmimic: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
