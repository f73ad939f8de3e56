"""Target ranking with the attacker's system, target/utterance selection,
attack-trial construction and cross-system transfer reporting."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .corpus import ATTACKER_SESSIONS, Manifest, SpeakerRecord
from .errors import DataError

CATEGORIES = ("closest", "median", "furthest")
ALL_CATEGORIES = CATEGORIES + ("common",)
CONDITIONS = ("genuine", "zero_effort", "mimicry")
POOLS = ("native", "nonnative", "all")  # same nationality, other nationalities, unconstrained
ATTACK_SESSIONS = ("zero_effort", "mimicry")


@dataclass
class RankedTargets:
    """Targets ordered by decreasing score against one attacker."""

    attacker_id: str
    entries: list  # [(target_id, score)]
    filter_tag: str = "all"
    profile_id: str = ""

    def __post_init__(self):
        self.entries = [(str(t), float(s)) for t, s in self.entries]
        for (ta, sa), (tb, sb) in zip(self.entries, self.entries[1:]):
            if sa < sb or (sa == sb and ta > tb):
                raise DataError(f"ranking for {self.attacker_id} is not sorted at {tb}")

    @property
    def ids(self):
        return [t for t, _ in self.entries]

    @property
    def scores(self):
        return np.array([s for _, s in self.entries])

    def score_of(self, target_id):
        for t, s in self.entries:
            if t == target_id:
                return s
        raise KeyError(target_id)


@dataclass(frozen=True)
class TargetAssignment:
    attacker_id: str
    target_id: str
    rank_category: str
    language_pool: str
    score: float = float("nan")

    def __post_init__(self):
        if self.rank_category not in ALL_CATEGORIES:
            raise DataError(f"unknown rank category {self.rank_category!r}")
        if self.language_pool not in POOLS:
            raise DataError(f"unknown language pool {self.language_pool!r}")


@dataclass(frozen=True)
class AttackTrial:
    attacker_id: str
    target_id: str
    rank_category: str
    language_pool: str
    condition: str
    enroll_ids: tuple
    test_id: str
    prompt_id: str = ""

    @property
    def hypothesis_label(self):
        return "target" if self.condition == "genuine" else "nontarget"

    @property
    def domain_tag(self):
        return "target_domain" if self.condition == "genuine" else "cross_domain"


@dataclass
class AttackTrialSet:
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def by_condition(self, condition):
        return [t for t in self.trials if t.condition == condition]


@dataclass(frozen=True)
class ScoredTrial:
    trial: AttackTrial
    llr: float
    profile_id: str = ""


# ---------------------------------------------------------------------------
# ranking and selection
# ---------------------------------------------------------------------------

def rank_targets(attacker_id: str, attacker_vec, target_vecs: Mapping[str, object],
                 scorer: Callable[[Sequence, object], float],
                 speakers: Mapping[str, SpeakerRecord] | None = None,
                 keep: Callable[[SpeakerRecord], bool] | None = None,
                 filter_tag="all", profile_id="") -> RankedTargets:
    """Score every (filtered) target against the attacker and sort.

    ``scorer(enroll_list, test)`` returns an LLR; the target is enrolled and
    the attacker is the test side.  Ties are broken by target id.
    """
    rows = []
    for tid in sorted(target_vecs):
        if tid == attacker_id:
            continue
        if keep is not None:
            if speakers is None or tid not in speakers:
                raise DataError(f"no speaker record for target {tid}")
            if not keep(speakers[tid]):
                continue
        rows.append((tid, float(scorer([target_vecs[tid]], attacker_vec))))
    if not rows:
        raise DataError(f"no targets left to rank for attacker {attacker_id}")
    rows.sort(key=lambda r: (-r[1], r[0]))
    return RankedTargets(attacker_id, rows, filter_tag, profile_id)


def select_targets(ranked: RankedTargets, language_pool: str) -> dict[str, TargetAssignment]:
    """Closest (rank 0), median (floor((n-1)/2)) and furthest (n-1) targets."""
    n = len(ranked.entries)
    if n < 3:
        raise DataError(f"attacker {ranked.attacker_id}: need at least 3 ranked targets, got {n}")
    picks = {"closest": 0, "median": (n - 1) // 2, "furthest": n - 1}
    return {cat: TargetAssignment(ranked.attacker_id, ranked.entries[i][0], cat, language_pool,
                                  ranked.entries[i][1])
            for cat, i in picks.items()}


@dataclass(frozen=True)
class UtteranceCandidate:
    utterance_id: str
    score: float
    active_speech_s: float
    quality_ok: bool = True


def select_utterances(candidates: Sequence[UtteranceCandidate], category: str,
                      min_active_speech_s: float = 30.0) -> list[str]:
    """Greedy per-utterance selection until the active speech budget is met.

    Candidates are ordered by score descending (closest/common), ascending
    (furthest) or by distance to the mean score (median).  Utterances
    flagged by quality control are skipped.
    """
    usable = [c for c in candidates if c.quality_ok]
    if not usable:
        raise DataError("no usable utterances to select from")
    if category in ("closest", "common"):
        order = sorted(usable, key=lambda c: (-c.score, c.utterance_id))
    elif category == "furthest":
        order = sorted(usable, key=lambda c: (c.score, c.utterance_id))
    elif category == "median":
        mu = float(np.mean([c.score for c in usable]))
        order = sorted(usable, key=lambda c: (abs(c.score - mu), c.utterance_id))
    else:
        raise DataError(f"unknown selection category {category!r}")
    chosen, total = [], 0.0
    for c in order:
        if total >= min_active_speech_s:
            break
        chosen.append(c.utterance_id)
        total += c.active_speech_s
    if total < min_active_speech_s:
        warnings.warn(f"only {total:.1f}s of active speech available "
                      f"(wanted {min_active_speech_s:.1f}s); using all {len(chosen)} utterances",
                      RuntimeWarning, stacklevel=2)
    return chosen


def build_attack_trials(assignments: Iterable[TargetAssignment], manifest: Manifest,
                        test_utterances: Mapping[str, Sequence[str]]) -> AttackTrialSet:
    """Genuine, zero-effort and mimicry trials for every assignment.

    The target's test utterances fix the prompts; attacker utterances of
    each attack session are paired by prompt.  Enrollment uses the target's
    remaining utterances, so no test utterance is ever enrolled.
    """
    out = []
    for a in assignments:
        tests = list(test_utterances.get(a.target_id, ()))
        if not tests:
            raise DataError(f"no test utterances listed for target {a.target_id}")
        test_set = set(tests)
        target_utts = manifest.utterances_of(a.target_id)
        enroll = tuple(sorted(u.utterance_id for u in target_utts
                              if u.utterance_id not in test_set and u.session not in ATTACKER_SESSIONS
                              and u.quality_ok))
        if not enroll:
            raise DataError(f"target {a.target_id} has no enrollment utterances left")
        for tid in sorted(tests):
            tu = manifest.utterance(tid)
            if tu.speaker_id != a.target_id:
                raise DataError(f"test utterance {tid} does not belong to target {a.target_id}")
            prompt = tu.prompt_id or tu.utterance_id
            out.append(AttackTrial(a.attacker_id, a.target_id, a.rank_category, a.language_pool,
                                   "genuine", enroll, tid, prompt))
            for session in ATTACK_SESSIONS:
                matches = sorted(u.utterance_id for u in manifest.utterances_of(a.attacker_id, session)
                                 if (u.prompt_id or u.utterance_id) == prompt
                                 and recorded_for(u.utterance_id, a.target_id))
                if not matches:
                    raise DataError(f"attacker {a.attacker_id} has no {session} utterance for "
                                    f"prompt {prompt} (target {a.target_id})")
                for m in matches:
                    out.append(AttackTrial(a.attacker_id, a.target_id, a.rank_category,
                                           a.language_pool, session, enroll, m, prompt))
    return AttackTrialSet(out)


@dataclass(frozen=True)
class DomainTrial:
    domain_tag: str
    hypothesis: str
    enroll_ids: tuple
    test_id: str


def build_domain_trials(trials: Sequence[AttackTrial], manifest: Manifest) -> list[DomainTrial]:
    """Same- and different-speaker trials within and across recording domains.

    Target domain: target enrollment against the target's own test
    utterances and against other targets' test utterances.  Attacker
    domain: an attacker's natural utterances against their own and other
    attackers' zero-effort utterances.  Cross domain: target enrollment
    against attacker zero-effort utterances (always different speakers).
    """
    enroll = {}
    tests: dict[str, set] = {}
    zero: dict[str, set] = {}
    for t in trials:
        enroll.setdefault(t.target_id, t.enroll_ids)
        if t.condition == "genuine":
            tests.setdefault(t.target_id, set()).add(t.test_id)
        elif t.condition == "zero_effort":
            zero.setdefault(t.attacker_id, set()).add(t.test_id)
    natural = {a: tuple(sorted(u.utterance_id for u in manifest.utterances_of(a, "natural")
                               if u.quality_ok)) for a in zero}
    out = []
    for tgt in sorted(enroll):
        for other in sorted(tests):
            for uid in sorted(tests[other]):
                out.append(DomainTrial("target_domain", "target" if other == tgt else "nontarget",
                                       enroll[tgt], uid))
        for att in sorted(zero):
            for uid in sorted(zero[att]):
                out.append(DomainTrial("cross_domain", "nontarget", enroll[tgt], uid))
    for att in sorted(zero):
        if not natural[att]:
            continue
        for other in sorted(zero):
            for uid in sorted(zero[other]):
                out.append(DomainTrial("attacker_domain", "target" if other == att else "nontarget",
                                       natural[att], uid))
    return out


def attack_utterance_id(attacker_id, target_id, session, prompt_id):
    """Id for an attack-session utterance recorded against one target."""
    return f"{attacker_id}__{target_id}__{session}__{prompt_id}"


def recorded_for(utterance_id, target_id):
    """False only for attack utterances explicitly recorded for another target."""
    parts = utterance_id.split("__")
    return len(parts) != 4 or parts[1] == target_id


def score_trials(trials: Iterable[AttackTrial], score_fn: Callable[[Sequence[str], str], float],
                 profile_id="") -> list[ScoredTrial]:
    return [ScoredTrial(t, float(score_fn(list(t.enroll_ids), t.test_id)), profile_id)
            for t in trials]


# ---------------------------------------------------------------------------
# transfer report
# ---------------------------------------------------------------------------

def _mean_ci(values):
    from .analysis import mean_ci
    return mean_ci(values)


def transfer_report(public: Sequence[RankedTargets], black_box: Sequence[RankedTargets],
                    assignments: Sequence[TargetAssignment],
                    black_trials: Sequence[ScoredTrial] | None = None) -> dict:
    """Does the public-system ordering carry over to the attacked system?

    For each (attacker, pool) the attacked-system scores of the closest,
    median and furthest targets are averaged (over attack trials when
    given, otherwise the ranking score itself); ``order_preserved`` checks
    closest > median > furthest.  Spearman correlation compares the two
    full rankings over their common targets.
    """
    black = {(r.attacker_id, r.filter_tag): r for r in black_box}
    pub = {(r.attacker_id, r.filter_tag): r for r in public}
    groups: dict[tuple, dict] = {}
    for a in assignments:
        if a.rank_category not in CATEGORIES:
            continue
        groups.setdefault((a.attacker_id, a.language_pool), {})[a.rank_category] = a
    entries = []
    for (att, pool), cats in sorted(groups.items()):
        missing = [c for c in CATEGORIES if c not in cats]
        if missing:
            raise DataError(f"attacker {att} ({pool}): missing categories {missing}")
        means = {}
        for c in CATEGORIES:
            a = cats[c]
            if black_trials is not None:
                vals = [s.llr for s in black_trials
                        if s.trial.attacker_id == att and s.trial.language_pool == pool
                        and s.trial.rank_category == c and s.trial.condition != "genuine"]
            else:
                r = _find_ranking(black, att, pool)
                vals = [r.score_of(a.target_id)]
            if not vals:
                raise DataError(f"attacker {att} ({pool}): no attacked-system scores for {c}")
            m, h = _mean_ci(vals)
            means[c] = {"target_id": a.target_id, "mean": m, "ci95": h, "n": len(vals)}
        rho = float("nan")
        rp, rb = _find_ranking(pub, att, pool, required=False), _find_ranking(black, att, pool, required=False)
        if rp is not None and rb is not None:
            sb = dict(rb.entries)
            common = [t for t in rp.ids if t in sb]
            if len(common) >= 3:
                rho = float(sps.spearmanr([rp.score_of(t) for t in common],
                                          [sb[t] for t in common]).statistic)
        entries.append({
            "attacker_id": att, "language_pool": pool, "category_means": means,
            "order_preserved": bool(means["closest"]["mean"] > means["median"]["mean"]
                                    > means["furthest"]["mean"]),
            "spearman": rho,
        })
    n_ok = sum(e["order_preserved"] for e in entries)
    rhos = [e["spearman"] for e in entries if np.isfinite(e["spearman"])]
    return {"schema_version": 1, "entries": entries,
            "summary": {"n_entries": len(entries), "n_order_preserved": n_ok,
                        "median_spearman": float(np.median(rhos)) if rhos else float("nan")}}


def _find_ranking(table, att, pool, required=True):
    for tag in (pool, "all"):
        if (att, tag) in table:
            return table[(att, tag)]
    matches = [r for (a, _), r in table.items() if a == att]
    if len(matches) == 1:
        return matches[0]
    if required:
        raise DataError(f"no ranking for attacker {att} in pool {pool}")
    return None


# ---------------------------------------------------------------------------
# delimited I/O
# ---------------------------------------------------------------------------

def write_rankings(path, rankings: Sequence[RankedTargets]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attacker_id", "filter_tag", "profile_id", "rank", "target_id", "score"])
        for r in rankings:
            for i, (t, s) in enumerate(r.entries):
                w.writerow([r.attacker_id, r.filter_tag, r.profile_id, i, t, repr(s)])


def read_rankings(path) -> list[RankedTargets]:
    groups: dict[tuple, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["attacker_id"], row["filter_tag"], row.get("profile_id", ""))
            groups.setdefault(key, []).append((int(row["rank"]), row["target_id"], float(row["score"])))
    return [RankedTargets(a, [(t, s) for _, t, s in sorted(rows)], tag, pid)
            for (a, tag, pid), rows in groups.items()]


def write_assignments(path, assignments: Sequence[TargetAssignment]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attacker_id", "target_id", "rank_category", "language_pool", "score"])
        for a in assignments:
            w.writerow([a.attacker_id, a.target_id, a.rank_category, a.language_pool, repr(a.score)])


def read_assignments(path) -> list[TargetAssignment]:
    with open(path, newline="") as fh:
        return [TargetAssignment(r["attacker_id"], r["target_id"], r["rank_category"],
                                 r["language_pool"], float(r.get("score") or "nan"))
                for r in csv.DictReader(fh)]


TRIAL_COLUMNS = ["attacker_id", "target_id", "rank_category", "language_pool", "condition",
                 "enroll_ids", "test_id", "prompt_id", "hypothesis_label", "domain_tag",
                 "profile_id", "llr"]


def write_trials(path, trials: Iterable, ):
    """Write AttackTrial or ScoredTrial rows (enrollment ids joined by ';')."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for t in trials:
            llr, pid = "", ""
            if isinstance(t, ScoredTrial):
                llr, pid, t = repr(t.llr), t.profile_id, t.trial
            w.writerow([t.attacker_id, t.target_id, t.rank_category, t.language_pool, t.condition,
                        ";".join(t.enroll_ids), t.test_id, t.prompt_id, t.hypothesis_label,
                        t.domain_tag, pid, llr])


def read_trials(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            t = AttackTrial(r["attacker_id"], r["target_id"], r["rank_category"], r["language_pool"],
                            r["condition"], tuple(x for x in r["enroll_ids"].split(";") if x),
                            r["test_id"], r.get("prompt_id", ""))
            out.append(ScoredTrial(t, float(r["llr"]), r.get("profile_id", ""))
                       if r.get("llr") else t)
    return out


def read_test_lists(path) -> dict[str, list[str]]:
    """CSV with columns target_id, utterance_id."""
    out: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["target_id"], []).append(r["utterance_id"])
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))
