"""Score aggregation and reporting.

Category means with 95% confidence intervals, content-paired
mimicry-minus-natural deltas, per-domain score histograms, prosody change
flags and listening-test trial lists.  Everything here is a pure function
of its input tables.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, astuple, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .attack import ALL_CATEGORIES, CONDITIONS, POOLS, ScoredTrial, TargetAssignment
from .corpus import Manifest
from .errors import DataError

REPORT_SCHEMA_VERSION = 1
Z95 = 1.96


def mean_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and normal-approximation CI half-width (z * std / sqrt(n)).

    The standard deviation is the population one (ddof=0), so {0, 2} gives
    1.96 / sqrt(2).  A single value has half-width 0.
    """
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise DataError("mean_ci of an empty sample")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = Z95 if level == 0.95 else float(norm.ppf(0.5 + level / 2))
    m = float(x.mean())
    if x.size < 2:
        return m, 0.0
    return m, float(z * x.std() / math.sqrt(x.size))


# ---------------------------------------------------------------------------
# category summaries
# ---------------------------------------------------------------------------

def _order(value, universe):
    return universe.index(value) if value in universe else len(universe)


@dataclass(frozen=True)
class CategorySummary:
    rank_category: str
    language_pool: str
    condition: str
    mean_llr: float
    ci_halfwidth: float
    n_trials: int
    profile_id: str = ""

    def __post_init__(self):
        if self.n_trials < 1:
            raise DataError("category summary needs at least one trial")
        if not self.ci_halfwidth >= 0:
            raise DataError("negative confidence half-width")


def summarize_categories(scores: Iterable[ScoredTrial]) -> list[CategorySummary]:
    """One summary per (profile, category, pool, condition) present."""
    cells: dict[tuple, list] = {}
    for s in scores:
        t = s.trial
        cells.setdefault((s.profile_id, t.rank_category, t.language_pool, t.condition), []).append(s.llr)
    out = []
    for (pid, cat, pool, cond), vals in cells.items():
        # sort values so float summation does not depend on trial order
        m, h = mean_ci(sorted(vals))
        out.append(CategorySummary(cat, pool, cond, m, h, len(vals), pid))
    out.sort(key=lambda c: (c.profile_id, _order(c.rank_category, ALL_CATEGORIES), c.rank_category,
                            _order(c.language_pool, POOLS), _order(c.condition, CONDITIONS)))
    return out


# ---------------------------------------------------------------------------
# mimicry deltas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MimicryDelta:
    rank_category: str
    delta_mean: float  # mimicry - zero_effort
    ci_halfwidth: float
    n_pairs: int
    profile_id: str = ""
    n_unpaired: int = 0


def mimicry_deltas(scores: Iterable[ScoredTrial]) -> list[MimicryDelta]:
    """Per-pair mimicry minus zero-effort LLR, averaged per rank category.

    Trials pair when attacker, target, pool, prompt and enrollment agree.
    Trials without a partner are dropped and counted in ``n_unpaired``.
    """
    slots: dict[tuple, dict[str, list]] = {}
    for s in scores:
        t = s.trial
        if t.condition not in ("zero_effort", "mimicry"):
            continue
        key = (s.profile_id, t.rank_category, t.attacker_id, t.target_id, t.language_pool,
               t.prompt_id or t.test_id, t.enroll_ids)
        slots.setdefault(key, {"zero_effort": [], "mimicry": []})[t.condition].append(s.llr)
    diffs: dict[tuple, list] = {}
    unpaired: dict[tuple, int] = {}
    for key, by in slots.items():
        cell = key[:2]
        ze, mi = sorted(by["zero_effort"]), sorted(by["mimicry"])
        k = min(len(ze), len(mi))
        diffs.setdefault(cell, []).extend(b - a for a, b in zip(ze[:k], mi[:k]))
        unpaired[cell] = unpaired.get(cell, 0) + len(ze) + len(mi) - 2 * k
    out = []
    for cell in set(diffs) | set(unpaired):
        d = diffs.get(cell, [])
        if not d:
            continue
        m, h = mean_ci(sorted(d))
        out.append(MimicryDelta(cell[1], m, h, len(d), cell[0], unpaired.get(cell, 0)))
    out.sort(key=lambda r: (r.profile_id, _order(r.rank_category, ALL_CATEGORIES), r.rank_category))
    return out


SYSTEM_LABELS = {"A": "Attacker's ASV", "B": "Attacked ASV"}
DELTA_COLUMNS = ["profile_id", "rank_category", "delta_mean", "ci_halfwidth", "n_pairs", "n_unpaired"]


def render_delta_table(deltas: Sequence[MimicryDelta], labels: Mapping[str, str] = SYSTEM_LABELS,
                       decimals: int = 1) -> str:
    """Plain-text table: one row per system, one column per rank category."""
    profiles = sorted({d.profile_id for d in deltas}, key=lambda p: (_order(p, list(labels)), p))
    cell = {(d.profile_id, d.rank_category): d for d in deltas}
    header = ["ASV system"] + [c.capitalize() for c in ALL_CATEGORIES]
    rows = [header]
    for p in profiles:
        row = [labels.get(p, p)]
        for c in ALL_CATEGORIES:
            d = cell.get((p, c))
            row.append("n/a" if d is None else
                       f"{d.delta_mean:.{decimals}f} ± {d.ci_halfwidth:.{decimals}f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def write_deltas(path, deltas: Sequence[MimicryDelta]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DELTA_COLUMNS)
        for d in deltas:
            w.writerow([d.profile_id, d.rank_category, repr(d.delta_mean), repr(d.ci_halfwidth),
                        d.n_pairs, d.n_unpaired])


def read_deltas(path) -> list[MimicryDelta]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("profile_id", "rank_category", "delta_mean", "ci_halfwidth")
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing delta columns {missing}")
        try:
            return [MimicryDelta(r["rank_category"], float(r["delta_mean"]), float(r["ci_halfwidth"]),
                                 int(r.get("n_pairs") or 0), r["profile_id"],
                                 int(r.get("n_unpaired") or 0)) for r in reader]
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# domain score distributions
# ---------------------------------------------------------------------------

DOMAIN_TAGS = ("target_domain", "attacker_domain", "cross_domain")
HYPOTHESES = ("target", "nontarget")
N_BINS = 40


@dataclass(frozen=True)
class DomainDistribution:
    domain_tag: str
    hypothesis: str
    bin_edges: tuple
    counts: tuple
    mean: float
    std: float
    n_trials: int
    profile_id: str = ""

    def __post_init__(self):
        if sum(self.counts) != self.n_trials:
            raise DataError("histogram counts do not sum to the trial count")


def domain_distributions(tagged: Iterable[tuple], bins: int = N_BINS,
                         profile_id: str = "") -> list[DomainDistribution]:
    """Histograms of ``(domain_tag, hypothesis, score)`` triples.

    All cells share ``bins`` equal-width bins over the pooled score range,
    so the histograms are directly comparable.
    """
    cells: dict[tuple, list] = {}
    for dom, hyp, score in tagged:
        if dom not in DOMAIN_TAGS or hyp not in HYPOTHESES:
            raise DataError(f"unknown domain/hypothesis tag ({dom!r}, {hyp!r})")
        cells.setdefault((dom, hyp), []).append(float(score))
    if not cells:
        return []
    pooled = np.concatenate([np.asarray(v) for v in cells.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for (dom, hyp), vals in sorted(cells.items(), key=lambda kv: (DOMAIN_TAGS.index(kv[0][0]),
                                                                   HYPOTHESES.index(kv[0][1]))):
        v = np.sort(np.asarray(vals))
        counts, _ = np.histogram(v, bins=edges)
        out.append(DomainDistribution(dom, hyp, tuple(float(e) for e in edges),
                                      tuple(int(c) for c in counts), float(v.mean()),
                                      float(v.std()), int(v.size), profile_id))
    return out


# ---------------------------------------------------------------------------
# listening-test trial lists
# ---------------------------------------------------------------------------

LISTENING_GROUPS = ("target_vs_target", "target_vs_zero_effort", "target_vs_mimicry",
                    "attacker_vs_zero_effort", "attacker_vs_mimicry")
TRIPLET_GROUPS = LISTENING_GROUPS[:3]


@dataclass(frozen=True)
class ListeningTrial:
    trial_id: str
    group: str
    sample_a: str
    sample_b: str
    presentation_order_seed: int
    attacker_id: str = ""
    target_id: str = ""
    prompt_id: str = ""
    enroll_id: str = ""  # the enrollment side, whichever position it was shuffled to

    def __post_init__(self):
        if self.group not in LISTENING_GROUPS:
            raise DataError(f"unknown listening group {self.group!r}")


def _closest_duration(candidates, duration):
    if not candidates:
        return None
    return min(candidates, key=lambda u: (abs(u.duration_s - duration), u.utterance_id))


def generate_listening_trials(manifest: Manifest, assignments: Sequence[TargetAssignment],
                              tests: Mapping[str, Sequence[str]], per_combination: int = 5,
                              seed: int = 0) -> list[ListeningTrial]:
    """Five equal-size groups of pairwise listening trials.

    For each attacker-target combination ``per_combination`` target test
    prompts are used.  For every prompt one target enrollment utterance (the
    non-test utterance closest in duration to the test utterance) is shared
    by the target-vs-target, target-vs-zero-effort and target-vs-mimicry
    trials, whose three test samples all carry that prompt.  The two
    attacker groups compare an attacker natural utterance, again chosen by
    duration, with the same zero-effort and mimicry samples.  Sample order
    within each trial and the global order are shuffled with ``seed``.
    """
    from .attack import recorded_for

    if not 4 <= per_combination <= 7:
        raise DataError("per_combination must lie in 4..7")
    rng = np.random.default_rng(seed)
    staged = []
    seen = set()
    for a in assignments:
        combo = (a.attacker_id, a.target_id)
        if combo in seen:
            continue
        seen.add(combo)
        test_ids = sorted(tests.get(a.target_id, ()))
        test_set = set(test_ids)
        enroll_pool = [u for u in manifest.utterances_of(a.target_id)
                       if u.utterance_id not in test_set and u.quality_ok]
        natural = [u for u in manifest.utterances_of(a.attacker_id, "natural") if u.quality_ok]
        usable = []
        for tid in test_ids:
            test = manifest.utterance(tid)
            prompt = test.prompt_id or tid
            attack = {}
            for session in ("zero_effort", "mimicry"):
                m = sorted(u.utterance_id for u in manifest.utterances_of(a.attacker_id, session)
                           if (u.prompt_id or u.utterance_id) == prompt
                           and recorded_for(u.utterance_id, a.target_id))
                if m:
                    attack[session] = m[0]
            if len(attack) == 2:
                usable.append((test, prompt, attack))
        if len(usable) < per_combination or not enroll_pool or not natural:
            raise DataError(f"attacker {a.attacker_id} / target {a.target_id}: only {len(usable)} "
                            f"usable prompts (need {per_combination}) or missing enrollment audio")
        for test, prompt, attack in usable[:per_combination]:
            t_enroll = _closest_duration(enroll_pool, test.duration_s).utterance_id
            a_enroll = _closest_duration(natural, test.duration_s).utterance_id
            pairs = [("target_vs_target", t_enroll, test.utterance_id),
                     ("target_vs_zero_effort", t_enroll, attack["zero_effort"]),
                     ("target_vs_mimicry", t_enroll, attack["mimicry"]),
                     ("attacker_vs_zero_effort", a_enroll, attack["zero_effort"]),
                     ("attacker_vs_mimicry", a_enroll, attack["mimicry"])]
            for group, enroll, other in pairs:
                staged.append((group, enroll, other, a.attacker_id, a.target_id, prompt))
    order = rng.permutation(len(staged))
    swaps = rng.random(len(staged)) < 0.5
    seeds = rng.integers(0, 2 ** 31 - 1, size=len(staged))
    out = []
    for k, idx in enumerate(order):
        group, enroll, other, att, tgt, prompt = staged[idx]
        a_, b_ = (other, enroll) if swaps[idx] else (enroll, other)
        out.append(ListeningTrial(f"L{k + 1:04d}", group, a_, b_, int(seeds[idx]), att, tgt, prompt,
                                  enroll))
    return out


def check_triplets(trials: Sequence[ListeningTrial]):
    """Raise unless every (attacker, target, prompt) triplet shares one
    target enrollment utterance."""
    enroll: dict[tuple, set] = {}
    for t in trials:
        if t.group in TRIPLET_GROUPS:
            enroll.setdefault((t.attacker_id, t.target_id, t.prompt_id), set()).add(t.enroll_id)
    bad = [k for k, v in enroll.items() if len(v) != 1]
    if bad:
        raise DataError(f"triplets without a shared enrollment utterance: {bad[:3]}")


LISTENING_COLUMNS = ["trial_id", "group", "sample_a", "sample_b", "presentation_order_seed",
                     "attacker_id", "target_id", "prompt_id", "enroll_id"]


def write_listening_trials(path, trials: Sequence[ListeningTrial]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LISTENING_COLUMNS)
        for t in trials:
            w.writerow([getattr(t, c) for c in LISTENING_COLUMNS])


def read_listening_trials(path) -> list[ListeningTrial]:
    with open(path, newline="") as fh:
        return [ListeningTrial(r["trial_id"], r["group"], r["sample_a"], r["sample_b"],
                               int(r["presentation_order_seed"]), r["attacker_id"], r["target_id"],
                               r["prompt_id"], r["enroll_id"]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# prosody change report
# ---------------------------------------------------------------------------

PROSODY_PARAMETERS = ("rate", "f0_median", "f0_std", "formant_d")
# formant_d is already an attacker-to-target distance, so it has no target value
DISTANCE_PARAMETERS = ("formant_d",)


@dataclass(frozen=True)
class ParameterChange:
    attacker_id: str
    target_id: str
    parameter: str
    target_value: float
    natural_value: float
    mimicry_value: float
    natural_distance: float
    mimicry_distance: float
    improved: bool


def prosody_report(stats: Mapping[tuple, Mapping[str, Mapping[str, float]]]) -> list[ParameterChange]:
    """Did mimicry bring each parameter closer to the target?

    ``stats[(attacker, target)]`` maps condition (``target``,
    ``zero_effort``, ``mimicry``) to parameter values.  For ordinary
    parameters the distance is ``|value - target|``; ``formant_d`` values
    are distances already.  ``improved`` is a strict inequality.
    """
    out = []
    for (att, tgt) in sorted(stats):
        by = stats[(att, tgt)]
        for cond in ("zero_effort", "mimicry"):
            if cond not in by:
                raise DataError(f"attacker {att} / target {tgt}: missing {cond} statistics")
        for p in PROSODY_PARAMETERS:
            nat, mim = by["zero_effort"].get(p), by["mimicry"].get(p)
            if nat is None or mim is None:
                continue
            if p in DISTANCE_PARAMETERS:
                tv, dn, dm = float("nan"), abs(nat), abs(mim)
            else:
                if "target" not in by or p not in by["target"]:
                    raise DataError(f"attacker {att} / target {tgt}: missing target {p}")
                tv = by["target"][p]
                dn, dm = abs(nat - tv), abs(mim - tv)
            out.append(ParameterChange(att, tgt, p, float(tv), float(nat), float(mim), float(dn),
                                       float(dm), bool(dm < dn)))
    return out


PROSODY_CHANGE_COLUMNS = list(ParameterChange.__dataclass_fields__)


def write_prosody_changes(path, rows: Sequence[ParameterChange]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROSODY_CHANGE_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])


def read_prosody_changes(path) -> list[ParameterChange]:
    with open(path, newline="") as fh:
        return [ParameterChange(r["attacker_id"], r["target_id"], r["parameter"],
                                float(r["target_value"]), float(r["natural_value"]),
                                float(r["mimicry_value"]), float(r["natural_distance"]),
                                float(r["mimicry_distance"]), r["improved"] == "True")
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# report bundle
# ---------------------------------------------------------------------------

BUNDLE_FILE = "report.json"


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _finite(obj.item())
    return _finite(obj)


def build_bundle(summaries=(), deltas=(), distributions=(), prosody=(), transfer=None,
                 warnings=()) -> dict:
    return _clean({
        "schema_version": REPORT_SCHEMA_VERSION,
        "category_summaries": [asdict(s) for s in summaries],
        "mimicry_deltas": [asdict(d) for d in deltas],
        "delta_table": render_delta_table(deltas) if deltas else "",
        "domain_distributions": [asdict(d) for d in distributions],
        "prosody_changes": [asdict(p) for p in prosody],
        "transfer": transfer,
        "warnings": list(warnings),
    })


def write_bundle(out_dir, bundle: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / BUNDLE_FILE
    path.write_text(json.dumps(bundle, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_bundle(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    data = json.loads(path.read_text())
    check_schema(data, str(path))
    return data


def check_schema(data: dict, where=""):
    ver = data.get("schema_version") if isinstance(data, dict) else None
    if ver != REPORT_SCHEMA_VERSION:
        raise DataError(f"{where}: unsupported schema version {ver!r} "
                        f"(expected {REPORT_SCHEMA_VERSION})")
