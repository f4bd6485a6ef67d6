"""Multi-step critiquing simulator and run comparison.

Each (user, target-item) pair with a test positive becomes one session: the
target is hidden among seeded-sampled unseen items, and the simulated user
critiques keyphrases (Pop or Diff strategy, one polarity per run) until the
target enters the top-N or the turn budget runs out.

Candidate pools are replayable: the per-pair stream is
``rng_from(seed, SIM_SALT, user, item)`` and the single draw is the
without-replacement choice of negative candidates from the user's sorted
unseen items. Selection state never depends on the model for the Pop
strategy, so critique sequences are model-independent there.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .critique import NEGATIVE, POSITIVE, CritiqueSession, normalize_polarity
from .errors import ConfigError, EmptyDatasetError
from .numerics import rng_from

SIM_SALT = 23

STRATEGIES = ("pop", "diff")


@dataclass
class SimConfig:
    polarity: str = POSITIVE
    strategy: str = "pop"
    top_n: int = 10
    max_turns: int = 10
    n_candidate_negatives: int = 299
    seed: int = 0
    confidence: float = 0.95

    def __post_init__(self):
        self.polarity = normalize_polarity(self.polarity)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r} (expected pop or diff)")
        if self.max_turns < 1:
            raise ConfigError("max_turns must be >= 1")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must be in (0, 1)")

    def to_dict(self):
        return {
            "polarity": self.polarity,
            "strategy": self.strategy,
            "top_n": self.top_n,
            "max_turns": self.max_turns,
            "n_candidate_negatives": self.n_candidate_negatives,
            "seed": self.seed,
            "confidence": self.confidence,
        }


@dataclass
class SessionOutcome:
    user: int
    item: int
    turns: int
    success: bool
    critiques: list


@dataclass
class SimResult:
    config: dict
    model_label: str
    variant: str
    n_sessions: int
    success_rate: float
    success_ci: float
    avg_length: float
    length_ci: float
    records: list = field(default_factory=list)

    @classmethod
    def from_json_dict(cls, obj):
        return cls(
            config=obj["config"],
            model_label=obj.get("model", "model"),
            variant=obj.get("variant", ""),
            n_sessions=obj["n_sessions"],
            success_rate=obj["success_rate"],
            success_ci=obj["success_ci"],
            avg_length=obj["avg_length"],
            length_ci=obj["length_ci"],
            records=[
                SessionOutcome(s["user"], s["item"], s["turns"], s["success"], s["critiques"])
                for s in obj.get("sessions", [])
            ],
        )

    def to_json_dict(self):
        return {
            "config": self.config,
            "model": self.model_label,
            "variant": self.variant,
            "n_sessions": self.n_sessions,
            "success_rate": self.success_rate,
            "success_ci": self.success_ci,
            "avg_length": self.avg_length,
            "length_ci": self.length_ci,
            "per_top_n": [
                {
                    "top_n": self.config["top_n"],
                    "success_rate": self.success_rate,
                    "success_ci": self.success_ci,
                    "avg_length": self.avg_length,
                    "length_ci": self.length_ci,
                }
            ],
            "sessions": [
                {
                    "user": r.user,
                    "item": r.item,
                    "turns": r.turns,
                    "success": r.success,
                    "critiques": r.critiques,
                }
                for r in self.records
            ],
        }


def confidence_halfwidth(samples, confidence=0.95):
    """Normal-approximation CI half-width: z * s / sqrt(n)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        return 0.0
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    return float(z * samples.std(ddof=1) / np.sqrt(samples.size))


def select_critique(
    strategy,
    polarity,
    *,
    target_profile,
    user_kplus,
    used,
    popularity,
    top_items,
    item_profiles,
    n_keyphrases,
):
    """Pick the next keyphrase to critique, or None when exhausted.

    Valid keyphrases follow the dataset-construction polarity rules with the
    predicted explanation replaced by the user's true likes: positive
    critiques come from the target profile minus the user's likes, negative
    ones from outside the target profile; each keyphrase is critiqued at most
    once per session. Pop picks the globally most frequent valid keyphrase;
    Diff picks the largest gap between the keyphrase's frequency among the
    current top-N items and its presence in the target profile. Ties go to
    the lowest index.
    """
    polarity = normalize_polarity(polarity)
    if polarity == POSITIVE:
        valid = sorted((set(target_profile) - set(user_kplus)) - set(used))
    else:
        valid = sorted((set(range(n_keyphrases)) - set(target_profile)) - set(used))
    if not valid:
        return None
    if strategy == "pop":
        scores = [popularity[k] for k in valid]
    elif strategy == "diff":
        n = max(len(top_items), 1)
        scores = []
        for k in valid:
            freq = sum(1 for i in top_items if k in item_profiles[i]) / n
            scores.append(abs(freq - (1.0 if k in target_profile else 0.0)))
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return valid[int(np.argmax(scores))]


def _candidate_pool(data, user, item, config):
    unseen = np.setdiff1d(np.arange(data.n_items), data.seen_items(user))
    n_neg = config.n_candidate_negatives
    if len(unseen) < n_neg:
        warnings.warn(
            f"user {user}: only {len(unseen)} unseen items for "
            f"{n_neg} requested negatives; shrinking pool",
            stacklevel=2,
        )
        n_neg = len(unseen)
    rng = rng_from(config.seed, SIM_SALT, user, item)
    negatives = unseen[rng.choice(len(unseen), size=n_neg, replace=False)]
    return np.union1d(negatives, [item])


def simulate(model, blender, data, config, model_label="model"):
    """Run every (user, test-target) session and aggregate the outcomes."""
    test = data.matrix("test")
    if test.nnz == 0:
        raise EmptyDatasetError("no test interactions to simulate on")

    users, items = test.nonzero()
    order = np.lexsort((items, users))
    popularity = data.keyphrase_popularity()
    item_profiles = [set(data.kitem_set(i).tolist()) for i in range(data.n_items)]

    unique_users = np.unique(users)
    zmat = model.latent_means(data, unique_users)
    z_by_user = {int(u): zmat[row] for row, u in enumerate(unique_users)}
    kplus_by_user = {
        int(u): set(np.flatnonzero(data.kplus_rows([u])[0]).tolist()) for u in unique_users
    }

    records = []
    for idx in order:
        u, i = int(users[idx]), int(items[idx])
        candidates = _candidate_pool(data, u, i, config)
        session = CritiqueSession(
            model,
            blender,
            z_by_user[u],
            seen_items=(),
            max_turns=config.max_turns,
        )
        target_profile = item_profiles[i]
        used: set = set()
        critiques = []
        success = False
        turns = 0

        if i in session.top_items(config.top_n, candidates=candidates):
            success = True
        else:
            for turn in range(1, config.max_turns + 1):
                choice = select_critique(
                    config.strategy,
                    config.polarity,
                    target_profile=target_profile,
                    user_kplus=kplus_by_user[u],
                    used=used,
                    popularity=popularity,
                    top_items=session.top_items(config.top_n, candidates=candidates),
                    item_profiles=item_profiles,
                    n_keyphrases=data.n_keyphrases,
                )
                if choice is None:
                    turns = turn - 1  # exhausted: failure with the turns used so far
                    break
                if config.polarity == POSITIVE:
                    assert choice in target_profile and choice not in kplus_by_user[u]
                else:
                    assert choice not in target_profile
                used.add(choice)
                critiques.append(int(choice))
                session.apply_critique(choice, config.polarity)
                turns = turn
                if i in session.top_items(config.top_n, candidates=candidates):
                    success = True
                    break
            else:
                turns = config.max_turns
        records.append(SessionOutcome(u, i, turns, success, critiques))

    flags = np.array([1.0 if r.success else 0.0 for r in records])
    # Budget failures carry turns == max_turns; exhausted sessions carry the
    # turns they actually used; successes carry the turn that hit.
    lengths = np.array([float(r.turns) for r in records])
    return SimResult(
        config=config.to_dict(),
        model_label=model_label,
        variant=model.variant_enum.value,
        n_sessions=len(records),
        success_rate=float(flags.mean()),
        success_ci=confidence_halfwidth(flags, config.confidence),
        avg_length=float(lengths.mean()),
        length_ci=confidence_halfwidth(lengths, config.confidence),
        records=records,
    )


CSV_COLUMNS = [
    "model",
    "variant",
    "polarity",
    "strategy",
    "top_n",
    "success_rate",
    "ci",
    "avg_length",
    "ci",
]


def compare_runs(results):
    """Aligned comparison rows for a list of SimResults.

    Results must agree on turn budget, pool size, and confidence level;
    seeds, models, polarities, strategies, and top-N may differ.
    """
    if not results:
        raise ValueError("compare_runs: need at least one result")
    fixed = {
        (r.config["max_turns"], r.config["n_candidate_negatives"], r.config["confidence"])
        for r in results
    }
    if len(fixed) != 1:
        raise ConfigError("compare_runs: inconsistent simulation configs")

    rows = []
    for r in sorted(
        results,
        key=lambda r: (
            r.model_label,
            r.variant,
            r.config["polarity"],
            r.config["strategy"],
            r.config["top_n"],
            r.config["seed"],
        ),
    ):
        for entry in r.to_json_dict()["per_top_n"]:
            rows.append(
                {
                    "model": r.model_label,
                    "variant": r.variant,
                    "polarity": r.config["polarity"],
                    "strategy": r.config["strategy"],
                    "top_n": entry["top_n"],
                    "success_rate": entry["success_rate"],
                    "success_ci": entry["success_ci"],
                    "avg_length": entry["avg_length"],
                    "length_ci": entry["length_ci"],
                }
            )
    return rows


def comparison_csv(rows):
    """Render comparison rows with the fixed column layout."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["model"],
                row["variant"],
                row["polarity"],
                row["strategy"],
                row["top_n"],
                f"{row['success_rate']:.6f}",
                f"{row['success_ci']:.6f}",
                f"{row['avg_length']:.6f}",
                f"{row['length_ci']:.6f}",
            ]
        )
    return buf.getvalue()
