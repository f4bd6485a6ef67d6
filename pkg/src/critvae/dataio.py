"""Corpus ingestion: parse interaction files, binarize ratings, split per
user, and build the interaction / keyphrase matrices.

User keyphrase dislikes are never materialized: a user's dislike row is by
definition the complement of their like row, and consumers get it through
:meth:`InteractionData.kminus_rows`.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .container import DATASET_MAGIC, read_container, write_container
from .errors import ConfigError, EmptyDatasetError, ParseError
from .numerics import rng_from

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}

# Stream salt for the per-user split shuffle (see numerics.rng_from).
SPLIT_SALT = 1


@dataclass
class RawInteraction:
    user_id: str
    item_id: str
    rating: float
    keyphrases: list

    def __post_init__(self):
        self.keyphrases = [k.strip().lower() for k in self.keyphrases if k.strip()]


@dataclass
class DatasetStats:
    users: int
    items: int
    interactions: int
    sparsity: float
    keyphrases: int

    def to_dict(self):
        return {
            "users": self.users,
            "items": self.items,
            "interactions": self.interactions,
            "sparsity": self.sparsity,
            "keyphrases": self.keyphrases,
        }


def _parse_record(obj, line):
    try:
        user = str(obj["user"])
        item = str(obj["item"])
        rating = float(obj["rating"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad interaction record ({exc})", line=line) from exc
    if not np.isfinite(rating):
        raise ParseError("rating is not finite", line=line)
    keyphrases = obj.get("keyphrases") or []
    if isinstance(keyphrases, str):
        keyphrases = keyphrases.split("|")
    return RawInteraction(user, item, rating, [str(k) for k in keyphrases])


def load_interactions(path, format="jsonl"):
    """Parse a JSONL or CSV interaction file into RawInteraction records.

    Unknown columns are ignored; keyphrases are lower-cased and trimmed.
    Duplicate (user, item) rows keep the last occurrence (with a warning).
    """
    records = []
    if format == "jsonl":
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON ({exc.msg})", line=line_no) from exc
                records.append(_parse_record(obj, line_no))
    elif format == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for line_no, row in enumerate(reader, start=2):  # header is line 1
                if row.get("rating") in (None, ""):
                    raise ParseError("missing rating", line=line_no)
                records.append(_parse_record(row, line_no))
    else:
        raise ConfigError(f"unknown input format {format!r} (expected jsonl or csv)")

    if not records:
        raise EmptyDatasetError(f"{path}: no interaction records")

    deduped: dict = {}
    for rec in records:
        key = (rec.user_id, rec.item_id)
        if key in deduped:
            warnings.warn(
                f"duplicate interaction for {key}, keeping the last occurrence",
                stacklevel=2,
            )
        deduped[key] = rec
    return list(deduped.values())


def binarize(rating, threshold):
    """1 iff rating is strictly above the threshold."""
    return 1 if rating > threshold else 0


class InteractionData:
    """Immutable processed corpus: positives with split tags plus keyphrase
    matrices and id maps."""

    def __init__(
        self,
        user_ids,
        item_ids,
        keyphrases,
        inter_users,
        inter_items,
        inter_splits,
        kplus,
        kitem,
        n_dropped_users=0,
    ):
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)
        self.keyphrases = list(keyphrases)
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {v: i for i, v in enumerate(self.item_ids)}
        self.keyphrase_index = {k: i for i, k in enumerate(self.keyphrases)}
        self.inter_users = np.asarray(inter_users, dtype=np.int32)
        self.inter_items = np.asarray(inter_items, dtype=np.int32)
        self.inter_splits = np.asarray(inter_splits, dtype=np.int8)
        self.kplus = sparse.csr_matrix(kplus, dtype=np.float64)
        self.kitem = sparse.csr_matrix(kitem, dtype=np.float64)
        self.n_dropped_users = int(n_dropped_users)
        self._matrices: dict = {}

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_keyphrases(self):
        return len(self.keyphrases)

    def matrix(self, split=None):
        """Binary user x item CSR over positives (optionally one split)."""
        if split not in self._matrices:
            if split is None:
                users, items = self.inter_users, self.inter_items
            else:
                mask = self.inter_splits == _SPLIT_CODE[split]
                users, items = self.inter_users[mask], self.inter_items[mask]
            m = sparse.csr_matrix(
                (np.ones(len(users)), (users, items)),
                shape=(self.n_users, self.n_items),
            )
            m.data[:] = 1.0  # collapse any duplicates
            self._matrices[split] = m
        return self._matrices[split]

    def items_of(self, user, split):
        """Sorted item indices this user interacted with in a split."""
        mask = (self.inter_users == user) & (self.inter_splits == _SPLIT_CODE[split])
        return np.unique(self.inter_items[mask])

    def seen_items(self, user):
        """Item indices with any interaction (all splits) by this user."""
        return np.unique(self.inter_items[self.inter_users == user])

    def r_rows(self, users, split="train"):
        """Dense interaction rows for the encoder input."""
        return np.asarray(self.matrix(split)[users].todense(), dtype=np.float64)

    def kplus_rows(self, users):
        return np.asarray(self.kplus[users].todense(), dtype=np.float64)

    def kminus_rows(self, users):
        """Dense complement view of the like rows (dislikes are implicit)."""
        return 1.0 - self.kplus_rows(users)

    def kitem_row(self, item):
        return np.asarray(self.kitem[item].todense(), dtype=np.float64).ravel()

    def kitem_set(self, item):
        """Sorted keyphrase indices in an item's profile."""
        return np.sort(self.kitem.indices[self.kitem.indptr[item] : self.kitem.indptr[item + 1]])

    def keyphrase_popularity(self):
        """Train-corpus keyphrase frequency: how many users mention each one."""
        return np.asarray(self.kplus.sum(axis=0)).ravel()

    def stats(self):
        n_inter = len(self.inter_users)
        return DatasetStats(
            users=self.n_users,
            items=self.n_items,
            interactions=n_inter,
            sparsity=1.0 - n_inter / (self.n_users * self.n_items),
            keyphrases=self.n_keyphrases,
        )

    def save(self, path, config_echo=None):
        header = {
            "kind": "dataset",
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "keyphrases": self.keyphrases,
            "n_dropped_users": self.n_dropped_users,
            "config": config_echo or {},
        }
        kplus = sparse.coo_matrix(self.kplus)
        kitem = sparse.coo_matrix(self.kitem)
        arrays = [
            ("inter_users", self.inter_users.astype("<i4")),
            ("inter_items", self.inter_items.astype("<i4")),
            ("inter_splits", self.inter_splits.astype("<i1")),
            ("kplus_rows", kplus.row.astype("<i4")),
            ("kplus_cols", kplus.col.astype("<i4")),
            ("kitem_rows", kitem.row.astype("<i4")),
            ("kitem_cols", kitem.col.astype("<i4")),
        ]
        write_container(path, DATASET_MAGIC, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path, DATASET_MAGIC)
        n_users = len(header["user_ids"])
        n_items = len(header["item_ids"])
        n_keyphrases = len(header["keyphrases"])
        kplus = sparse.csr_matrix(
            (np.ones(len(arrays["kplus_rows"])), (arrays["kplus_rows"], arrays["kplus_cols"])),
            shape=(n_users, n_keyphrases),
        )
        kitem = sparse.csr_matrix(
            (np.ones(len(arrays["kitem_rows"])), (arrays["kitem_rows"], arrays["kitem_cols"])),
            shape=(n_items, n_keyphrases),
        )
        return cls(
            header["user_ids"],
            header["item_ids"],
            header["keyphrases"],
            arrays["inter_users"],
            arrays["inter_items"],
            arrays["inter_splits"],
            kplus,
            kitem,
            n_dropped_users=header.get("n_dropped_users", 0),
        )


def _split_counts(n, ratios):
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    return n - n_val - n_test, n_val, n_test


def build_dataset(records, threshold, split_ratios=(0.6, 0.2, 0.2), seed=0):
    """Binarize, index, and split a record list into an InteractionData.

    Only positives (rating strictly above the threshold) are kept. Splits are
    assigned per user by a seeded shuffle of that user's positives (stream:
    ``rng_from(seed, SPLIT_SALT, user_index)``). A user's like row unions the
    keyphrases of their train-split reviews only; an item's profile unions
    the keyphrases of all its train reviews.
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9 or min(split_ratios) < 0:
        raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {split_ratios}")

    positives = [r for r in records if binarize(r.rating, threshold)]
    if not positives:
        raise EmptyDatasetError("no positive interactions after binarization")

    by_user: dict = {}
    for rec in positives:
        by_user.setdefault(rec.user_id, []).append(rec)

    all_user_ids = {r.user_id for r in records}
    n_dropped = len(all_user_ids - set(by_user))
    if n_dropped:
        logger.info("dropped %d users with no positive interactions", n_dropped)

    user_ids = sorted(by_user)
    item_ids = sorted({r.item_id for r in positives})
    keyphrases = sorted({k for r in positives for k in r.keyphrases})
    user_index = {u: i for i, u in enumerate(user_ids)}
    item_index = {v: i for i, v in enumerate(item_ids)}
    kp_index = {k: i for i, k in enumerate(keyphrases)}

    inter_users, inter_items, inter_splits = [], [], []
    kplus_sets = [set() for _ in user_ids]
    kitem_sets = [set() for _ in item_ids]

    for user_id in user_ids:
        u = user_index[user_id]
        recs = sorted(by_user[user_id], key=lambda r: item_index[r.item_id])
        order = rng_from(seed, SPLIT_SALT, u).permutation(len(recs))
        n_train, n_val, _ = _split_counts(len(recs), split_ratios)
        for pos, idx in enumerate(order):
            rec = recs[idx]
            split = 0 if pos < n_train else (1 if pos < n_train + n_val else 2)
            inter_users.append(u)
            inter_items.append(item_index[rec.item_id])
            inter_splits.append(split)
            if split == 0:
                kp_idx = {kp_index[k] for k in rec.keyphrases}
                kplus_sets[u] |= kp_idx
                kitem_sets[item_index[rec.item_id]] |= kp_idx

    def to_csr(sets, n_cols):
        rows = [i for i, s in enumerate(sets) for _ in s]
        cols = [c for s in sets for c in sorted(s)]
        return sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(len(sets), n_cols)
        )

    return InteractionData(
        user_ids,
        item_ids,
        keyphrases,
        inter_users,
        inter_items,
        inter_splits,
        to_csr(kplus_sets, len(keyphrases)),
        to_csr(kitem_sets, len(keyphrases)),
        n_dropped_users=n_dropped,
    )


def dataset_stats(data):
    """Corpus counts and sparsity."""
    return data.stats()
