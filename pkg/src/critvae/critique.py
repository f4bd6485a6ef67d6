"""Conversational critiquing: critique encoding, GRU blending conditioned on
polarity embeddings, synthetic critiquing datasets, and the self-supervised
max-margin blender training.

The blender owns two trainable polarity vectors and a single GRU cell over
``[e_polarity; z_user; z_critique]``; positive and negative critiques share
the GRU weights and differ only through the polarity slot and (for the
variants with a dislike expert) the encoder used for the critique latent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .container import BLENDER_MAGIC, read_container, write_container
from .errors import CheckpointError, ConfigError, EmptyDatasetError
from .numerics import Adam, GRUCell, ParamStore, rng_from, softmax, softmax_vjp

POSITIVE = "positive"
NEGATIVE = "negative"
POLARITIES = (POSITIVE, NEGATIVE)

_POLARITY_SYMBOL = {POSITIVE: "+", NEGATIVE: "-"}

# Stream salts (see numerics.rng_from).
BUILD_SALT = 11
BLEND_INIT_SALT = 5
BLEND_TRAIN_SALT = 6


def normalize_polarity(value):
    """Canonicalize 'positive'/'negative'/'+'/'-' to the long form."""
    if value in POLARITIES:
        return value
    if value == "+":
        return POSITIVE
    if value == "-":
        return NEGATIVE
    raise ValueError(f"invalid polarity {value!r}")


@dataclass(frozen=True)
class Critique:
    """One-hot critique: a single keyphrase, a polarity, and the turn index."""

    keyphrase: int
    polarity: str
    step: int = 0


@dataclass
class CritiqueExample:
    """Self-supervision example: a critique plus the item sets it partitions."""

    user: int
    item: int
    keyphrase: int
    polarity: str
    affected: np.ndarray
    unaffected: np.ndarray


@dataclass
class SyntheticCritiques:
    """The positive/negative example collections plus skip counts."""

    d_plus: list
    d_minus: list
    skipped_plus: int = 0
    skipped_minus: int = 0


def _cap_set(rng, arr, cap):
    if cap is None or len(arr) <= cap:
        return arr
    keep = rng.choice(len(arr), size=cap, replace=False)
    return np.sort(arr[keep])


def build_synthetic_datasets(data, khat_sets, seed=0, cap=100):
    """Create the positive and negative critiquing datasets.

    For every validation positive (u, i): sample a negative critique
    uniformly from the keyphrases absent from i's profile, and a positive
    critique uniformly from the profile keyphrases missing from the user's
    predicted explanation set ``khat_sets[u]``; for each critique the
    affected set is every item whose profile contains the keyphrase and the
    unaffected set is the complement, each down-sampled to ``cap``. A side is
    skipped (and counted) when its candidate set is empty.

    Sampling is replayable: per pair the stream is
    ``rng_from(seed, BUILD_SALT, u, i)`` and the draws are, in order, the
    negative critique index, its affected/unaffected caps (only when a set
    exceeds the cap), then the positive critique index and its caps.
    """
    val = data.matrix("val")
    if val.nnz == 0:
        raise EmptyDatasetError("no validation interactions to build critiques from")

    n_items = data.n_items
    all_keyphrases = np.arange(data.n_keyphrases)
    containing = [
        np.sort(np.asarray((data.kitem[:, k] > 0).todense()).ravel().nonzero()[0])
        for k in range(data.n_keyphrases)
    ]
    lacking = [np.setdiff1d(np.arange(n_items), containing[k]) for k in range(data.n_keyphrases)]

    out = SyntheticCritiques(d_plus=[], d_minus=[])
    users, items = val.nonzero()
    order = np.lexsort((items, users))
    for idx in order:
        u, i = int(users[idx]), int(items[idx])
        rng = rng_from(seed, BUILD_SALT, u, i)
        profile = data.kitem_set(i)

        valid_neg = np.setdiff1d(all_keyphrases, profile)
        if len(valid_neg) == 0:
            out.skipped_minus += 1
        else:
            c = int(valid_neg[rng.integers(len(valid_neg))])
            out.d_minus.append(
                CritiqueExample(
                    user=u,
                    item=i,
                    keyphrase=c,
                    polarity=NEGATIVE,
                    affected=_cap_set(rng, containing[c], cap),
                    unaffected=_cap_set(rng, lacking[c], cap),
                )
            )

        valid_pos = np.setdiff1d(profile, np.asarray(sorted(khat_sets[u]), dtype=int))
        if len(valid_pos) == 0:
            out.skipped_plus += 1
        else:
            c = int(valid_pos[rng.integers(len(valid_pos))])
            out.d_plus.append(
                CritiqueExample(
                    user=u,
                    item=i,
                    keyphrase=c,
                    polarity=POSITIVE,
                    affected=_cap_set(rng, containing[c], cap),
                    unaffected=_cap_set(rng, lacking[c], cap),
                )
            )
    return out


def save_examples_jsonl(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "user": int(ex.user),
                        "item": int(ex.item),
                        "keyphrase": int(ex.keyphrase),
                        "polarity": _POLARITY_SYMBOL[ex.polarity],
                        "affected": [int(x) for x in ex.affected],
                        "unaffected": [int(x) for x in ex.unaffected],
                    }
                )
                + "\n"
            )


def load_examples_jsonl(path):
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            examples.append(
                CritiqueExample(
                    user=int(obj["user"]),
                    item=int(obj["item"]),
                    keyphrase=int(obj["keyphrase"]),
                    polarity=normalize_polarity(obj["polarity"]),
                    affected=np.asarray(obj["affected"], dtype=int),
                    unaffected=np.asarray(obj["unaffected"], dtype=int),
                )
            )
    return examples


def predicted_keyphrase_sets(model, data, top_e=10, batch=256):
    """Per-user top-E predicted explanation keyphrases (input to the builder)."""
    from .metrics import rank_order

    out = []
    users = np.arange(data.n_users)
    for start in range(0, data.n_users, batch):
        chunk = users[start : start + batch]
        kscores = model.decode_explanations(model.latent_means(data, chunk))
        for row in range(len(chunk)):
            out.append(set(rank_order(kscores[row])[:top_e].tolist()))
    return out


def encode_critique(model, keyphrase, polarity, mode="auto"):
    """Latent mean for a one-hot critiqued keyphrase.

    ``mode='shared'`` sends both polarities through the liked-keyphrase
    encoder (the only option for the base variant); ``mode='split'`` routes
    negative critiques through the dislike encoder. ``'auto'`` picks shared
    for the base variant and split otherwise.
    """
    polarity = normalize_polarity(polarity)
    if mode == "auto":
        mode = "shared" if model.variant_enum.value == "mms" else "split"
    if mode not in ("shared", "split"):
        raise ConfigError(f"unknown critique encoding mode {mode!r}")
    one_hot = np.zeros(model.n_keyphrases_)
    one_hot[int(keyphrase)] = 1.0
    modality = "k_plus" if (mode == "shared" or polarity == POSITIVE) else "k_minus"
    return model.encode(modality, one_hot).mu[0]


def margin_loss(polarity, r0, r1, i_plus, i_minus, h):
    """Hinge ranking loss for one critique.

    Negative polarity: items bearing the critiqued keyphrase must drop by at
    least the margin (and the rest must not drop); positive polarity is the
    same with the score roles swapped, so affected items must rise.
    """
    loss, _, _ = margin_loss_grad(polarity, r0, r1, i_plus, i_minus, h)
    return loss


def margin_loss_grad(polarity, r0, r1, i_plus, i_minus, h):
    """(loss, d loss/d r0, d loss/d r1)."""
    polarity = normalize_polarity(polarity)
    r0 = np.asarray(r0, dtype=np.float64)
    r1 = np.asarray(r1, dtype=np.float64)
    if r0.shape != r1.shape:
        raise ValueError(f"score shapes differ: {r0.shape} vs {r1.shape}")
    if h < 0:
        raise ConfigError("margin must be >= 0")
    i_plus = np.asarray(i_plus, dtype=int)
    i_minus = np.asarray(i_minus, dtype=int)
    if len(np.intersect1d(i_plus, i_minus)):
        raise ValueError("affected and unaffected sets overlap")

    # Negative critique: affected drop (r0 - r1 >= h); positive: they rise.
    sign = 1.0 if polarity == NEGATIVE else -1.0
    dr0 = np.zeros_like(r0)
    dr1 = np.zeros_like(r1)

    slack_p = h - sign * (r0[i_plus] - r1[i_plus])
    active_p = slack_p > 0
    loss = float(slack_p[active_p].sum())
    dr0[i_plus[active_p]] -= sign
    dr1[i_plus[active_p]] += sign

    slack_m = h - sign * (r1[i_minus] - r0[i_minus])
    active_m = slack_m > 0
    loss += float(slack_m[active_m].sum())
    dr0[i_minus[active_m]] += sign
    dr1[i_minus[active_m]] -= sign
    return loss, dr0, dr1


def uac_blend(z_u, z_c_list):
    """Uniform average critiquing baseline: mean of user and critique latents."""
    vecs = [np.asarray(z_u, dtype=np.float64)] + [np.asarray(z) for z in z_c_list]
    return np.mean(vecs, axis=0)


class CritiqueBlender(BaseEstimator):
    """GRU blending module trained with the self-supervised margin objective.

    The model being critiqued stays frozen: only the GRU weights and the two
    polarity embeddings are updated.
    """

    def __init__(
        self,
        learning_rate=1e-3,
        margin=0.1,
        epochs=20,
        batch_size=64,
        encode_mode="auto",
        seed=0,
    ):
        self.learning_rate = learning_rate
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.encode_mode = encode_mode
        self.seed = seed

    def build(self, latent_dim):
        """Allocate (randomly initialized) blender parameters."""
        self.latent_dim_ = int(latent_dim)
        rng = rng_from(self.seed, BLEND_INIT_SALT)
        self.store_ = ParamStore()
        self.gru_ = GRUCell(self.store_, "blend", 3 * self.latent_dim_, self.latent_dim_, rng)
        self.e_plus_ = self.store_.add("e_plus", (self.latent_dim_,), rng)
        self.e_minus_ = self.store_.add("e_minus", (self.latent_dim_,), rng)
        return self

    # -- blending ------------------------------------------------------------

    def initial_state(self):
        return np.zeros(self.latent_dim_)

    def polarity_embedding(self, polarity):
        return (self.e_plus_ if normalize_polarity(polarity) == POSITIVE else self.e_minus_).value

    def step(self, state, z_u, z_c, polarity):
        """One blend turn: returns (new_state, blended_latent)."""
        x = np.concatenate([self.polarity_embedding(polarity), z_u, z_c])[None, :]
        h_new, _ = self.gru_.forward(np.atleast_2d(state), x)
        return h_new[0], h_new[0]

    # -- training ------------------------------------------------------------

    def _critique_latents(self, model, examples):
        cache = {}
        for ex in examples:
            key = (ex.keyphrase, ex.polarity)
            if key not in cache:
                cache[key] = encode_critique(model, ex.keyphrase, ex.polarity, self.encode_mode)
        return cache

    def _forward_batch(self, model, batch, z_users, z_crits):
        """Blend one step for a batch of examples; returns scores and caches."""
        dim = self.latent_dim_
        x = np.empty((len(batch), 3 * dim))
        for row, ex in enumerate(batch):
            x[row, :dim] = self.polarity_embedding(ex.polarity)
            x[row, dim : 2 * dim] = z_users[ex.user]
            x[row, 2 * dim :] = z_crits[(ex.keyphrase, ex.polarity)]
        h0 = np.zeros((len(batch), dim))
        h1, gru_cache = self.gru_.forward(h0, x)
        logits, dec_cache = model.decoders_["r"].forward(h1)
        return softmax(logits), gru_cache, dec_cache

    def batch_loss(self, model, batch, z_users, r0_rows, z_crits, grad=False):
        """Summed margin loss over a batch; optionally backprop into the blender."""
        scores, gru_cache, dec_cache = self._forward_batch(model, batch, z_users, z_crits)
        total = 0.0
        dr1 = np.zeros_like(scores)
        for row, ex in enumerate(batch):
            loss, _, dr1_row = margin_loss_grad(
                ex.polarity, r0_rows[ex.user], scores[row], ex.affected, ex.unaffected, self.margin
            )
            total += loss
            dr1[row] = dr1_row
        if grad:
            dlogits = softmax_vjp(dr1, scores)
            dz = model.decoders_["r"].backward(dlogits, dec_cache)
            _, dx = self.gru_.backward(dz, gru_cache)
            dim = self.latent_dim_
            for row, ex in enumerate(batch):
                self.polarity_param(ex.polarity).grad += dx[row, :dim]
        return total

    def polarity_param(self, polarity):
        return self.e_plus_ if normalize_polarity(polarity) == POSITIVE else self.e_minus_

    def dataset_loss(self, model, data, examples):
        """Mean per-example margin loss at the current weights (no updates)."""
        if not examples:
            raise EmptyDatasetError("no critique examples")
        users = sorted({ex.user for ex in examples})
        z = model.latent_means(data, users)
        z_users = {u: z[i] for i, u in enumerate(users)}
        r0_rows = {u: model.decode_scores(z[i][None])[0] for i, u in enumerate(users)}
        z_crits = self._critique_latents(model, examples)
        total = 0.0
        for start in range(0, len(examples), self.batch_size):
            batch = examples[start : start + self.batch_size]
            total += self.batch_loss(model, batch, z_users, r0_rows, z_crits)
        return total / len(examples)

    def fit(self, model, data, d_plus, d_minus):
        """Train on shuffled mixed batches of both polarities; model frozen."""
        examples = list(d_minus) + list(d_plus)
        if not examples:
            raise EmptyDatasetError("no critique examples to train on")
        model_hash = model.store_.values_hash()
        self.build(model.latent_dim)

        users = sorted({ex.user for ex in examples})
        z = model.latent_means(data, users)
        z_users = {u: z[i] for i, u in enumerate(users)}
        r0_rows = {u: model.decode_scores(z[i][None])[0] for i, u in enumerate(users)}
        z_crits = self._critique_latents(model, examples)

        rng = rng_from(self.seed, BLEND_TRAIN_SALT)
        opt = Adam(self.store_, self.learning_rate)
        log = {"epoch_loss": []}
        for _ in range(self.epochs):
            order = rng.permutation(len(examples))
            total = 0.0
            for start in range(0, len(examples), self.batch_size):
                batch = [examples[i] for i in order[start : start + self.batch_size]]
                self.store_.zero_grad()
                total += self.batch_loss(model, batch, z_users, r0_rows, z_crits, grad=True)
                opt.step()
            log["epoch_loss"].append(total / len(examples))
        model.store_.zero_grad()  # decoder backward left gradients; values untouched
        if model.store_.values_hash() != model_hash:
            raise RuntimeError("blender training mutated the frozen model")
        self.train_log_ = log
        return self

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, path):
        header = {
            "kind": "blender",
            "latent_dim": self.latent_dim_,
            "config": self.get_params(),
        }
        arrays = [(p.name, p.value.astype("<f4")) for p in self.store_]
        write_container(path, BLENDER_MAGIC, header, arrays)

    @classmethod
    def load_checkpoint(cls, path):
        header, arrays = read_container(path, BLENDER_MAGIC)
        if header.get("kind") != "blender":
            raise CheckpointError(f"{path}: not a blender checkpoint")
        est = cls(**header["config"])
        est.build(header["latent_dim"])
        if set(arrays) != set(est.store_.names()):
            raise CheckpointError(f"{path}: parameter names do not match")
        for name, arr in arrays.items():
            p = est.store_[name]
            if tuple(arr.shape) != p.value.shape:
                raise CheckpointError(f"{path}: bad shape for {name}")
            p.value[...] = arr.astype(np.float64)
        return est


class UACBlender:
    """Parameter-free uniform-average baseline with the blender interface."""

    def initial_state(self):
        return []

    def step(self, state, z_u, z_c, polarity):
        state = list(state) + [np.asarray(z_c, dtype=np.float64)]
        return state, uac_blend(z_u, state)


class IdentityBlender:
    """Ignores critiques entirely; scores never change."""

    def initial_state(self):
        return None

    def step(self, state, z_u, z_c, polarity):
        return None, np.asarray(z_u, dtype=np.float64)


class CritiqueSession:
    """Live conversational state over a frozen model + blender."""

    def __init__(self, model, blender, z_u, seen_items=(), max_turns=10, encode_mode="auto"):
        self.model = model
        self.blender = blender
        self.z_u = np.asarray(z_u, dtype=np.float64)
        self.seen_items = np.asarray(list(seen_items), dtype=int)
        self.max_turns = max_turns
        self.encode_mode = encode_mode
        self.reset()

    def reset(self):
        """Clear blending state and history; the user latent is kept."""
        self.state = self.blender.initial_state()
        self.history = []
        self.current_latent = self.z_u
        self.scores = self.model.decode_scores(self.z_u[None])[0]

    @property
    def turn(self):
        return len(self.history)

    def blend(self, z_c, polarity, keyphrase=None):
        """Apply one blend step from an already-encoded critique latent."""
        if self.turn >= self.max_turns:
            raise RuntimeError(f"session reached the maximum of {self.max_turns} turns")
        self.state, z_tilde = self.blender.step(self.state, self.z_u, z_c, polarity)
        self.current_latent = z_tilde
        self.scores = self.model.decode_scores(z_tilde[None])[0]
        self.history.append(
            (Critique(-1 if keyphrase is None else int(keyphrase), polarity, self.turn), self.scores)
        )
        return self

    def apply_critique(self, keyphrase, polarity):
        """Encode the keyphrase critique and blend it in."""
        z_c = encode_critique(self.model, keyphrase, polarity, self.encode_mode)
        return self.blend(z_c, normalize_polarity(polarity), keyphrase=keyphrase)

    def critiqued_keyphrases(self):
        return {c.keyphrase for c, _ in self.history}

    def top_items(self, n=10, candidates=None):
        """Current top-N item indices (seen items masked, ties by index)."""
        from .metrics import rank_order

        masked = self.scores.copy()
        if len(self.seen_items):
            masked[self.seen_items] = -np.inf
        if candidates is not None:
            keep = np.zeros_like(masked, dtype=bool)
            keep[np.asarray(list(candidates), dtype=int)] = True
            masked[~keep] = -np.inf
        order = rank_order(masked)
        order = order[np.isfinite(masked[order])]
        return order[:n].tolist()
