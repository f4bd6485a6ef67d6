"""Multimodal VAE recommender: variant-selectable encoders/decoders, the
mixture-of-experts posterior, ELBO training, prediction and checkpointing.

Three variants share one architecture family:

* ``mms``     — experts over interactions and liked keyphrases, both decoded.
* ``mms3``    — adds a disliked-keyphrase expert *and* decoder.
* ``mmsplus`` — keeps the disliked-keyphrase expert but drops its decoder;
  the extra encoder is trained through partially-observed objective terms.

Gradients are hand-composed from the numerics layer; there is no autograd.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator

from .container import MODEL_MAGIC, read_container, write_container
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    TrainingDivergedError,
    UnsupportedModalityError,
)
from .metrics import rank_order
from .numerics import (
    Adam,
    AffineTanh,
    LOGVAR_MAX,
    LOGVAR_MIN,
    Linear,
    ParamStore,
    dropout_mask,
    gaussian_kl,
    gaussian_kl_grad,
    multinomial_loglik,
    multinomial_loglik_grad,
    rng_from,
    softmax,
)

MODALITIES = ("r", "k_plus", "k_minus")

# Stream salts (see numerics.rng_from).
INIT_SALT = 2
TRAIN_SALT = 3


class Variant(str, Enum):
    MMS = "mms"
    MMS3 = "mms3"
    MMS_PLUS = "mmsplus"

    @property
    def experts(self):
        if self is Variant.MMS:
            return ("r", "k_plus")
        return ("r", "k_plus", "k_minus")

    @property
    def decoded(self):
        if self is Variant.MMS3:
            return ("r", "k_plus", "k_minus")
        return ("r", "k_plus")

    @property
    def elbo_terms(self):
        """Observed-modality subsets summed per user in the training objective."""
        if self is Variant.MMS:
            return (("r", "k_plus"), ("r",), ("k_plus",))
        if self is Variant.MMS3:
            return (("r", "k_plus", "k_minus"), ("r",), ("k_plus",), ("k_minus",))
        return (
            ("r", "k_plus", "k_minus"),
            ("r",),
            ("k_plus",),
            ("r", "k_minus"),
            ("k_plus", "k_minus"),
        )


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the latent space."""

    mu: np.ndarray
    logvar: np.ndarray


def moe_combine(posteriors):
    """Average a nonempty list of Gaussian experts.

    Means are averaged arithmetically; variances are averaged arithmetically
    with the log-variance computed as a max-shifted log-mean-exp. Per-expert
    addends are summed in per-coordinate sorted order, which makes the result
    exactly permutation-invariant; the max shift makes combining duplicate
    experts exactly idempotent.
    """
    if not posteriors:
        raise ValueError("moe_combine: need at least one posterior")
    dims = {p.mu.shape for p in posteriors} | {p.logvar.shape for p in posteriors}
    if len(dims) != 1:
        raise DimensionError(f"moe_combine: mismatched shapes {sorted(map(str, dims))}")
    if len(posteriors) == 1:
        return posteriors[0]

    mus = np.stack([p.mu for p in posteriors])
    lvs = np.stack([p.logvar for p in posteriors])
    n = len(posteriors)
    mu = np.add.reduce(np.sort(mus, axis=0), axis=0) / n
    shift = lvs.max(axis=0)
    mean_var = np.add.reduce(np.sort(np.exp(lvs - shift), axis=0), axis=0) / n
    return GaussianPosterior(mu, shift + np.log(mean_var))


def moe_backward(dmu, dlogvar, posteriors):
    """Per-expert gradients of the combined (mu, logvar)."""
    n = len(posteriors)
    if n == 1:
        return [(dmu, dlogvar)]
    lvs = np.stack([p.logvar for p in posteriors])
    shift = lvs.max(axis=0)
    ev = np.exp(lvs - shift)
    weights = ev / ev.sum(axis=0)
    return [(dmu / n, dlogvar * weights[e]) for e in range(n)]


def reparameterize(posterior, rng=None):
    """Draw z = mu + exp(logvar/2) * eps; without an rng, return mu (eval).

    Returns (z, eps); eps is None in eval mode.
    """
    if rng is None:
        return posterior.mu.copy(), None
    eps = rng.standard_normal(posterior.mu.shape)
    return posterior.mu + np.exp(0.5 * posterior.logvar) * eps, eps


class _Encoder:
    """x -> affine-tanh -> affine-tanh -> (linear mu, linear logvar)."""

    def __init__(self, store, name, n_in, hidden, latent, rng):
        self.h1 = AffineTanh(store, f"enc_{name}.h1", n_in, hidden, rng)
        self.h2 = AffineTanh(store, f"enc_{name}.h2", hidden, hidden, rng)
        self.mu = Linear(store, f"enc_{name}.mu", hidden, latent, rng)
        self.logvar = Linear(store, f"enc_{name}.logvar", hidden, latent, rng)

    def forward(self, x):
        h1, c1 = self.h1.forward(x)
        h2, c2 = self.h2.forward(h1)
        mu, cmu = self.mu.forward(h2)
        lv_raw, clv = self.logvar.forward(h2)
        lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
        clamp = (lv_raw > LOGVAR_MIN) & (lv_raw < LOGVAR_MAX)
        return GaussianPosterior(mu, lv), (c1, c2, cmu, clv, clamp)

    def backward(self, dmu, dlogvar, cache):
        c1, c2, cmu, clv, clamp = cache
        dh2 = self.mu.backward(dmu, cmu) + self.logvar.backward(dlogvar * clamp, clv)
        dh1 = self.h2.backward(dh2, c2)
        return self.h1.backward(dh1, c1)


class _Decoder:
    """z -> affine-tanh -> affine-tanh -> linear logits."""

    def __init__(self, store, name, latent, hidden, n_out, rng):
        self.h1 = AffineTanh(store, f"dec_{name}.h1", latent, hidden, rng)
        self.h2 = AffineTanh(store, f"dec_{name}.h2", hidden, hidden, rng)
        self.out = Linear(store, f"dec_{name}.out", hidden, n_out, rng)

    def forward(self, z):
        h1, c1 = self.h1.forward(z)
        h2, c2 = self.h2.forward(h1)
        logits, cout = self.out.forward(h2)
        return logits, (c1, c2, cout)

    def backward(self, dlogits, cache):
        c1, c2, cout = cache
        dh2 = self.out.backward(dlogits, cout)
        dh1 = self.h2.backward(dh2, c2)
        return self.h1.backward(dh1, c1)


@dataclass
class Prediction:
    """Scored items and explanation keyphrases for one user."""

    scores: np.ndarray
    explanation_scores: np.ndarray
    seen_items: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    def top_items(self, n=10):
        masked = self.scores.copy()
        masked[self.seen_items.astype(int)] = -np.inf
        order = rank_order(masked)
        order = order[np.isfinite(masked[order])]
        return order[:n].tolist()

    def top_keyphrases(self, n=10):
        return rank_order(self.explanation_scores)[:n].tolist()


class MultimodalVAE(BaseEstimator):
    """Variant-selectable multimodal VAE recommender.

    Parameters mirror the training configuration; ``fit`` consumes an
    :class:`critvae.dataio.InteractionData` and trains with the adaptive-
    moment update rule, a linear KL-weight warmup, and early stopping on the
    validation NDCG.
    """

    def __init__(
        self,
        variant="mms",
        latent_dim=16,
        hidden_dim=None,
        learning_rate=5e-5,
        beta_max=0.2,
        anneal_steps=None,
        epochs=50,
        batch_size=128,
        dropout_rate=0.2,
        margin=0.1,
        patience=10,
        warm_start=False,
        seed=0,
    ):
        self.variant = variant
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.beta_max = beta_max
        self.anneal_steps = anneal_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout_rate = dropout_rate
        self.margin = margin
        self.patience = patience
        self.warm_start = warm_start
        self.seed = seed

    # -- construction ------------------------------------------------------

    @property
    def variant_enum(self):
        try:
            return Variant(self.variant)
        except ValueError as exc:
            raise ConfigError(f"unknown variant {self.variant!r}") from exc

    def _input_width(self, modality):
        return self.n_items_ if modality == "r" else self.n_keyphrases_

    def build(self, n_items, n_keyphrases):
        """Allocate parameters for the given corpus dimensions."""
        if self.beta_max < 0:
            raise ConfigError("beta_max must be >= 0")
        self.n_items_ = int(n_items)
        self.n_keyphrases_ = int(n_keyphrases)
        hidden = self.hidden_dim or 2 * self.latent_dim
        self.hidden_dim_ = hidden
        variant = self.variant_enum
        rng = rng_from(self.seed, INIT_SALT)
        self.store_ = ParamStore()
        self.encoders_ = {
            m: _Encoder(self.store_, m, self._input_width(m), hidden, self.latent_dim, rng)
            for m in variant.experts
        }
        self.decoders_ = {
            m: _Decoder(self.store_, m, self.latent_dim, hidden, self._input_width(m), rng)
            for m in variant.decoded
        }
        return self

    # -- inference ---------------------------------------------------------

    def encode(self, modality, x, training=False, rng=None):
        """Per-expert Gaussian posterior for one modality's rows."""
        if modality not in self.encoders_:
            raise UnsupportedModalityError(
                f"variant {self.variant!r} has no {modality!r} expert"
            )
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if training and self.dropout_rate > 0:
            if rng is None:
                raise ConfigError("training-mode encode needs an rng for dropout")
            x = x * dropout_mask(rng, x.shape, self.dropout_rate)
        posterior, _ = self.encoders_[modality].forward(x)
        return posterior

    def posterior(self, inputs, observed=None, training=False, rng=None):
        """MoE posterior over the observed experts (all experts by default)."""
        observed = tuple(observed or self.variant_enum.experts)
        return moe_combine(
            [self.encode(m, inputs[m], training=training, rng=rng) for m in observed]
        )

    def decode_scores(self, z):
        """Item scores (softmax over logits) for latent rows."""
        logits, _ = self.decoders_["r"].forward(np.atleast_2d(z))
        return softmax(logits)

    def decode_explanations(self, z):
        """Keyphrase explanation scores for latent rows."""
        logits, _ = self.decoders_["k_plus"].forward(np.atleast_2d(z))
        return softmax(logits)

    # -- objective ---------------------------------------------------------

    def elbo(self, observed, inputs, targets, beta, rng=None, accumulate=True):
        """Negative ELBO (mean over the batch) for one observed subset.

        ``inputs``/``targets`` map modality name to dense rows; targets are
        always full rows for every decoded modality, regardless of which
        modalities are observed. With ``accumulate`` the hand-derived
        gradients are added into the parameter store. Sampling (and input
        dropout) happen only when an rng is passed; without one the posterior
        mean is used, which is the deterministic evaluation path.
        """
        observed = tuple(observed)
        if not observed:
            raise ConfigError("elbo: observed set must be nonempty")
        if beta < 0:
            raise ConfigError("elbo: beta must be >= 0")
        variant = self.variant_enum
        for m in observed:
            if m not in variant.experts:
                raise UnsupportedModalityError(
                    f"variant {self.variant!r} has no {m!r} expert"
                )

        training = rng is not None
        batch = np.atleast_2d(np.asarray(inputs[observed[0]], dtype=np.float64)).shape[0]

        enc_caches = {}
        posteriors = []
        for m in observed:
            x = np.atleast_2d(np.asarray(inputs[m], dtype=np.float64))
            if training and self.dropout_rate > 0:
                x = x * dropout_mask(rng, x.shape, self.dropout_rate)
            post, cache = self.encoders_[m].forward(x)
            enc_caches[m] = cache
            posteriors.append(post)
        combined = moe_combine(posteriors)
        z, eps = reparameterize(combined, rng if training else None)

        dec_caches = {}
        recon = np.zeros(batch)
        dlogits = {}
        for d in variant.decoded:
            logits, cache = self.decoders_[d].forward(z)
            dec_caches[d] = cache
            t = np.atleast_2d(np.asarray(targets[d], dtype=np.float64))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # all-zero rows legal inside training
                recon += multinomial_loglik(logits, t)
            dlogits[d] = multinomial_loglik_grad(logits, t)

        kl = gaussian_kl(combined.mu, combined.logvar)
        loss = float(np.mean(-recon + beta * kl))

        if accumulate:
            dz = np.zeros_like(z)
            for d in variant.decoded:
                dz += self.decoders_[d].backward(-dlogits[d] / batch, dec_caches[d])
            dmu = dz.copy()
            if eps is not None:
                dlv = dz * 0.5 * (z - combined.mu)
            else:
                dlv = np.zeros_like(dz)
            kmu, klv = gaussian_kl_grad(combined.mu, combined.logvar)
            dmu += (beta / batch) * kmu
            dlv += (beta / batch) * klv
            for m, (dmu_e, dlv_e) in zip(observed, moe_backward(dmu, dlv, posteriors)):
                self.encoders_[m].backward(dmu_e, dlv_e, enc_caches[m])
        return loss

    # -- training ----------------------------------------------------------

    def _modality_rows(self, data, users):
        rows = {"r": data.r_rows(users), "k_plus": data.kplus_rows(users)}
        if "k_minus" in self.variant_enum.experts:
            rows["k_minus"] = 1.0 - rows["k_plus"]
        return rows

    def fit(self, data):
        """Train on an InteractionData; returns self.

        With ``warm_start`` an already-built parameter set is kept (resumed
        training); the global step counter continues from ``step_offset_`` so
        the KL-weight schedule picks up where the previous run stopped.
        """
        if self.warm_start and hasattr(self, "store_"):
            if (data.n_items, data.n_keyphrases) != (self.n_items_, self.n_keyphrases_):
                raise ConfigError(
                    "warm start: dataset dimensions do not match the loaded parameters"
                )
        else:
            self.build(data.n_items, data.n_keyphrases)
        variant = self.variant_enum
        terms = variant.elbo_terms
        n_users = data.n_users
        batch_size = min(self.batch_size, n_users)
        batches_per_epoch = (n_users + batch_size - 1) // batch_size
        anneal = self.anneal_steps or batches_per_epoch
        rng = rng_from(self.seed, TRAIN_SALT)
        opt = Adam(self.store_, self.learning_rate)

        log = {
            "term_labels": ["+".join(t) for t in terms],
            "epoch_loss": [],
            "epoch_term_loss": [],
            "val_ndcg": [],
            "beta": [],
        }
        best_ndcg, best_values, best_epoch = -np.inf, None, -1
        step = getattr(self, "step_offset_", 0)
        for epoch in range(self.epochs):
            order = rng.permutation(n_users)
            total = 0.0
            term_totals = np.zeros(len(terms))
            for start in range(0, n_users, batch_size):
                users = order[start : start + batch_size]
                rows = self._modality_rows(data, users)
                beta = self.beta_max * min(1.0, step / anneal)
                self.store_.zero_grad()
                batch_loss = 0.0
                for t_idx, observed in enumerate(terms):
                    term_loss = self.elbo(observed, rows, rows, beta, rng=rng)
                    batch_loss += term_loss
                    term_totals[t_idx] += term_loss * len(users)
                if not np.isfinite(batch_loss):
                    raise TrainingDivergedError(
                        "non-finite training loss",
                        diagnostics={"epoch": epoch, "step": step, "loss": batch_loss},
                    )
                opt.step()
                step += 1
                total += batch_loss * len(users)
            log["epoch_loss"].append(total / n_users)
            log["epoch_term_loss"].append((term_totals / n_users).tolist())
            log["beta"].append(self.beta_max * min(1.0, step / anneal))

            ndcg = self.mean_ndcg(data, split="val")
            log["val_ndcg"].append(ndcg)
            if ndcg > best_ndcg:
                best_ndcg, best_values, best_epoch = ndcg, self.store_.copy_values(), epoch
            elif epoch - best_epoch >= self.patience:
                break
        if best_values is not None:
            self.store_.load_values(best_values)
        log["best_epoch"] = best_epoch
        log["best_val_ndcg"] = best_ndcg
        self.steps_trained_ = step
        self.train_log_ = log
        return self

    # -- prediction / evaluation -------------------------------------------

    def latent_means(self, data, users):
        """Eval-mode latent representation (posterior mean, all experts)."""
        rows = self._modality_rows(data, users)
        return self.posterior(rows).mu

    def predict(self, data, user):
        """Scores and explanation scores for one user (deterministic)."""
        if isinstance(user, str):
            if user not in data.user_index:
                raise KeyError(f"unknown user {user!r}")
            user = data.user_index[user]
        user = int(user)
        if not 0 <= user < data.n_users:
            raise KeyError(f"user index {user} out of range")
        z = self.latent_means(data, [user])
        return Prediction(
            scores=self.decode_scores(z)[0],
            explanation_scores=self.decode_explanations(z)[0],
            seen_items=data.items_of(user, "train"),
        )

    def scores_matrix(self, data, users):
        """Item scores for a batch of users (rows align with ``users``)."""
        return self.decode_scores(self.latent_means(data, users))

    def mean_ndcg(self, data, split="val", batch=256):
        """Mean NDCG over users with positives in the split; train items masked."""
        from .metrics import rank_metrics

        target = data.matrix(split)
        users = np.flatnonzero(np.asarray(target.sum(axis=1)).ravel() > 0)
        if len(users) == 0:
            return float("nan")
        vals = []
        for start in range(0, len(users), batch):
            chunk = users[start : start + batch]
            scores = self.scores_matrix(data, chunk)
            for row, u in enumerate(chunk):
                s = scores[row].copy()
                s[data.items_of(u, "train")] = -np.inf
                relevant = set(data.items_of(u, split).tolist())
                vals.append(rank_metrics(s, relevant).ndcg)
        return float(np.mean(vals))

    def evaluation_report(self, data, split="test", k=10, batch=256):
        """Mean recommendation and explanation metrics over a split.

        Recommendation: users with positives in the split, train-seen items
        masked. Explanation: keyphrase scores against each user's liked set
        (users with no likes are skipped).
        """
        from .metrics import explanation_metrics, rank_metrics

        target = data.matrix(split)
        users = np.flatnonzero(np.asarray(target.sum(axis=1)).ravel() > 0)
        rec_reports, exp_reports = [], []
        for start in range(0, len(users), batch):
            chunk = users[start : start + batch]
            z = self.latent_means(data, chunk)
            scores = self.decode_scores(z)
            kscores = self.decode_explanations(z)
            for row, u in enumerate(chunk):
                s = scores[row].copy()
                s[data.items_of(u, "train")] = -np.inf
                relevant = set(data.items_of(u, split).tolist())
                rec_reports.append(rank_metrics(s, relevant, k=k))
                liked = set(np.flatnonzero(data.kplus_rows([u])[0]).tolist())
                if liked:
                    exp_reports.append(explanation_metrics(kscores[row], liked, k=k))

        def mean_over(reports):
            if not reports:
                return None
            keys = ("r_precision", "ndcg", "map_at_k", "precision_at_k", "recall_at_k")
            return {key: float(np.mean([getattr(r, key) for r in reports])) for key in keys}

        return {
            "split": split,
            "k": k,
            "n_users": int(len(users)),
            "recommendation": mean_over(rec_reports),
            "explanation": mean_over(exp_reports),
        }

    # -- persistence -------------------------------------------------------

    def save_checkpoint(self, path):
        """Write the versioned binary checkpoint (float32 payload)."""
        header = {
            "kind": "model",
            "variant": self.variant_enum.value,
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim_,
            "n_items": self.n_items_,
            "n_keyphrases": self.n_keyphrases_,
            "steps_trained": getattr(self, "steps_trained_", 0),
            "config": self.get_params(),
        }
        arrays = [(p.name, p.value.astype("<f4")) for p in self.store_]
        write_container(path, MODEL_MAGIC, header, arrays)

    @classmethod
    def load_checkpoint(cls, path, expected_variant=None):
        """Load a checkpoint; optionally enforce the variant."""
        header, arrays = read_container(path, MODEL_MAGIC)
        if header.get("kind") != "model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        variant = header["variant"]
        if expected_variant is not None and Variant(expected_variant) != Variant(variant):
            raise CheckpointError(
                f"{path}: variant mismatch (checkpoint {variant!r}, expected {expected_variant!r})"
            )
        est = cls(**header["config"])
        est.build(header["n_items"], header["n_keyphrases"])
        est.step_offset_ = header.get("steps_trained", 0)
        est.steps_trained_ = est.step_offset_
        names = set(est.store_.names())
        if names != set(arrays):
            raise CheckpointError(f"{path}: parameter names do not match the variant layout")
        for name in names:
            p = est.store_[name]
            arr = arrays[name]
            if tuple(arr.shape) != p.value.shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {arr.shape}, expected {p.value.shape}"
                )
            p.value[...] = arr.astype(np.float64)
        return est
