"""Seeded toy-corpus generator with planted user/item/keyphrase clusters.

Structure: users, items, and keyphrases are partitioned into aligned
clusters; inside each cluster, users belong to sliding taste windows over
the cluster's keyphrase block, and every window owns an equal share of
designed items whose profiles contain exactly the window's favorite
keyphrases. Picks are a mixture of signature picks (sharp taste match,
inside the cluster) and exploration picks (uniform over the catalog).

The symmetric window/item assignment keeps expected item popularity flat,
so a popularity ranker carries almost no signal, while signature picks are
sharply predictable from the keyphrase signal and exploration picks are
genuinely hard. Reviews mention favorite facets first, so a user's
keyphrase likes reveal their window.
"""

from __future__ import annotations

import numpy as np

from .dataio import RawInteraction


def planted_clusters(
    n_users=200,
    n_items=100,
    n_keyphrases=20,
    n_clusters=2,
    *,
    positives_per_user=8,
    in_cluster_prob=0.95,
    keyphrases_per_item=5,
    keyphrase_noise=0.1,
    keyphrases_per_review=2,
    favorites_per_user=3,
    taste_strength=8.0,
    signature_prob=0.35,
    max_item_exposure=1.25,
    seed=0,
):
    """Generate RawInteraction records for a planted-cluster world.

    Each pick is a "signature" pick with probability ``signature_prob``
    (drawn inside the user's cluster, weighted ``exp(taste_strength *
    favorite-match)``, which concentrates on the user's window-designed
    items) and an exploration pick otherwise (uniform over the whole
    catalog). ``max_item_exposure`` caps how many users any item can reach,
    as a factor of the balanced per-item average.
    """
    rng = np.random.default_rng(seed)

    def cluster_of(idx, total):
        return idx * n_clusters // total

    item_cluster = np.array([cluster_of(i, n_items) for i in range(n_items)])
    kp_blocks = [
        [k for k in range(n_keyphrases) if cluster_of(k, n_keyphrases) == c]
        for c in range(n_clusters)
    ]

    def window_favorites(cluster, window):
        block = kp_blocks[cluster]
        take = min(favorites_per_user, len(block))
        return [block[(window + j) % len(block)] for j in range(take)]

    # Designed item profiles: within a cluster, item j belongs to window
    # j mod |block| and carries that window's favorites plus filler facets.
    cluster_rank = np.zeros(n_items, dtype=int)
    for c in range(n_clusters):
        members = np.flatnonzero(item_cluster == c)
        cluster_rank[members] = np.arange(len(members))

    item_keyphrases = []
    for i in range(n_items):
        c = item_cluster[i]
        block = kp_blocks[c]
        window = int(cluster_rank[i]) % max(len(block), 1)
        profile = set(window_favorites(c, window))
        others = [k for k in range(n_keyphrases) if k not in profile]
        own_rest = [k for k in block if k not in profile]
        while len(profile) < min(keyphrases_per_item, n_keyphrases):
            pool = (
                [k for k in others if k not in block]
                if rng.random() < keyphrase_noise and len(others) > len(own_rest)
                else own_rest
            )
            pool = [k for k in pool if k not in profile] or [k for k in others if k not in profile]
            profile.add(int(pool[rng.integers(len(pool))]))
        item_keyphrases.append(sorted(profile))

    width = len(str(max(n_users, n_items, n_keyphrases)))
    kp_names = [f"kp_{k:0{width}d}" for k in range(n_keyphrases)]

    quota = None
    if max_item_exposure is not None:
        balanced = n_users * positives_per_user / n_items
        quota = np.full(n_items, int(np.ceil(balanced * max_item_exposure)))

    user_rank = np.zeros(n_users, dtype=int)
    for c in range(n_clusters):
        members = [u for u in range(n_users) if cluster_of(u, n_users) == c]
        for r, u in enumerate(members):
            user_rank[u] = r

    records = []
    all_items = np.arange(n_items)
    for u in range(n_users):
        c = cluster_of(u, n_users)
        block = kp_blocks[c]
        window = int(user_rank[u]) % max(len(block), 1)
        favorites = set(window_favorites(c, window))
        own_items = np.flatnonzero(item_cluster == c)
        other_items = np.flatnonzero(item_cluster != c)

        def pick_from(pool, chosen, strength):
            available = [
                i for i in pool if i not in chosen and (quota is None or quota[i] > 0)
            ]
            if not available:
                return None
            if strength <= 0:
                return int(available[rng.integers(len(available))])
            match = np.array(
                [len(favorites & set(item_keyphrases[i])) for i in available], dtype=float
            )
            weights = np.exp(strength * match)
            weights /= weights.sum()
            return int(available[rng.choice(len(available), p=weights)])

        chosen: set = set()
        while len(chosen) < min(positives_per_user, n_items):
            if rng.random() < signature_prob:
                pool = own_items if rng.random() < in_cluster_prob else other_items
                pick = pick_from(pool, chosen, taste_strength)
                if pick is None:
                    pick = pick_from(all_items, chosen, taste_strength)
            else:
                pick = pick_from(all_items, chosen, 0.0)
            if pick is None:  # every remaining item is at quota
                quota[:] = np.maximum(quota, 1)
                continue
            chosen.add(pick)
            if quota is not None:
                quota[pick] -= 1

        for i in sorted(chosen):
            kps = item_keyphrases[i]
            # Mention favorite facets first, then fill with other item facets.
            liked = [k for k in kps if k in favorites]
            rest = [k for k in kps if k not in favorites]
            n_mention = min(keyphrases_per_review, len(kps))
            mentioned = liked[:n_mention]
            n_fill = n_mention - len(mentioned)
            if n_fill and rest:
                fill = rng.choice(len(rest), size=min(n_fill, len(rest)), replace=False)
                mentioned = mentioned + [rest[j] for j in sorted(fill)]
            records.append(
                RawInteraction(
                    user_id=f"user_{u:0{width}d}",
                    item_id=f"item_{i:0{width}d}",
                    rating=5.0,
                    keyphrases=[kp_names[k] for k in sorted(mentioned)],
                )
            )
    return records
