"""Exemplar-selection strategies behind one uniform interface.

The headline strategy splits the fixed budget between the episode's unlabeled
pool and the previous exemplar set in proportion to their class counts, then
runs entropy-weighted k-means per class and keeps the sample closest to each
cluster's weighted mean. Six comparison strategies (random, coreset, badge,
icarl, gdumb, rainbow) share the same context and return type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import ModelParams, ModelSnapshot, embed, entropy, logits, predict_proba
from .datastream import EpisodeData, Sample
from .errors import ConfigurationError, ContractViolation

STRATEGIES = ("acil", "random", "coreset", "badge", "icarl", "gdumb", "rainbow", "finetuning")
AL_BASELINES = ("random", "coreset", "badge")
FULL_ANNOTATION_STRATEGIES = ("icarl", "gdumb", "rainbow", "finetuning")

FROM_UNLABELED = "from-unlabeled"
FROM_EXEMPLAR = "from-exemplar"
FROM_LABELED = "from-labeled"

# Keeps weighted means defined when the model is fully confident everywhere.
_WEIGHT_FLOOR = 1e-12

_KMEANS_MAX_ITER = 100

# Rainbow: copies per sample and noise scale relative to per-dimension std.
_RAINBOW_COPIES = 10
_RAINBOW_NOISE = 0.05

# Seed-tree lanes, so strategies never share raw RNG streams.
_LANE_ACIL, _LANE_RANDOM, _LANE_BADGE, _LANE_GDUMB, _LANE_RAINBOW = 4, 5, 6, 7, 8


@dataclass(frozen=True)
class SelectionContext:
    """Everything a strategy may look at when picking the next exemplar set."""

    episode: EpisodeData
    model: ModelParams
    snapshot: ModelSnapshot | None
    budget: int
    seed: int = 0
    pseudo_label_source: str = "current"

    def validate(self) -> None:
        if self.budget < 1:
            raise ContractViolation(f"budget must be >= 1, got {self.budget}")
        if self.pseudo_label_source not in ("current", "previous"):
            raise ConfigurationError(
                f"pseudo_label_source must be 'current' or 'previous', got {self.pseudo_label_source!r}",
                key="pseudo_label_source")


@dataclass(frozen=True)
class ExemplarSet:
    """Fixed-budget labeled set propagated to the next episode."""

    members: tuple[Sample, ...]
    sources: tuple[str, ...]

    def __post_init__(self):
        ids = [s.id for s in self.members]
        if len(set(ids)) != len(ids):
            raise ContractViolation("exemplar set contains duplicate sample ids")
        if len(self.members) != len(self.sources):
            raise ContractViolation("one source tag required per member")

    def __len__(self) -> int:
        return len(self.members)

    def ids(self) -> list[int]:
        return [s.id for s in self.members]

    def classes(self) -> list[int]:
        return sorted({s.true_label for s in self.members})


@dataclass(frozen=True)
class BudgetSplit:
    k_unlabeled: int
    k_exemplar: int
    per_class_unlabeled: dict[int, int] = field(default_factory=dict)
    per_class_exemplar: dict[int, int] = field(default_factory=dict)


def split_budget(budget: int, classes_episode, classes_exemplar) -> BudgetSplit:
    """Split the budget between the unlabeled pool and the old exemplar set in
    proportion to their class counts; round half up on the unlabeled share.

    With no exemplar classes (episode 0) the whole budget goes to the
    unlabeled pool. Integer arithmetic keeps the rounding exact.
    """
    a, b = len(set(classes_episode)), len(set(classes_exemplar))
    if a == 0:
        raise ContractViolation("classes_episode must be nonempty")
    if budget < 1:
        raise ContractViolation(f"budget must be >= 1, got {budget}")
    if b == 0:
        return BudgetSplit(k_unlabeled=budget, k_exemplar=0)
    s = a + b
    k_unlabeled = (2 * budget * a + s) // (2 * s)  # floor(budget*a/s + 1/2)
    return BudgetSplit(k_unlabeled=k_unlabeled, k_exemplar=budget - k_unlabeled)


def per_class_budgets(total: int, classes, available: dict[int, int]) -> dict[int, int]:
    """Even per-class split with remainder going to the best-stocked classes.

    Each class gets floor(total/m); the remainder goes one-each to the classes
    with the most remaining capacity (ties broken by ascending class id). A
    class never receives more than its available count; the excess is
    redistributed the same way, and budget that cannot be placed is dropped.
    """
    classes = sorted(set(classes))
    budgets = {c: 0 for c in classes}
    if total <= 0 or not classes:
        return budgets
    pending = total
    active = [c for c in classes if available.get(c, 0) > 0]
    while pending > 0 and active:
        base, extra = divmod(pending, len(active))
        by_capacity = sorted(active, key=lambda c: (-(available[c] - budgets[c]), c))
        grant = {c: base for c in active}
        for c in by_capacity[:extra]:
            grant[c] += 1
        pending = 0
        for c in active:
            room = available[c] - budgets[c]
            take = min(grant[c], room)
            budgets[c] += take
            pending += grant[c] - take
        active = [c for c in active if available[c] > budgets[c]]
    return budgets


def pseudo_label(model: ModelParams, samples, classes) -> dict[int, int]:
    """Argmax prediction restricted to the given classes; ties go to the
    lowest class id. Returns {sample id: class id}."""
    classes = sorted(set(classes))
    index = model.class_index()
    missing = [c for c in classes if c not in index]
    if missing:
        raise ContractViolation(f"model does not cover classes {missing}")
    if not samples:
        return {}
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    z = logits(model, x)[:, [index[c] for c in classes]]
    picks = z.argmax(axis=1)  # first max = lowest class id on ties
    return {s.id: classes[j] for s, j in zip(samples, picks)}


def pairwise_variance(embeddings: np.ndarray) -> float:
    """Mean squared pairwise spread of a partition via the difference identity:
    (1 / 2L^2) * sum over all ordered pairs of squared distances, which equals
    the mean squared distance to the centroid."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] == 0:
        raise ContractViolation("partition must be nonempty")
    return float(((x - x.mean(axis=0)) ** 2).sum(axis=1).mean())


def weighted_variance(embeddings: np.ndarray, weights: np.ndarray) -> float:
    """Uncertainty-weighted within-partition objective: sum of w(x) times the
    squared distance to the w-weighted mean. All-zero weights fall back to the
    unweighted mean (the objective is then 0 regardless)."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractViolation("partition must be nonempty")
    center = _weighted_mean(x, w)
    return float((w * ((x - center) ** 2).sum(axis=1)).sum())


def _weighted_mean(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    total = w.sum()
    if total <= 0:
        return x.mean(axis=0)
    return (w[:, None] * x).sum(axis=0) / total


def kmeans_pp_indices(x: np.ndarray, k: int, rng: np.random.Generator,
                      weights: np.ndarray | None = None) -> list[int]:
    """k-means++ seeding; with weights, picks are proportional to w(x)*D(x)^2
    (and the first to w(x) alone)."""
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    probs = w / total if total > 0 else np.full(n, 1.0 / n)
    chosen = [int(rng.choice(n, p=probs))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        scores = w * d2
        total = scores.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=scores / total))
        else:
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return chosen


def weighted_kmeans(x: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator,
                    max_iter: int = _KMEANS_MAX_ITER):
    """Lloyd iterations with weighted centroid updates and weighted ++ seeding.

    Stops when assignments stabilize. Empty clusters are re-seeded from the
    point with the largest weighted distance to its center (never emptying a
    singleton cluster). Returns (centers, assignment, objective history); the
    history is non-increasing.
    """
    n = x.shape[0]
    w = np.asarray(weights, dtype=np.float64)
    centers = x[kmeans_pp_indices(x, k, rng, weights=w)].copy()
    assign = None
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for b in range(k):
            if (new_assign == b).any():
                continue
            sizes = np.bincount(new_assign, minlength=k)
            wd = w * d2[np.arange(n), new_assign]
            wd[sizes[new_assign] < 2] = -np.inf
            j = int(wd.argmax())
            centers[b] = x[j]
            new_assign[j] = b
            d2[:, b] = ((x - centers[b]) ** 2).sum(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for b in range(k):
            members = assign == b
            centers[b] = _weighted_mean(x[members], w[members])
        history.append(float((w * ((x - centers[assign]) ** 2).sum(axis=1)).sum()))
    return centers, assign, history


def weighted_kmeans_select(pool, budget: int, embeddings, weights, seed) -> list[int]:
    """Pick ``budget`` sample ids: cluster with weighted k-means, then take the
    id nearest each cluster's weighted mean (ties to the lowest id).

    ``pool`` is a sequence of Samples; ``embeddings``/``weights`` are either
    {id: value} mappings or arrays aligned with the pool. Pools no larger than
    the budget are returned whole.
    """
    if budget < 1:
        raise ContractViolation(f"budget must be >= 1, got {budget}")
    if not len(pool):
        raise ContractViolation("pool must be nonempty")
    ids = [s.id for s in pool]
    x = _aligned(embeddings, ids)
    w = _aligned(weights, ids).ravel()
    if len(pool) <= budget:
        return list(ids)
    rng = np.random.default_rng(seed)
    centers, assign, _ = weighted_kmeans(x, w, budget, rng)
    ids_arr = np.asarray(ids)
    picked = []
    for b in range(budget):
        members = np.flatnonzero(assign == b)
        dist = ((x[members] - centers[b]) ** 2).sum(axis=1)
        order = np.lexsort((ids_arr[members], dist))
        picked.append(int(ids_arr[members][order[0]]))
    return picked


def _aligned(values, ids) -> np.ndarray:
    if isinstance(values, dict):
        return np.asarray([values[i] for i in ids], dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != len(ids):
        raise ContractViolation(f"{values.shape[0]} values for {len(ids)} pool members")
    return values


def _selection_model(ctx: SelectionContext) -> ModelParams:
    if ctx.pseudo_label_source == "previous":
        if ctx.snapshot is None:
            raise ContractViolation("pseudo_label_source='previous' requires a snapshot")
        return ctx.snapshot.params
    return ctx.model


def acil_select(ctx: SelectionContext) -> ExemplarSet:
    """Budget split over (episode, exemplar) classes, per-class budgets, then
    entropy-weighted k-means selection per class on each side.

    The episodic labeled set contributes nothing; selections from the
    unlabeled pool are the only newly annotated samples.
    """
    ctx.validate()
    ep = ctx.episode
    episode_classes = sorted({s.true_label for s in ep.labeled})
    exemplar_classes = sorted({s.true_label for s in ep.incoming_exemplars})
    split = split_budget(ctx.budget, episode_classes, exemplar_classes)

    unlabeled = sorted(ep.unlabeled, key=lambda s: s.id)
    exemplars = sorted(ep.incoming_exemplars, key=lambda s: s.id)
    plabels = pseudo_label(_selection_model(ctx), unlabeled, episode_classes)
    groups: dict[str, dict[int, list[Sample]]] = {
        FROM_UNLABELED: {c: [s for s in unlabeled if plabels[s.id] == c] for c in episode_classes},
        FROM_EXEMPLAR: {c: [s for s in exemplars if s.true_label == c] for c in exemplar_classes},
    }
    avail_u = {c: len(g) for c, g in groups[FROM_UNLABELED].items()}
    avail_e = {c: len(g) for c, g in groups[FROM_EXEMPLAR].items()}

    # Spill budget a side cannot absorb over to the other side, so the set
    # reaches min(budget, pool size) whenever the combined pool allows it.
    want = min(ctx.budget, len(unlabeled) + len(exemplars))
    place_u = min(sum(avail_u.values()), max(split.k_unlabeled, want - sum(avail_e.values())))
    place_e = want - place_u
    alloc = {FROM_UNLABELED: per_class_budgets(place_u, episode_classes, avail_u),
             FROM_EXEMPLAR: per_class_budgets(place_e, exemplar_classes, avail_e)}

    pool_all = unlabeled + exemplars
    feats = np.stack([s.features for s in pool_all])
    emb = np.atleast_2d(embed(ctx.model, feats))
    unc = np.maximum(entropy(predict_proba(ctx.model, feats)), _WEIGHT_FLOOR)
    emb_by_id = {s.id: emb[i] for i, s in enumerate(pool_all)}
    unc_by_id = {s.id: unc[i] for i, s in enumerate(pool_all)}

    root = np.random.SeedSequence(ctx.seed, spawn_key=(_LANE_ACIL,))
    children = iter(root.spawn(len(episode_classes) + len(exemplar_classes)))
    members, sources = [], []
    for tag in (FROM_UNLABELED, FROM_EXEMPLAR):
        for c in sorted(groups[tag]):
            child = next(children)
            quota = alloc[tag].get(c, 0)
            group = groups[tag][c]
            if quota == 0 or not group:
                continue
            chosen = weighted_kmeans_select(
                group, quota,
                {s.id: emb_by_id[s.id] for s in group},
                {s.id: unc_by_id[s.id] for s in group}, child)
            by_id = {s.id: s for s in group}
            for sid in chosen:
                sample = by_id[sid]
                sample.annotated = True
                members.append(sample)
                sources.append(tag)
    return ExemplarSet(members=tuple(members), sources=tuple(sources))


def _tagged(samples, episode: EpisodeData) -> ExemplarSet:
    unlabeled_ids = {s.id for s in episode.unlabeled}
    exemplar_ids = {s.id for s in episode.incoming_exemplars}
    sources = []
    for s in samples:
        if s.id in unlabeled_ids:
            sources.append(FROM_UNLABELED)
        elif s.id in exemplar_ids:
            sources.append(FROM_EXEMPLAR)
        else:
            sources.append(FROM_LABELED)
        s.annotated = True
    return ExemplarSet(members=tuple(samples), sources=tuple(sources))


def _full_annotation_pool(episode: EpisodeData) -> list[Sample]:
    pool = list(episode.labeled) + list(episode.unlabeled) + list(episode.incoming_exemplars)
    return sorted(pool, key=lambda s: s.id)


def _random_select(ctx: SelectionContext) -> ExemplarSet:
    pool = sorted(ctx.episode.unlabeled, key=lambda s: s.id)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.seed, spawn_key=(_LANE_RANDOM,)))
    take = min(ctx.budget, len(pool))
    picks = rng.choice(len(pool), size=take, replace=False)
    return _tagged([pool[i] for i in sorted(picks)], ctx.episode)


def _coreset_select(ctx: SelectionContext) -> ExemplarSet:
    """Greedy k-center over the unlabeled embeddings, with the labeled set's
    embeddings pre-placed as covered centers."""
    pool = sorted(ctx.episode.unlabeled, key=lambda s: s.id)
    x = np.atleast_2d(embed(ctx.model, np.stack([s.features for s in pool])))
    labeled = list(ctx.episode.labeled)
    if labeled:
        centers = np.atleast_2d(embed(ctx.model, np.stack([s.features for s in labeled])))
        min_d = np.sqrt(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    else:
        min_d = np.full(len(pool), np.inf)
    chosen = []
    for _ in range(min(ctx.budget, len(pool))):
        j = int(min_d.argmax())  # first max = lowest id (pool sorted by id)
        chosen.append(j)
        min_d = np.minimum(min_d, np.sqrt(((x - x[j]) ** 2).sum(axis=1)))
    return _tagged([pool[j] for j in chosen], ctx.episode)


def _badge_select(ctx: SelectionContext) -> ExemplarSet:
    """k-means++ seeding over output-layer gradient embeddings
    (p - onehot(predicted)) outer F(x)."""
    pool = sorted(ctx.episode.unlabeled, key=lambda s: s.id)
    feats = np.stack([s.features for s in pool])
    p = np.atleast_2d(predict_proba(ctx.model, feats))
    f = np.atleast_2d(embed(ctx.model, feats))
    g = p.copy()
    g[np.arange(len(pool)), p.argmax(axis=1)] -= 1.0
    grad_emb = (g[:, :, None] * f[:, None, :]).reshape(len(pool), -1)
    take = min(ctx.budget, len(pool))
    if take == len(pool):
        return _tagged(pool, ctx.episode)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.seed, spawn_key=(_LANE_BADGE,)))
    picks = kmeans_pp_indices(grad_emb, take, rng)
    return _tagged([pool[j] for j in sorted(picks)], ctx.episode)


def herd_class(embeddings: np.ndarray, quota: int) -> list[int]:
    """Greedy herding order: each pick keeps the running mean of the chosen
    set as close as possible to the class mean. Returns row indices."""
    mu = embeddings.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    taken = np.zeros(len(embeddings), dtype=bool)
    for t in range(1, min(quota, len(embeddings)) + 1):
        cand = (running + embeddings) / t
        d = ((cand - mu) ** 2).sum(axis=1)
        d[taken] = np.inf
        j = int(d.argmin())
        chosen.append(j)
        taken[j] = True
        running += embeddings[j]
    return chosen


def _icarl_select(ctx: SelectionContext) -> ExemplarSet:
    pool = _full_annotation_pool(ctx.episode)
    by_class: dict[int, list[Sample]] = {}
    for s in pool:
        by_class.setdefault(s.true_label, []).append(s)
    alloc = per_class_budgets(ctx.budget, by_class.keys(), {c: len(g) for c, g in by_class.items()})
    members = []
    for c in sorted(by_class):
        group = by_class[c]
        quota = alloc[c]
        if quota == 0:
            continue
        emb = np.atleast_2d(embed(ctx.model, np.stack([s.features for s in group])))
        members.extend(group[j] for j in herd_class(emb, quota))
    return _tagged(members, ctx.episode)


def _gdumb_select(ctx: SelectionContext) -> ExemplarSet:
    pool = _full_annotation_pool(ctx.episode)
    remaining: dict[int, list[Sample]] = {}
    for s in pool:
        remaining.setdefault(s.true_label, []).append(s)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.seed, spawn_key=(_LANE_GDUMB,)))
    counts = {c: 0 for c in remaining}
    members = []
    for _ in range(min(ctx.budget, len(pool))):
        c = min((c for c in remaining if remaining[c]), key=lambda c: (counts[c], c))
        group = remaining[c]
        members.append(group.pop(int(rng.integers(len(group)))))
        counts[c] += 1
    return _tagged(members, ctx.episode)


def _rainbow_select(ctx: SelectionContext) -> ExemplarSet:
    """Uncertainty = variance of the top-class probability over noise-perturbed
    copies; one pick per uncertainty stratum."""
    pool = _full_annotation_pool(ctx.episode)
    feats = np.stack([s.features for s in pool])
    rng = np.random.default_rng(np.random.SeedSequence(ctx.seed, spawn_key=(_LANE_RAINBOW,)))
    sigma = _RAINBOW_NOISE * feats.std(axis=0)
    top = np.empty((_RAINBOW_COPIES, len(pool)))
    for m in range(_RAINBOW_COPIES):
        noisy = feats + rng.standard_normal(feats.shape) * sigma
        top[m] = np.atleast_2d(predict_proba(ctx.model, noisy)).max(axis=1)
    uncertainty = top.var(axis=0)
    ids = np.asarray([s.id for s in pool])
    order = np.lexsort((ids, uncertainty))
    take = min(ctx.budget, len(pool))
    members = [pool[stratum[0]] for stratum in np.array_split(order, take)]
    return _tagged(members, ctx.episode)


_BASELINES = {
    "random": _random_select,
    "coreset": _coreset_select,
    "badge": _badge_select,
    "icarl": _icarl_select,
    "gdumb": _gdumb_select,
    "rainbow": _rainbow_select,
}


def baseline_select(strategy: str, ctx: SelectionContext) -> ExemplarSet:
    """Run one of the comparison strategies. random/coreset/badge draw from the
    unlabeled pool only; icarl/gdumb/rainbow assume full annotation and draw
    from everything the episode carries."""
    ctx.validate()
    if strategy not in _BASELINES:
        raise ConfigurationError(f"unknown baseline strategy {strategy!r}", key="strategy")
    return _BASELINES[strategy](ctx)


def select_exemplars(strategy: str, ctx: SelectionContext) -> ExemplarSet:
    """Dispatch by strategy id; finetuning keeps no exemplars."""
    if strategy == "acil":
        return acil_select(ctx)
    if strategy == "finetuning":
        return ExemplarSet(members=(), sources=())
    if strategy in _BASELINES:
        return baseline_select(strategy, ctx)
    raise ConfigurationError(f"unknown strategy {strategy!r}", key="strategy")
