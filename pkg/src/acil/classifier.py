"""Compact multinomial classifier trained with class-weighted cross-entropy
plus optional knowledge distillation from a frozen previous-episode model.

The network is a one-hidden-layer ReLU MLP (hidden width 0 degenerates to a
linear softmax classifier). Everything is float64 numpy with hand-written
gradients so the whole objective can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastream import Sample
from .errors import ConfigurationError, ContractViolation, NumericalDivergence

ALPHA_MODES = ("balanced", "unit")
OPTIMIZERS = ("sgd", "adam")

# Widened (all-zero) output columns get this much seeded noise at train time.
_SYMMETRY_BREAK_SCALE = 1e-3


@dataclass
class ModelParams:
    """MLP parameters plus the class ids its output units correspond to.

    ``classes[j]`` is the class id of logit j. ``w1``/``b1`` are absent when
    ``hidden_dim == 0``; the embedding is then the input itself.
    """

    input_dim: int
    hidden_dim: int
    classes: tuple[int, ...]
    w1: np.ndarray | None
    b1: np.ndarray | None
    w2: np.ndarray
    b2: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_index(self) -> dict[int, int]:
        return {c: j for j, c in enumerate(self.classes)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.input_dim, self.hidden_dim, tuple(self.classes),
                           None if self.w1 is None else self.w1.copy(),
                           None if self.b1 is None else self.b1.copy(),
                           self.w2.copy(), self.b2.copy())

    def params(self) -> dict[str, np.ndarray]:
        out = {"w2": self.w2, "b2": self.b2}
        if self.hidden_dim > 0:
            out.update(w1=self.w1, b1=self.b1)
        return out


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of a trained model, used for distillation targets."""

    params: ModelParams
    classes: tuple[int, ...]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.05
    distill_weight: float = 1.0
    temperature: float = 2.0
    alpha_mode: str = "balanced"
    hidden_dim: int = 32
    optimizer: str = "sgd"
    warm_start: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1", key="epochs")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1", key="batch_size")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive", key="learning_rate")
        if self.distill_weight < 0:
            raise ConfigurationError("distill_weight must be >= 0", key="distill_weight")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive", key="temperature")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigurationError(f"alpha_mode must be one of {ALPHA_MODES}", key="alpha_mode")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}", key="optimizer")
        if self.hidden_dim < 0:
            raise ConfigurationError("hidden_dim must be >= 0", key="hidden_dim")


@dataclass
class TrainResult:
    model: ModelParams
    snapshot: ModelSnapshot
    epoch_losses: list[float] = field(default_factory=list)


def init_model(input_dim: int, hidden_dim: int, classes, seed=0) -> ModelParams:
    """Fresh model with N(0, 1/sqrt(fan_in)) weights and zero biases."""
    rng = np.random.default_rng(seed)
    classes = tuple(int(c) for c in classes)
    if hidden_dim > 0:
        w1 = rng.standard_normal((input_dim, hidden_dim)) / np.sqrt(input_dim)
        b1 = np.zeros(hidden_dim)
        w2 = rng.standard_normal((hidden_dim, len(classes))) / np.sqrt(hidden_dim)
    else:
        w1 = b1 = None
        w2 = rng.standard_normal((input_dim, len(classes))) / np.sqrt(input_dim)
    return ModelParams(input_dim, hidden_dim, classes, w1, b1, w2, np.zeros(len(classes)))


def widen_model(model: ModelParams, new_classes) -> ModelParams:
    """Extend the output layer with zero-initialized units for unseen classes.

    Old-class logits are bitwise unchanged; the zero columns receive a small
    seeded perturbation only when training starts.
    """
    new = [int(c) for c in new_classes if c not in model.classes]
    if not new:
        return model.copy()
    widened = model.copy()
    widened.classes = tuple(model.classes) + tuple(sorted(new))
    widened.w2 = np.hstack([widened.w2, np.zeros((widened.w2.shape[0], len(new)))])
    widened.b2 = np.concatenate([widened.b2, np.zeros(len(new))])
    return widened


def _as_features(x) -> np.ndarray:
    if isinstance(x, Sample):
        return np.asarray(x.features, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _forward(model: ModelParams, x: np.ndarray):
    """Returns (pre-activation, embedding, logits) for a 2-D batch."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ContractViolation(
            f"feature dimension {x.shape[-1] if x.ndim else '?'} does not match model input {model.input_dim}")
    if model.hidden_dim > 0:
        pre = x @ model.w1 + model.b1
        act = np.maximum(pre, 0.0)
    else:
        pre, act = None, x
    return pre, act, act @ model.w2 + model.b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def logits(model: ModelParams, x) -> np.ndarray:
    feats = _as_features(x)
    single = feats.ndim == 1
    _, _, z = _forward(model, np.atleast_2d(feats))
    return z[0] if single else z


def predict_proba(model: ModelParams, x) -> np.ndarray:
    """Softmax class probabilities for a Sample, a vector, or a batch."""
    z = logits(model, x)
    return np.exp(_log_softmax(z))


def embed(model: ModelParams, x) -> np.ndarray:
    """Embedding = last hidden activation, or the input itself when hidden_dim == 0."""
    feats = _as_features(x)
    single = feats.ndim == 1
    _, act, _ = _forward(model, np.atleast_2d(feats))
    return act[0] if single else act


def predict_labels(model: ModelParams, x) -> np.ndarray:
    """Argmax class ids over the model's output units."""
    z = np.atleast_2d(logits(model, x))
    return np.asarray(model.classes, dtype=np.int64)[z.argmax(axis=1)]


def entropy(p) -> float | np.ndarray:
    """Shannon entropy (natural log) with the 0*log(0) = 0 convention.

    Accepts one distribution or a batch of row distributions; rejects inputs
    with negative mass or row sums off 1 by more than 1e-6.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ContractViolation("probability vector has negative entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractViolation(f"probabilities sum to {sums}, not 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def class_weights(class_counts: dict[int, int], alpha: float) -> dict[int, float]:
    """Importance weight alpha / n_j per class."""
    if any(n < 1 for n in class_counts.values()):
        raise ContractViolation("every class present must have count >= 1")
    return {c: alpha / n for c, n in class_counts.items()}


def resolve_alpha(mode: str, num_samples: int, num_classes: int) -> float:
    """'balanced' makes the weights average to 1 on balanced data; 'unit' is alpha = 1."""
    if mode == "balanced":
        return num_samples / num_classes
    if mode == "unit":
        return 1.0
    raise ConfigurationError(f"unknown alpha_mode {mode!r}", key="alpha_mode")


def weighted_ce_loss(model: ModelParams, batch, class_counts: dict[int, int],
                     alpha: float) -> float:
    """Mean over the batch of w_y * (-log p_y) with w_j = alpha / n_j."""
    if not batch:
        return 0.0
    weights = class_weights(class_counts, alpha)
    index = model.class_index()
    x = np.stack([_as_features(s) for s in batch])
    y, w = [], []
    for s in batch:
        if s.true_label not in index:
            raise ContractViolation(f"label {s.true_label} outside model classes {model.classes}")
        if s.true_label not in weights:
            raise ContractViolation(f"no class count for label {s.true_label}")
        y.append(index[s.true_label])
        w.append(weights[s.true_label])
    _, _, z = _forward(model, x)
    logp = _log_softmax(z)
    return float(-(np.asarray(w) * logp[np.arange(len(batch)), y]).mean())


def _old_class_index(model: ModelParams, snapshot: ModelSnapshot) -> np.ndarray:
    index = model.class_index()
    missing = [c for c in snapshot.classes if c not in index]
    if missing:
        raise ContractViolation(f"snapshot classes {missing} missing from model classes")
    return np.asarray([index[c] for c in snapshot.classes], dtype=np.int64)


def distillation_targets(snapshot: ModelSnapshot, x: np.ndarray, temperature: float) -> np.ndarray:
    _, _, z = _forward(snapshot.params, x)
    return np.exp(_log_softmax(z / temperature))


def distillation_loss(model: ModelParams, snapshot: ModelSnapshot, batch,
                      temperature: float) -> float:
    """Cross-entropy between the snapshot's softened outputs and the current
    model's softened outputs restricted to the snapshot's classes."""
    if not batch:
        return 0.0
    old = _old_class_index(model, snapshot)
    x = np.stack([_as_features(s) for s in batch])
    targets = distillation_targets(snapshot, x, temperature)
    _, _, z = _forward(model, x)
    logp = _log_softmax(z[:, old] / temperature)
    return float(-(targets * logp).sum(axis=1).mean())


def training_loss_and_grads(model: ModelParams, x: np.ndarray, y_index: np.ndarray,
                            sample_weights: np.ndarray, distill_weight: float = 0.0,
                            temperature: float = 2.0, distill_mask: np.ndarray | None = None,
                            distill_targets_rows: np.ndarray | None = None,
                            old_index: np.ndarray | None = None):
    """Total objective (weighted CE + distill_weight * distillation) and its
    analytic gradients for one batch.

    ``y_index`` holds positions in ``model.classes``; ``sample_weights`` the
    per-sample CE weights w_{y_i}. Rows flagged in ``distill_mask`` contribute
    the distillation term against ``distill_targets_rows`` (one row per
    flagged sample, over ``old_index`` output positions).
    """
    n = x.shape[0]
    pre, act, z = _forward(model, x)
    logp = _log_softmax(z)
    p = np.exp(logp)

    loss = float(-(sample_weights * logp[np.arange(n), y_index]).mean())
    dz = p * sample_weights[:, None]
    dz[np.arange(n), y_index] -= sample_weights
    dz /= n

    if distill_weight > 0 and distill_mask is not None and distill_mask.any():
        m = int(distill_mask.sum())
        zs = z[distill_mask][:, old_index] / temperature
        logps = _log_softmax(zs)
        loss += distill_weight * float(-(distill_targets_rows * logps).sum(axis=1).mean())
        dzs = distill_weight * (np.exp(logps) - distill_targets_rows) / (temperature * m)
        scatter = np.zeros_like(dz)
        rows = np.flatnonzero(distill_mask)
        scatter[np.ix_(rows, old_index)] = dzs
        dz += scatter

    grads = {"w2": act.T @ dz, "b2": dz.sum(axis=0)}
    if model.hidden_dim > 0:
        dact = dz @ model.w2.T
        dpre = dact * (pre > 0)
        grads["w1"] = x.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
    return loss, grads


def _perturb_zero_output_units(model: ModelParams, rng: np.random.Generator) -> None:
    """Break the symmetry of freshly widened (all-zero) output units."""
    zero = (model.w2 == 0).all(axis=0) & (model.b2 == 0)
    if zero.any():
        model.w2[:, zero] = _SYMMETRY_BREAK_SCALE * rng.standard_normal((model.w2.shape[0], int(zero.sum())))


def snapshot_of(model: ModelParams) -> ModelSnapshot:
    frozen = model.copy()
    for arr in frozen.params().values():
        arr.setflags(write=False)
    return ModelSnapshot(params=frozen, classes=tuple(frozen.classes))


def train_episode(model: ModelParams, episode, snapshot: ModelSnapshot | None,
                  cfg: TrainConfig) -> TrainResult:
    """Mini-batch training on the episode's labeled pool plus incoming exemplars.

    The distillation term applies only to exemplar rows and is dropped when
    there is no snapshot, no exemplars, or distill_weight == 0. Raises
    NumericalDivergence if the loss goes non-finite.
    """
    cfg.validate()
    if not episode.labeled:
        raise ContractViolation("episode.labeled must be nonempty")
    model = model.copy()
    pool = list(episode.labeled) + list(episode.incoming_exemplars)
    index = model.class_index()
    for s in pool:
        if s.true_label not in index:
            raise ContractViolation(f"label {s.true_label} outside model classes {model.classes}")

    x = np.stack([_as_features(s) for s in pool])
    y = np.asarray([index[s.true_label] for s in pool], dtype=np.int64)
    counts: dict[int, int] = {}
    for s in pool:
        counts[s.true_label] = counts.get(s.true_label, 0) + 1
    alpha = resolve_alpha(cfg.alpha_mode, len(pool), len(counts))
    wmap = class_weights(counts, alpha)
    w = np.asarray([wmap[s.true_label] for s in pool])

    distill = snapshot is not None and cfg.distill_weight > 0 and len(episode.incoming_exemplars) > 0
    if distill:
        old_index = _old_class_index(model, snapshot)
        mask = np.zeros(len(pool), dtype=bool)
        mask[len(episode.labeled):] = True
        targets_all = np.zeros((len(pool), len(old_index)))
        targets_all[mask] = distillation_targets(snapshot, x[mask], cfg.temperature)
    else:
        old_index = mask = targets_all = None

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    _perturb_zero_output_units(model, rng)

    params = model.params()
    adam_m = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adam" else None
    adam_v = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adam" else None
    step = 0

    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pool))
        total = 0.0
        for start in range(0, len(pool), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_mask = mask[idx] if distill else None
            batch_targets = targets_all[idx][batch_mask] if distill and batch_mask.any() else None
            loss, grads = training_loss_and_grads(
                model, x[idx], y[idx], w[idx],
                distill_weight=cfg.distill_weight if distill else 0.0,
                temperature=cfg.temperature, distill_mask=batch_mask,
                distill_targets_rows=batch_targets, old_index=old_index)
            if not np.isfinite(loss):
                raise NumericalDivergence(f"non-finite loss at epoch {epoch}", epoch=epoch)
            total += loss * len(idx)
            params = model.params()
            if cfg.optimizer == "adam":
                step += 1
                for k, g in grads.items():
                    adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
                    adam_v[k] = 0.999 * adam_v[k] + 0.001 * g * g
                    mhat = adam_m[k] / (1 - 0.9 ** step)
                    vhat = adam_v[k] / (1 - 0.999 ** step)
                    params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                for k, g in grads.items():
                    params[k] -= cfg.learning_rate * g
        epoch_losses.append(total / len(pool))
    return TrainResult(model=model, snapshot=snapshot_of(model), epoch_losses=epoch_losses)


CHECKPOINT_VERSION = "acil-model v1"


def save_model(model: ModelParams, path: str) -> None:
    """Write a model checkpoint: versioned text header, then each tensor as
    full-precision decimal rows (exact float64 round-trip)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CHECKPOINT_VERSION + "\n")
        fh.write(f"input_dim {model.input_dim}\n")
        fh.write(f"hidden_dim {model.hidden_dim}\n")
        fh.write("classes " + " ".join(str(c) for c in model.classes) + "\n")
        for name, arr in sorted(model.params().items()):
            mat = np.atleast_2d(arr)
            fh.write(f"tensor {name} {' '.join(str(d) for d in arr.shape)}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write("end\n")


def load_model(path: str) -> ModelParams:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_VERSION!r} checkpoint")
    input_dim = int(lines[1].split()[1])
    hidden_dim = int(lines[2].split()[1])
    classes = tuple(int(v) for v in lines[3].split()[1:])
    tensors: dict[str, np.ndarray] = {}
    i = 4
    while i < len(lines) and lines[i] != "end":
        _, name, *shape = lines[i].split()
        shape = tuple(int(v) for v in shape)
        rows = 1 if len(shape) == 1 else shape[0]
        data = [[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)]
        tensors[name] = np.asarray(data, dtype=np.float64).reshape(shape)
        i += 1 + rows
    model = ModelParams(input_dim, hidden_dim, classes,
                        tensors.get("w1"), tensors.get("b1"), tensors["w2"], tensors["b2"])
    return model
