"""Profiling attacks: prompt-attribute inference (PIA) and response reconstruction (RRA).

Profiling fits a model on ground-truth footprints with known secrets; the
attack phase runs it on footprints translated from side-channel traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .stats import topk_accuracy


class TrainingError(RuntimeError):
    """Raised when training diverges."""


# -- features -------------------------------------------------------------------


def featurize_load(load) -> np.ndarray:
    """Per-layer load proportions, concatenated layer-major.

    Accepts (L, M) or a batch (n, L, M); returns (L*M,) or (n, L*M).
    """
    x = np.asarray(load, dtype=np.float64)
    sums = x.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("a layer has zero total load")
    p = x / sums
    return p.reshape(p.shape[:-2] + (-1,))


def featurize_sequence(seq, layer_mask=None) -> np.ndarray:
    """Flatten (T, L, M) expert masks to (T, L*M) 0/1 features.

    ``layer_mask`` (length L, boolean) keeps a subset of layers.
    """
    s = np.asarray(seq, dtype=np.float64)
    if layer_mask is not None:
        s = s[..., np.asarray(layer_mask, dtype=bool), :]
    return s.reshape(s.shape[:-2] + (-1,))


@dataclass
class ProfilingDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,) int
    n_classes: int
    attribute: str = ""
    split: np.ndarray | None = None  # optional per-row tag, e.g. "train" / "test"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside the class range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ProfilingDataset":
        idx = np.asarray(idx)
        tags = None if self.split is None else self.split[idx]
        return ProfilingDataset(self.features[idx], self.labels[idx], self.n_classes, self.attribute, tags)

    def split_at(self, n_train: int) -> tuple["ProfilingDataset", "ProfilingDataset"]:
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def split_fraction(self, frac: float) -> tuple["ProfilingDataset", "ProfilingDataset"]:
        return self.split_at(int(round(frac * len(self))))


# -- PIA: multilayer perceptron ----------------------------------------------------


@dataclass(frozen=True)
class PiaHyper:
    hidden: tuple[int, ...] = (1024, 512)
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    optimizer: str = "momentum"  # or "adam"


@dataclass
class PiaModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    attribute: str = ""
    hyper: PiaHyper = field(default_factory=PiaHyper)
    history: dict = field(default_factory=dict)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(weights, biases, x):
    """Return class probabilities and the hidden activations."""
    acts = [x]
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    return _softmax(h @ weights[-1] + biases[-1]), acts


def mlp_loss_grad(weights, biases, x, y):
    """Mean cross-entropy and its gradients for a ReLU MLP with softmax output."""
    p, acts = mlp_forward(weights, biases, x)
    n = len(y)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


def _init_mlp(dims, rng):
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        bs.append(np.zeros(b))
    return ws, bs


def train_pia(train: ProfilingDataset, hyper: PiaHyper = PiaHyper(), valid: ProfilingDataset | None = None,
              target_attribute: str | None = None) -> PiaModel:
    """Fit the MLP by mini-batch gradient descent; deterministic under ``hyper.seed``."""
    if len(np.unique(train.labels)) < 2:
        raise ValueError("need at least two classes in the training set")
    rng = np.random.default_rng(hyper.seed)
    mean = train.features.mean(axis=0)
    scale = train.features.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    x = (train.features - mean) / scale
    y = train.labels
    dims = [x.shape[1], *hyper.hidden, train.n_classes]
    ws, bs = _init_mlp(dims, rng)
    params = ws + bs
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, gw, gb = mlp_loss_grad(ws, bs, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            step += 1
            for p, g, a, v in zip(params, gw + gb, m1, m2):
                if hyper.optimizer == "adam":
                    a *= 0.9
                    a += 0.1 * g
                    v *= 0.999
                    v += 0.001 * g * g
                    p -= hyper.lr * (a / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
                elif hyper.optimizer == "momentum":
                    a *= hyper.momentum
                    a -= hyper.lr * g
                    p += a
                else:
                    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")
        losses.append(total / len(y))
    model = PiaModel(ws, bs, mean, scale, target_attribute or train.attribute, hyper)
    model.history["loss"] = losses
    model.history["train_accuracy"] = topk_accuracy(infer_pia(model, train.features), y, 1)
    if valid is not None and len(valid):
        model.history["valid_accuracy"] = topk_accuracy(infer_pia(model, valid.features), valid.labels, 1)
    return model


def infer_pia(model: PiaModel, features) -> np.ndarray:
    """Class probabilities, (n, classes) or (classes,) for a single vector."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if f.shape[1] != model.dims[0]:
        raise ValueError(f"feature length {f.shape[1]} does not match model input {model.dims[0]}")
    p, _ = mlp_forward(model.weights, model.biases, (f - model.mean) / model.scale)
    return p[0] if single else p


# -- RRA: multinomial logistic regression ---------------------------------------------


@dataclass(frozen=True)
class RraHyper:
    l2: float = 1e-4
    max_iter: int = 300
    seed: int = 0  # the fit is deterministic; kept for the model header


@dataclass
class RraModel:
    weight: np.ndarray  # (d, vocab)
    bias: np.ndarray    # (vocab,)
    hyper: RraHyper = field(default_factory=RraHyper)
    history: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


def logreg_loss_grad(weight, bias, x, y, l2: float):
    """Mean cross-entropy + (l2 / 2) * |W|^2 and its gradients."""
    n = len(y)
    p = _softmax(x @ weight + bias)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))) + 0.5 * l2 * np.sum(weight * weight)
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, x.T @ delta + l2 * weight, delta.sum(axis=0)


def train_rra(train: ProfilingDataset, hyper: RraHyper = RraHyper()) -> RraModel:
    """Fit multinomial logistic regression with L-BFGS from a zero start."""
    if train.n_classes < 2:
        raise ValueError("vocabulary needs at least two tokens")
    x, y = train.features, train.labels
    d, c = x.shape[1], train.n_classes

    def fun(theta):
        w = theta[: d * c].reshape(d, c)
        loss, gw, gb = logreg_loss_grad(w, theta[d * c:], x, y, hyper.l2)
        return loss, np.concatenate([gw.ravel(), gb])

    res = minimize(fun, np.zeros(d * c + c), jac=True, method="L-BFGS-B",
                   options={"maxiter": hyper.max_iter})
    if not np.isfinite(res.fun):
        raise TrainingError(f"logistic regression diverged: {res.message}")
    model = RraModel(res.x[: d * c].reshape(d, c).copy(), res.x[d * c:].copy(), hyper)
    model.history.update(loss=float(res.fun), iterations=int(res.nit), converged=bool(res.success))
    return model


def infer_rra(model: RraModel, features) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[1] != model.n_features:
        raise ValueError(f"feature length {f.shape[1]} does not match model input {model.n_features}")
    return _softmax(f @ model.weight + model.bias)


def reconstruct_response(model: RraModel, sequences, vocab=None, layer_mask=None):
    """Most likely token for every decode step; returns (ids, text or None)."""
    seq = sequences.mask if hasattr(sequences, "mask") else sequences
    ids = np.argmax(infer_rra(model, featurize_sequence(seq, layer_mask)), axis=1)
    return ids, (vocab.decode(ids) if vocab is not None else None)


# -- evaluation grid -------------------------------------------------------------------


def _scores(model, features):
    return infer_pia(model, features) if isinstance(model, PiaModel) else infer_rra(model, features)


def cross_evaluate(models: dict, datasets: dict, k: int = 1):
    """Top-k accuracy of every model on every dataset.

    Returns ``(row_names, col_names, matrix)`` with rows = models.
    """
    rows, cols = list(models), list(datasets)
    mat = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            ds = datasets[c]
            mat[i, j] = topk_accuracy(_scores(models[r], ds.features), ds.labels, k)
    return rows, cols, mat
