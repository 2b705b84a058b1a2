"""Cross-sectional ranking network.

A feedforward net maps one date's preprocessed feature matrix to raw
scores; each hidden layer applies affine -> batch norm -> ReLU ->
dropout. Scores become rank probabilities through a temperature-scaled
softmax, and training minimizes a blend of listwise softmax
cross-entropy against the softmax of standardized forward returns and
plain MSE against the raw returns.

Training is walk-forward: each retrain date fits fresh seeded
parameters on all (features, forward-return) pairs whose label window
closes strictly before the retrain date.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FitError
from .features import FeaturePanel
from .seeds import substream

BN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    layer_dims: tuple[int, ...] = (28, 64, 32, 16, 1)
    dropout_hidden: float = 0.3
    dropout_input: float = 0.1
    temperature: float = 2.0
    loss_alpha: float = 0.7
    learning_rate: float = 0.05
    epochs: int = 15
    batch_size: int = 8  # dates per mini-batch
    seed: int = 0
    horizon: int = 9
    bn_momentum: float = 0.9

    def validate(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or dims[-1] != 1:
            raise ConfigError("layer_dims must end in 1 and contain at least input and output")
        # the hidden chain must shrink; the input width is whatever the
        # feature set dictates and is exempt from the ordering rule
        hidden = dims[1:]
        if any(hidden[i] <= hidden[i + 1] for i in range(len(hidden) - 1)):
            raise ConfigError(f"hidden layer dims must be strictly decreasing, got {hidden}")
        if not 0 <= self.dropout_hidden < 1 or not 0 <= self.dropout_input < 1:
            raise ConfigError("dropout rates must be in [0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0 <= self.loss_alpha <= 1:
            raise ConfigError("loss_alpha must be in [0, 1]")


@dataclass
class NetworkParams:
    """Weights plus batch-norm state; serializable for reproducible reuse."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    bn_mean: list[np.ndarray]
    bn_var: list[np.ndarray]
    dropout_hidden: float = 0.3
    dropout_input: float = 0.1
    temperature: float = 2.0

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "bn_gamma": [g.tolist() for g in self.bn_gamma],
            "bn_beta": [b.tolist() for b in self.bn_beta],
            "bn_mean": [m.tolist() for m in self.bn_mean],
            "bn_var": [v.tolist() for v in self.bn_var],
            "dropout_hidden": self.dropout_hidden,
            "dropout_input": self.dropout_input,
            "temperature": self.temperature,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        return cls(
            layer_dims=tuple(d["layer_dims"]),
            weights=[np.asarray(w, dtype=float) for w in d["weights"]],
            biases=[np.asarray(b, dtype=float) for b in d["biases"]],
            bn_gamma=[np.asarray(g, dtype=float) for g in d["bn_gamma"]],
            bn_beta=[np.asarray(b, dtype=float) for b in d["bn_beta"]],
            bn_mean=[np.asarray(m, dtype=float) for m in d["bn_mean"]],
            bn_var=[np.asarray(v, dtype=float) for v in d["bn_var"]],
            dropout_hidden=float(d["dropout_hidden"]),
            dropout_input=float(d["dropout_input"]),
            temperature=float(d["temperature"]),
        )

    @classmethod
    def from_json(cls, s: str) -> "NetworkParams":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class RankScore:
    instrument_id: str
    raw_score: float
    rank_prob: float


def init_params(config: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    """He-initialized weights, identity batch-norm, zero biases."""
    config.validate()
    dims = config.layer_dims
    weights, biases = [], []
    bn_gamma, bn_beta, bn_mean, bn_var = [], [], [], []
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        if l < len(dims) - 2:  # hidden layers only
            bn_gamma.append(np.ones(fan_out))
            bn_beta.append(np.zeros(fan_out))
            bn_mean.append(np.zeros(fan_out))
            bn_var.append(np.ones(fan_out))
    return NetworkParams(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        bn_gamma=bn_gamma,
        bn_beta=bn_beta,
        bn_mean=bn_mean,
        bn_var=bn_var,
        dropout_hidden=config.dropout_hidden,
        dropout_input=config.dropout_input,
        temperature=config.temperature,
    )


def forward(
    params: NetworkParams,
    X: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    bn_momentum: float = 0.9,
    return_cache: bool = False,
):
    """Raw scores for a feature batch.

    Train mode uses batch statistics (updating the running ones) and
    seeded dropout; eval mode is a deterministic function of
    (params, X). Set return_cache for backprop intermediates.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.layer_dims[0]:
        raise ValueError(f"expected features of dim {params.layer_dims[0]}, got {X.shape}")
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    rng = substream(seed, "dropout") if train else None
    n_layers = len(params.weights)
    cache: dict = {"layers": [], "X_in": None}

    h = X
    if train and params.dropout_input > 0:
        keep = 1.0 - params.dropout_input
        mask = (rng.uniform(size=h.shape) < keep) / keep
        h = h * mask
        cache["input_mask"] = mask
    cache["X_in"] = h

    for l in range(n_layers - 1):
        z = h @ params.weights[l].T + params.biases[l]
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            params.bn_mean[l] = bn_momentum * params.bn_mean[l] + (1 - bn_momentum) * mu
            params.bn_var[l] = bn_momentum * params.bn_var[l] + (1 - bn_momentum) * var
        else:
            mu = params.bn_mean[l]
            var = params.bn_var[l]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mu) * inv_std
        bn_out = params.bn_gamma[l] * zhat + params.bn_beta[l]
        a = np.maximum(bn_out, 0.0)
        if train and params.dropout_hidden > 0:
            keep = 1.0 - params.dropout_hidden
            mask = (rng.uniform(size=a.shape) < keep) / keep
            out = a * mask
        else:
            mask = None
            out = a
        cache["layers"].append(
            {"h_in": h, "z": z, "zhat": zhat, "inv_std": inv_std, "bn_out": bn_out, "mask": mask}
        )
        h = out

    scores = (h @ params.weights[-1].T + params.biases[-1])[:, 0]
    cache["h_last"] = h
    if return_cache:
        return scores, cache
    return scores


def backward(params: NetworkParams, cache: dict, dscores: np.ndarray) -> dict:
    """Gradients of the batch loss w.r.t. all trainable parameters."""
    n_layers = len(params.weights)
    grads = {
        "weights": [None] * n_layers,
        "biases": [None] * n_layers,
        "bn_gamma": [None] * (n_layers - 1),
        "bn_beta": [None] * (n_layers - 1),
    }
    dz = dscores[:, None]
    grads["weights"][-1] = dz.T @ cache["h_last"]
    grads["biases"][-1] = dz.sum(axis=0)
    dh = dz @ params.weights[-1]

    for l in range(n_layers - 2, -1, -1):
        layer = cache["layers"][l]
        if layer["mask"] is not None:
            dh = dh * layer["mask"]
        da = dh * (layer["bn_out"] > 0)
        grads["bn_gamma"][l] = (da * layer["zhat"]).sum(axis=0)
        grads["bn_beta"][l] = da.sum(axis=0)
        dzhat = da * params.bn_gamma[l]
        B = dzhat.shape[0]
        zhat = layer["zhat"]
        dz = (
            layer["inv_std"]
            / B
            * (B * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
        )
        grads["weights"][l] = dz.T @ layer["h_in"]
        grads["biases"][l] = dz.sum(axis=0)
        dh = dz @ params.weights[l]
    if "input_mask" in cache:
        dh = dh * cache["input_mask"]
    return grads


# -- ranking and loss --------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def rank_probabilities(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax with max subtraction for stability."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("rank_probabilities requires at least one score")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return _softmax(scores / temperature)


def combined_loss(
    scores: np.ndarray, future_returns: np.ndarray, alpha: float
) -> tuple[float, np.ndarray]:
    """Blend of listwise ranking cross-entropy and regression MSE.

    The ranking target is the softmax of per-date standardized returns;
    the score softmax in the loss uses temperature 1. Returns the loss
    and its analytic gradient w.r.t. the scores.
    """
    z = np.asarray(scores, dtype=float)
    r = np.asarray(future_returns, dtype=float)
    if z.shape != r.shape:
        raise ValueError(f"scores and returns must match, got {z.shape} vs {r.shape}")
    if len(z) < 2:
        raise ValueError("need at least 2 instruments for the listwise loss")
    sd = float(np.std(r))
    r_std = (r - np.mean(r)) / sd if sd > 0 else np.zeros_like(r)
    p = _softmax(r_std)
    q = _softmax(z)
    l_rank = float(-np.sum(p * np.log(np.maximum(q, 1e-300))))
    l_reg = float(np.mean((z - r) ** 2))
    loss = alpha * l_rank + (1 - alpha) * l_reg
    grad = alpha * (q - p) + (1 - alpha) * 2.0 * (z - r) / len(z)
    return loss, grad


# -- walk-forward training -----------------------------------------------------


@dataclass
class TrainedModel:
    """Parameter sequence from walk-forward retraining."""

    entries: list[tuple[dt.date, NetworkParams, list[float]]] = field(default_factory=list)

    def active_params(self, date: dt.date) -> NetworkParams:
        chosen = None
        for d, p, _ in self.entries:
            if d <= date:
                chosen = p
            else:
                break
        if chosen is None:
            raise FitError(f"no trained parameters available at {date}")
        return chosen


def _eval_dataset_loss(params: NetworkParams, dataset: list[tuple[np.ndarray, np.ndarray]], alpha: float) -> float:
    total = 0.0
    for X, y in dataset:
        scores = forward(params, X, mode="eval")
        loss, _ = combined_loss(scores, y, alpha)
        total += loss
    return total / max(1, len(dataset))


def train_network(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    config: NetworkConfig,
    seed_key: int,
) -> tuple[NetworkParams, list[float]]:
    """Mini-batch gradient descent over per-date lists.

    Each mini-batch concatenates a few dates' cross-sections; the loss
    is the mean of per-date combined losses. Returns the parameters and
    the per-epoch eval-mode loss trace.
    """
    if not dataset:
        raise FitError("no training data before the retrain date")
    rng = substream(config.seed, "train", seed_key)
    params = init_params(config, rng)
    trace: list[float] = []
    n_dates = len(dataset)
    order = np.arange(n_dates)
    step = 0
    for epoch in range(config.epochs):
        rng.shuffle(order)
        for start in range(0, n_dates, config.batch_size):
            batch_ids = order[start : start + config.batch_size]
            X = np.concatenate([dataset[i][0] for i in batch_ids], axis=0)
            scores, cache = forward(
                params,
                X,
                mode="train",
                seed=int(rng.integers(2**31)),
                bn_momentum=config.bn_momentum,
                return_cache=True,
            )
            dscores = np.zeros(len(scores))
            pos = 0
            for i in batch_ids:
                n_i = len(dataset[i][1])
                sl = slice(pos, pos + n_i)
                _, g = combined_loss(scores[sl], dataset[i][1], config.loss_alpha)
                dscores[sl] = g / len(batch_ids)
                pos += n_i
            grads = backward(params, cache, dscores)
            lr = config.learning_rate
            for l in range(len(params.weights)):
                params.weights[l] -= lr * grads["weights"][l]
                params.biases[l] -= lr * grads["biases"][l]
            for l in range(len(params.bn_gamma)):
                params.bn_gamma[l] -= lr * grads["bn_gamma"][l]
                params.bn_beta[l] -= lr * grads["bn_beta"][l]
            step += 1
        trace.append(_eval_dataset_loss(params, dataset, config.loss_alpha))
    return params, trace


def train_walk_forward(
    dataset_by_index: dict[int, tuple[np.ndarray, np.ndarray]],
    calendar: tuple[dt.date, ...],
    schedule: list[int],
    config: NetworkConfig,
) -> TrainedModel:
    """Fit one parameter set per retrain index over an expanding window.

    `dataset_by_index` maps a calendar index t to that date's
    (features, forward returns); the pair for t is admitted into the
    fit at retrain index d only when t + horizon < d, so no label
    window reaches the retrain date. Seeds derive from the retrain
    date, never from panel contents, so later data cannot perturb
    earlier parameters.
    """
    config.validate()
    model = TrainedModel()
    for d_idx in schedule:
        usable = [dataset_by_index[t] for t in sorted(dataset_by_index) if t + config.horizon < d_idx]
        usable = [(X, y) for X, y in usable if len(y) >= 2]
        if not usable:
            raise FitError(f"no training data before retrain index {d_idx}")
        params, trace = train_network(usable, config, seed_key=calendar[d_idx].toordinal())
        model.entries.append((calendar[d_idx], params, trace))
    return model


def predict_scores(params: NetworkParams, features: FeaturePanel) -> list[RankScore]:
    """Eval-mode forward pass plus temperature softmax over the date."""
    X = np.where(features.missing, 0.0, features.values)
    scores = forward(params, X, mode="eval")
    probs = rank_probabilities(scores, params.temperature)
    return [
        RankScore(instrument_id=inst, raw_score=float(scores[i]), rank_prob=float(probs[i]))
        for i, inst in enumerate(features.instruments)
    ]
