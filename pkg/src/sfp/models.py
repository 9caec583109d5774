"""Linear and one-hidden-layer models with explicit gradients.

Parameters live in a dict of float64 arrays so gradients, SGD and
checkpointing treat every model kind the same way. The feature map ``f(x)``
is ``x W'`` for the linear model and ``relu(x W' + b)`` for the MLP.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NumericalFailure


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "linear" | "mlp"
    input_dim: int
    feature_dim: int
    classes: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise InvalidInput(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.feature_dim < 1:
            raise InvalidInput("model dimensions must be >= 1")
        if self.kind == "mlp" and self.classes < 1:
            raise InvalidInput("mlp needs classes >= 1")


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict
    step: int = 0

    def copy(self):
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.step)


@dataclass
class BatchGradients:
    grads: dict
    per_sample_losses: np.ndarray
    objective: float = 0.0
    extras: dict = field(default_factory=dict)


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_model(spec, seed):
    rng = np.random.default_rng(seed)
    params = {"w": _glorot(rng, spec.feature_dim, spec.input_dim)}
    if spec.kind == "mlp":
        params["b"] = np.zeros(spec.feature_dim)
        params["head"] = _glorot(rng, spec.classes, spec.feature_dim)
        params["c"] = np.zeros(spec.classes)
    return ModelState(spec, params)


def _check_batch(state, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.spec.input_dim:
        raise InvalidInput(f"batch must be n x {state.spec.input_dim}, got {x.shape}")
    return x


def forward_cache(state, x):
    """Forward pass keeping what ``backward`` needs."""
    x = _check_batch(state, x)
    p = state.params
    pre = x @ p["w"].T
    if state.spec.kind == "linear":
        return {"x": x, "pre": pre, "features": pre, "outputs": pre}
    pre = pre + p["b"]
    feats = np.maximum(pre, 0.0)
    return {"x": x, "pre": pre, "features": feats, "outputs": feats @ p["head"].T + p["c"]}


def forward(state, batch):
    """Returns ``(features, outputs)``."""
    c = forward_cache(state, batch)
    return c["features"], c["outputs"]


def backward(state, cache, d_outputs, d_features=None):
    """Parameter gradients given gradients on outputs and (optionally) features."""
    p = state.params
    x = cache["x"]
    if state.spec.kind == "linear":
        d_pre = d_outputs if d_features is None else d_outputs + d_features
        return {"w": d_pre.T @ x}
    grads = {"head": d_outputs.T @ cache["features"], "c": d_outputs.sum(axis=0)}
    d_feat = d_outputs @ p["head"]
    if d_features is not None:
        d_feat = d_feat + d_features
    d_pre = d_feat * (cache["pre"] > 0)
    grads["w"] = d_pre.T @ x
    grads["b"] = d_pre.sum(axis=0)
    return grads


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def per_sample_losses(state, outputs, labels):
    """Per-sample task losses and their gradients w.r.t. the outputs.

    Squared error summed over outputs (linear) or softmax cross-entropy (mlp).
    """
    if state.spec.kind == "linear":
        y = np.asarray(labels, dtype=np.float64).reshape(outputs.shape)
        r = outputs - y
        return np.sum(r * r, axis=1), 2.0 * r
    labels = np.asarray(labels, dtype=np.int64)
    prob = softmax(outputs)
    n = len(labels)
    losses = -np.log(np.maximum(prob[np.arange(n), labels], 1e-300))
    d = prob.copy()
    d[np.arange(n), labels] -= 1.0
    return losses, d


def penalty_feature_grad(features, pre, mask, eta, kind):
    """Gradient of the mean over masked samples of ``eta_i mean_j |f_ij|`` w.r.t. the features."""
    n, m = features.shape
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (n,))
    mask = np.asarray(mask, dtype=np.float64)
    weight = (mask * eta)[:, None] / (max(mask.sum(), 1.0) * m)
    sign = np.sign(features) if kind == "linear" else (features > 0).astype(np.float64)
    return weight * sign


def penalty_value(features, mask, eta):
    n = features.shape[0]
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (n,))
    mask = np.asarray(mask, dtype=np.float64)
    per = np.mean(np.abs(features), axis=1)
    return float(np.sum(mask * eta * per) / max(mask.sum(), 1.0))


def loss_and_grads(state, batch, labels, penalty_mask=None, eta=0.0):
    """Mean task loss plus ``eta * mean |f(x)|`` averaged over the masked samples.

    ``eta`` is a scalar or one value per sample. The returned per-sample
    losses exclude the penalty.
    """
    cache = forward_cache(state, batch)
    n = cache["x"].shape[0]
    losses, d_out = per_sample_losses(state, cache["outputs"], labels)
    d_out = d_out / n
    objective = float(np.mean(losses))
    d_feat = None
    if penalty_mask is not None:
        mask = np.asarray(penalty_mask, dtype=bool)
        if mask.shape != (n,):
            raise InvalidInput("penalty mask length must equal the batch size")
        if np.any(eta) and mask.any():
            if np.any(np.asarray(eta) < 0):
                raise InvalidInput("eta must be non-negative")
            d_feat = penalty_feature_grad(cache["features"], cache["pre"], mask, eta, state.spec.kind)
            objective += penalty_value(cache["features"], mask, eta)
    if not np.isfinite(objective):
        raise NumericalFailure("non-finite loss")
    grads = backward(state, cache, d_out, d_feat)
    return BatchGradients(grads, losses, objective, {"cache": cache})


def sgd_step(state, grads, lr):
    if lr <= 0:
        raise InvalidInput("lr must be positive")
    g = grads.grads if isinstance(grads, BatchGradients) else grads
    params = {k: v - lr * g[k] if k in g else v.copy() for k, v in state.params.items()}
    return ModelState(state.spec, params, state.step + 1)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(state, path, extra=None):
    """``meta`` text + one little-endian float64 blob per tensor + ``manifest``."""
    os.makedirs(path, exist_ok=True)
    s = state.spec
    meta = {"kind": s.kind, "input_dim": s.input_dim, "feature_dim": s.feature_dim, "classes": s.classes, "step": state.step}
    meta.update(extra or {})
    with open(os.path.join(path, "meta"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in meta.items())
    manifest = {}
    for name in sorted(state.params):
        arr = state.params[name]
        arr.astype("<f8").tofile(os.path.join(path, f"{name}.f64le"))
        manifest[name] = list(arr.shape)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)


def load_checkpoint(path):
    from .datasets import read_meta

    meta = read_meta(os.path.join(path, "meta"))
    spec = ModelSpec(meta["kind"], int(meta["input_dim"]), int(meta["feature_dim"]), int(meta["classes"]))
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    params = {
        name: np.fromfile(os.path.join(path, f"{name}.f64le"), dtype="<f8").reshape(shape)
        for name, shape in manifest.items()
    }
    return ModelState(spec, params, int(meta["step"])), meta
