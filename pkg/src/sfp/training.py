"""Spurious-feature-targeted training, baselines, pruning and evaluation.

Every method runs through one minibatch SGD loop. Per batch the trainer
computes per-sample task losses, estimates the ID/OOD subspace overlap from
the loss spread, derives the threshold, flags low-loss samples as
spurious-dominated and (for SFP variants) adds a feature-sparsity penalty on
them. Baselines only change how per-sample losses are combined.
"""

import csv
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics
from .datasets import concat_environments
from .errors import DegenerateDenominator, DegenerateProportions, Diverged, InsufficientFeatures, InvalidInput, NumericalFailure
from .models import ModelSpec, ModelState, backward, forward, forward_cache, init_model, penalty_feature_grad, penalty_value, per_sample_losses, softmax

METHODS = ("erm", "sfp", "irm", "rex", "dro", "mrm", "sfp+irm", "sfp+rex", "sfp+dro")
IDENT_MODES = ("below_margin", "within_margin")
ETA_MODES = ("two_sqrt_loss", "fixed")


@dataclass(frozen=True)
class LossStats:
    mean: float
    max: float
    min: float
    prev_mean: float = None

    def __post_init__(self):
        if not self.min <= self.mean + 1e-12 or not self.mean <= self.max + 1e-12:
            raise InvalidInput("loss statistics must satisfy min <= mean <= max")

    @classmethod
    def of(cls, losses, prev_mean=None):
        losses = np.asarray(losses, dtype=np.float64)
        return cls(float(losses.mean()), float(losses.max()), float(losses.min()), prev_mean)


@dataclass(frozen=True)
class SfpConfig:
    p_i: float = 0.8
    p_o: float = 0.2
    lr: float = 0.01
    epochs: int = 60
    batch_size: int = 64
    tau: float = 0.95
    ident_mode: str = "below_margin"
    eta_mode: str = "two_sqrt_loss"
    eta_fixed: float = 0.0
    seed: int = 0
    hidden: int = 256
    prune: bool = False
    irm_lambda: float = 1.0
    rex_beta: float = 1.0
    penalty_warmup: int = 0
    mrm_l1: float = 1e-3
    mrm_init: float = 3.0

    def __post_init__(self):
        if abs(self.p_i + self.p_o - 1.0) > 1e-9 or not (0 < self.p_i < 1 and 0 < self.p_o < 1):
            raise InvalidInput("p_i + p_o must equal 1 with both in (0, 1)")
        if not 0 < self.tau <= 1:
            raise InvalidInput("tau must lie in (0, 1]")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidInput("lr, epochs and batch_size must be positive")
        if self.ident_mode not in IDENT_MODES:
            raise InvalidInput(f"ident_mode must be one of {IDENT_MODES}")
        if self.eta_mode not in ETA_MODES:
            raise InvalidInput(f"eta_mode must be one of {ETA_MODES}")
        if self.eta_fixed < 0:
            raise InvalidInput("eta must be non-negative")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


TRACE_COLUMNS = ("epoch", "loss_id", "loss_ood", "sigma_hat", "delta", "identified_frac", "train_acc", "test_acc")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    failed_at: int = None  # batch index of a numerical failure, if any

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(TRACE_COLUMNS)
            for r in self.records:
                out.writerow([r["epoch"]] + [repr(float(r[c])) for c in TRACE_COLUMNS[1:]])


@dataclass
class SparseModel:
    base: ModelState
    basis: np.ndarray  # m x theta, orthonormal columns
    theta: int
    state: ModelState  # base with the classifier-facing weights projected
    deviation_ratio: float = None


# -- identification -------------------------------------------------------------


def estimate_sigma(stats, p_i, p_o):
    """Overlap estimate ``clamp(1 - (L_max - L_min) / (p_i^2 - p_o^2), 0, 1)``."""
    denom = p_i * p_i - p_o * p_o
    if denom <= 0:
        raise DegenerateProportions("identification needs p_i > p_o")
    return float(np.clip(1.0 - (stats.max - stats.min) / denom, 0.0, 1.0))


def threshold_delta(sigma, p_i, p_o):
    if not -1e-12 <= sigma <= 1 + 1e-12:
        raise InvalidInput("sigma must lie in [0, 1]")
    return max(0.0, p_o * (p_i - p_o) * (1.0 - sigma))


def identify_spurious(losses, prev_mean, delta, mode="below_margin"):
    losses = np.asarray(losses, dtype=np.float64)
    if prev_mean is None:
        return np.zeros(losses.shape, dtype=bool)
    if mode == "below_margin":
        return losses <= prev_mean - delta
    if mode == "within_margin":
        return losses - prev_mean < delta
    raise InvalidInput(f"unknown identification mode {mode!r}")


def eta_value(loss, cfg):
    """Per-sample penalty weight; ``2 sqrt(loss)`` saturates the error bound."""
    loss = np.asarray(loss, dtype=np.float64)
    if np.any(loss < 0):
        raise InvalidInput("loss must be non-negative")
    if cfg.eta_mode == "fixed":
        return np.full(loss.shape, cfg.eta_fixed) if loss.ndim else float(cfg.eta_fixed)
    eta = 2.0 * np.sqrt(loss)
    return eta if loss.ndim else float(eta)


# -- objectives -----------------------------------------------------------------


def _env_risks(losses, env_idx, n_envs):
    present = [e for e in range(n_envs) if np.any(env_idx == e)]
    risks = np.array([losses[env_idx == e].mean() for e in present])
    return present, risks


def _risk_weights(method, losses, env_idx, n_envs, cfg, anneal):
    """Per-sample weights whose dot with the loss gradients gives the objective gradient."""
    n = len(losses)
    base = method.split("+")[-1]
    if base in ("erm", "sfp", "mrm"):
        return np.full(n, 1.0 / n), float(losses.mean())
    present, risks = _env_risks(losses, env_idx, n_envs)
    counts = np.array([np.sum(env_idx == e) for e in present])
    k = len(present)
    if base == "dro":
        dr = np.zeros(k)
        dr[int(np.argmax(risks))] = 1.0
        obj = float(risks.max())
    elif base == "rex":
        beta = cfg.rex_beta * anneal
        dr = 1.0 / k + beta * 2.0 * (risks - risks.mean()) / k
        obj = float(risks.mean() + beta * risks.var())
    else:  # irm: mean risk here, the gradient penalty is added separately
        dr = np.full(k, 1.0 / k)
        obj = float(risks.mean())
    w = np.zeros(n)
    for e, d, c in zip(present, dr, counts):
        w[env_idx == e] = d / c
    return w, obj


def _irm_penalty(kind, outputs, y, env_idx, n_envs, lam):
    """IRMv1 dummy-scale penalty ``lam * mean_e (dR_e/ds at s=1)^2`` and its output gradient."""
    d_out = np.zeros_like(outputs)
    total = 0.0
    present = [e for e in range(n_envs) if np.any(env_idx == e)]
    k = len(present)
    for e in present:
        sel = env_idx == e
        z = outputs[sel]
        ne = len(z)
        if kind == "linear":
            t = np.asarray(y, dtype=np.float64)[sel].reshape(z.shape)
            g = np.sum(2.0 * (z - t) * z) / ne
            dg = 2.0 * (2.0 * z - t) / ne
        else:
            p = softmax(z)
            onehot = np.zeros_like(p)
            onehot[np.arange(ne), np.asarray(y)[sel]] = 1.0
            r = p - onehot
            g = np.sum(r * z) / ne
            pz = np.sum(p * z, axis=1, keepdims=True)
            dg = (r + p * (z - pz)) / ne
        total += lam * g * g / k
        d_out[sel] = 2.0 * lam * g * dg / k
    return total, d_out


def _check_finite(value, step):
    if not np.isfinite(value) or abs(value) > 1e12:
        raise Diverged(step)


# -- main loop ------------------------------------------------------------------


def _spec_for(env, cfg):
    if env.targets is not None:
        return ModelSpec("linear", env.d, env.targets.shape[1])
    return ModelSpec("mlp", env.d, cfg.hidden, env.classes)


def _masked_state(state, mrm, rng):
    """Sample a Bernoulli mask on the feature weights (MRM)."""
    prob = 1.0 / (1.0 + np.exp(-mrm))
    draw = (rng.random(prob.shape) < prob).astype(np.float64)
    params = dict(state.params)
    params["w"] = state.params["w"] * draw
    return ModelState(state.spec, params, state.step), prob, draw


def _batch_update(state, work, cache, losses, d_loss, y, env_idx, n_envs, mask, eta, method, cfg, epoch, mrm):
    anneal = 1.0 if epoch >= cfg.penalty_warmup else 0.0
    weights, objective = _risk_weights(method, losses, env_idx, n_envs, cfg, anneal)
    d_out = weights[:, None] * d_loss
    if method.endswith("irm"):
        lam = cfg.irm_lambda * anneal
        if lam > 0:
            pen, d_pen = _irm_penalty(state.spec.kind, cache["outputs"], y, env_idx, n_envs, lam)
            objective += pen
            d_out = d_out + d_pen
    d_feat = None
    if method.startswith("sfp") and mask.any() and np.any(eta[mask]):
        d_feat = penalty_feature_grad(cache["features"], cache["pre"], mask, eta, state.spec.kind)
        objective += penalty_value(cache["features"], mask, eta)
    grads = backward(work, cache, d_out, d_feat)
    if mrm is not None:
        logit, prob, draw = mrm
        g_eff = grads["w"]
        grads["w"] = g_eff * draw
        g_logit = (g_eff * state.params["w"] + cfg.mrm_l1 / prob.size) * prob * (1 - prob)
        mrm = logit - cfg.lr * g_logit
    params = {k: v - cfg.lr * grads[k] for k, v in state.params.items()}
    return ModelState(state.spec, params, state.step + 1), objective, mrm


def _per_sample(state, env):
    _, out = forward(state, env.features)
    losses, _ = per_sample_losses(state, out, env.y)
    return losses, out


def accuracy_of(state, outputs, env):
    if state.spec.kind == "linear":
        return float(np.mean((outputs[:, 0] > 0) == (env.labels == 1)))
    return float(np.mean(np.argmax(outputs, axis=1) == env.labels))


def evaluate(model, env):
    """``(accuracy, mean task loss)`` of a model or pruned model on ``env``."""
    state = model.state if isinstance(model, SparseModel) else model
    if env.d != state.spec.input_dim:
        raise InvalidInput(f"environment has d={env.d}, model expects {state.spec.input_dim}")
    losses, out = _per_sample(state, env)
    return accuracy_of(state, out, env), float(np.mean(losses))


def sfp_epoch(state, batches, cfg, carry, method="sfp", n_envs=1, epoch=0, mrm=None, rng=None, sink=None):
    """One pass over ``batches`` (list of ``(x, y, env_idx)``).

    ``carry`` holds the previous epoch's loss statistics. Returns
    ``(state, stats, record, mrm)``; ``record`` carries the epoch means of the
    overlap estimate, threshold and identified fraction. When ``sink`` is a
    list, the feature rows of the flagged samples are appended to it.
    """
    all_losses, sigmas, deltas = [], [], []
    flagged = 0
    for b, (x, y, env_idx) in enumerate(batches):
        if mrm is None:
            work, masking = state, None
        else:
            work, prob, draw = _masked_state(state, mrm, rng)
            masking = (mrm, prob, draw)
        cache = forward_cache(work, x)
        losses, d_loss = per_sample_losses(work, cache["outputs"], y)
        stats = LossStats.of(losses, carry.mean if carry is not None else None)
        try:
            sigma = estimate_sigma(stats, cfg.p_i, cfg.p_o)
            delta = threshold_delta(sigma, cfg.p_i, cfg.p_o)
            mask = identify_spurious(losses, stats.prev_mean, delta, cfg.ident_mode)
        except DegenerateProportions:
            sigma, delta, mask = np.nan, 0.0, np.zeros(len(losses), dtype=bool)
        eta = eta_value(losses, cfg)
        if sink is not None and mask.any():
            sink.append(cache["features"][mask])
        try:
            state, objective, mrm = _batch_update(
                state, work, cache, losses, d_loss, y, env_idx, n_envs, mask, eta, method, cfg, epoch, masking
            )
        except (FloatingPointError, NumericalFailure) as exc:
            raise Diverged(b, f"numerical failure in batch {b}: {exc}") from exc
        _check_finite(objective, b)
        all_losses.append(losses)
        sigmas.append(sigma)
        deltas.append(delta)
        flagged += int(mask.sum())
    losses = np.concatenate(all_losses)
    stats = LossStats.of(losses, carry.mean if carry is not None else None)
    record = {
        "sigma_hat": float(np.mean(sigmas)),
        "delta": float(np.mean(deltas)),
        "identified_frac": flagged / len(losses),
    }
    return state, stats, record, mrm


def _batches(x, y, env_idx, batch_size, rng):
    order = rng.permutation(len(x))
    return [
        (x[idx], y[idx], env_idx[idx])
        for idx in (order[s : s + batch_size] for s in range(0, len(x), batch_size))
    ]


def train(method, cfg, envs, test_env=None, init_state=None):
    """Train ``method`` on the environments; returns ``(model, trace)``.

    With ``cfg.prune`` set, SFP variants are pruned with the features of
    the samples identified during the final epoch. A numerical failure raises
    Diverged carrying the partial trace as ``.trace``.
    """
    method = method.lower()
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}; choose from {METHODS}")
    if not envs:
        raise InvalidInput("need at least one training environment")
    merged = concat_environments(list(envs))
    env_idx = np.concatenate([np.full(e.n, i) for i, e in enumerate(envs)])
    x, y = merged.features, merged.y
    spec = _spec_for(merged, cfg)
    state = init_state.copy() if init_state is not None else init_model(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    mask_rng = np.random.default_rng([cfg.seed, 2])
    mrm = np.full(state.params["w"].shape, cfg.mrm_init) if method == "mrm" else None

    pruning = cfg.prune and method.startswith("sfp")
    init_losses, _ = _per_sample(state, merged)
    carry = LossStats.of(init_losses)
    trace = TrainTrace()
    sink = None
    for epoch in range(cfg.epochs):
        batches = _batches(x, y, env_idx, cfg.batch_size, rng)
        if pruning and epoch == cfg.epochs - 1:
            sink = []
        try:
            with np.errstate(over="raise", invalid="raise"):
                state, carry, record, mrm = sfp_epoch(
                    state, batches, cfg, carry, method, len(envs), epoch, mrm, mask_rng, sink
                )
        except Diverged as exc:
            trace.failed_at = exc.step
            exc.trace = trace
            raise
        trace.records.append(_epoch_record(epoch, state, merged, test_env, record, mrm))

    if mrm is not None:
        params = dict(state.params)
        params["w"] = state.params["w"] * (mrm > 0)
        state = ModelState(state.spec, params, state.step)
    model = state
    if pruning:
        feats = np.vstack(sink) if sink else np.zeros((0, state.spec.feature_dim))
        model = prune_model(state, feats, cfg.tau, merged)
    return model, trace


def _epoch_record(epoch, state, merged, test_env, record, mrm):
    if mrm is not None:
        params = dict(state.params)
        params["w"] = state.params["w"] * (mrm > 0)
        state = ModelState(state.spec, params, state.step)
    losses, out = _per_sample(state, merged)
    ident = merged.id_mask
    rec = {
        "epoch": epoch + 1,
        "loss_id": float(losses[ident].mean()) if ident.any() else np.nan,
        "loss_ood": float(losses[~ident].mean()) if (~ident).any() else np.nan,
        "train_acc": accuracy_of(state, out, merged),
        "test_acc": evaluate(state, test_env)[0] if test_env is not None else np.nan,
    }
    rec.update(record)
    return rec


# -- pruning --------------------------------------------------------------------


def project_state(state, basis):
    """Model whose classifier sees only the features inside ``basis``."""
    proj = basis @ basis.T
    params = dict(state.params)
    if state.spec.kind == "linear":
        params["w"] = proj @ state.params["w"]
    else:
        params["head"] = state.params["head"] @ proj
    return ModelState(state.spec, params, state.step)


def feature_deviation_ratio(state, basis, env):
    """Response deviation of ID vs OOD samples before and after projection."""
    feats, _ = forward(state, env.features)
    kept = feats @ basis @ basis.T
    ident = env.id_mask

    def dev(f):
        total = 0.0
        for sel in (ident, ~ident):
            if sel.any():
                total += np.sum(f[sel] ** 2) / sel.sum()
        return np.sqrt(total)

    den = dev(kept)
    if den < 1e-12:
        raise DegenerateDenominator("pruned feature response vanishes")
    return float(dev(feats) / den)


def prune_model(state, identified, tau, env=None):
    """Keep the leading feature directions of the identified samples.

    ``identified`` holds feature rows (N x m) with ``N >= m``. The kept rank is
    the smallest one carrying a ``tau`` share of their energy.
    """
    feats = numerics.as_matrix(identified, "identified features")
    m = state.spec.feature_dim
    if feats.shape[0] < m:
        raise InsufficientFeatures(f"need at least {m} identified feature rows, got {feats.shape[0]}")
    if feats.shape[1] != m:
        raise InvalidInput(f"feature rows must have {m} columns")
    d = numerics.svd(feats)
    if d.S[0] <= 0:
        raise InsufficientFeatures("identified features are all zero")
    # tau == 1 keeps every direction, dead units included.
    theta = m if tau >= 1.0 else numerics.energy_rank(d.S, tau)
    basis = d.V[:, :theta]
    pruned = state if theta == m else project_state(state, basis)
    ratio = feature_deviation_ratio(state, basis, env) if env is not None and theta < m else 1.0
    return SparseModel(state, basis, theta, pruned, ratio)


def config_dict(cfg):
    return asdict(cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
