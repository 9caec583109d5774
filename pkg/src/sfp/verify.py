"""Property checks for the linear theory and the SFP penalty.

Each check builds its own seeded instances and returns a CheckResult with
what was measured, what the closed form predicts and whether the pass rule
held. ``run_checks`` is what ``sfp verify`` calls.
"""

from dataclasses import dataclass, field

import numpy as np

from . import subspace as ss
from .datasets import gen_linear_task
from .training import SfpConfig, train

CHECKS = ("linear_form", "speed_gap", "loss_gap", "truncation", "penalty", "loss_tracking")

# Synthetic linear benchmark shared by the paired SFP/ERM checks.
BENCHMARK = dict(d_spurious=2, d_unknown=2, d_invariant=2, p_i=0.8, p_o=0.2, n=1000, noise_std=0.1)
BENCHMARK_TRAIN = dict(lr=0.02, epochs=10, batch_size=50)


@dataclass
class CheckResult:
    name: str
    passed: bool
    seeds: int
    measured: dict = field(default_factory=dict)
    predicted: dict = field(default_factory=dict)
    rule: str = ""

    def as_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "seeds": self.seeds,
            "rule": self.rule,
            "measured": _plain(self.measured),
            "predicted": _plain(self.predicted),
        }


def _plain(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.floating, np.integer, np.bool_)):
            v = v.item()
        elif isinstance(v, (list, tuple)):
            v = [x.item() if hasattr(x, "item") else x for x in v]
        out[k] = v
    return out


def check_linear_form(seeds=100, tol=1e-6):
    """Four-term linear form against the brute gradient on aligned instances."""
    worst = 0.0
    for seed in range(seeds):
        spec, w_t, w_star, _ = ss.aligned_instance(seed, d=16, k=3)
        decomp = ss.decompose(np.vstack([w_t, w_star]), spec)
        coords = ss.extract_coordinates(w_t - w_star, decomp, spec)
        lin = ss.linear_gradient(coords, decomp, spec)
        brute = ss.mixture_gradient(w_t, spec, w_star)
        worst = max(worst, float(np.linalg.norm(lin - brute) / np.linalg.norm(brute)))
    return CheckResult("linear_form", worst <= tol, seeds, {"max_rel_error": worst}, {"max_rel_error": 0.0}, f"max relative error <= {tol:g}")


def check_speed_gap(seeds=100, min_sign=0.95, rel_tol=0.2):
    """Sign agreement on orthogonal instances, magnitude on whitened ones."""
    agree, worst = 0, 0.0
    for seed in range(seeds):
        spec, _, w_star, e = ss.aligned_instance(seed, orthogonal=True)
        decomp = ss.decompose(e.T, spec)
        agree += int(np.sign(ss.directional_gap(decomp, spec)) == np.sign(ss.measure_directional_gap(decomp, spec, w_star)))
        spec, _, w_star, e = ss.aligned_instance(seed, orthogonal=True, whiten=True)
        decomp = ss.decompose(e.T, spec)
        pred = ss.directional_gap(decomp, spec)
        meas = ss.measure_directional_gap(decomp, spec, w_star)
        worst = max(worst, abs(meas - pred) / abs(pred))
    need = int(np.ceil(min_sign * seeds))
    return CheckResult(
        "speed_gap",
        agree >= need and worst <= rel_tol,
        seeds,
        {"sign_agreements": agree, "max_rel_error": worst},
        {"sign_agreements": seeds, "max_rel_error": 0.0},
        f"sign agrees in >= {need}/{seeds}; whitened magnitude within {rel_tol:.0%}",
    )


def check_loss_gap(p_grid=(0.5, 0.6, 0.7, 0.8, 0.9), cosine=0.3, lr=0.5, steps=400, tol=1e-6, seed=0):
    """Converged loss gap over a proportion grid, plus the identical-subspace case."""
    gaps, eps, preds, same = [], [], [], []
    for p_i in p_grid:
        spec, w_star, basis = ss.mirrored_instance(p_i, [cosine], seed=seed)
        traj = ss.simulate_undirected_training(spec, np.zeros_like(w_star), w_star, lr, steps, model_basis=basis)
        gaps.append(float(traj.gap[-1]))
        eps.append(traj.epsilon)
        sigma = float(ss.decompose(basis.T, spec).sigma_fg[0])
        preds.append(ss.loss_gap_prediction(spec, sigma, traj.epsilon))
        spec1, w1, b1 = ss.mirrored_instance(p_i, [1.0], seed=seed)
        t1 = ss.simulate_undirected_training(spec1, np.zeros_like(w1), w1, lr, steps, model_basis=b1)
        same.append(float(t1.gap[-1] - t1.epsilon))
    gaps = np.array(gaps)
    half = list(p_grid).index(0.5) if 0.5 in p_grid else None
    biased = gaps[[i for i, p in enumerate(p_grid) if p > 0.5]]
    ok = bool(np.all(biased >= 0) and np.all(np.diff(biased) > 0))
    if half is not None:
        ok = ok and gaps[half] <= eps[half] + tol
    ok = ok and max(same) <= tol
    return CheckResult(
        "loss_gap",
        ok,
        len(p_grid),
        {"p_i": list(p_grid), "gap": gaps, "epsilon": eps, "gap_minus_eps_sigma1": same},
        {"gap": preds},
        "gap >= 0 and strictly increasing for p_i > 0.5; gap <= eps + 1e-6 at p_i = 0.5 and at sigma_FG = 1",
    )


def _random_spec(rng, d, p, q):
    x_id = rng.standard_normal((p, d)) @ rng.standard_normal((d, d))
    x_ood = rng.standard_normal((q, d))
    p_i = float(rng.uniform(0.55, 0.95))
    return ss.DomainSpec(x_id, x_ood, p_i, 1.0 - p_i)


def check_truncation(seeds=100, tol=1e-9):
    """Truncating the ID projection never increases the response deviation."""
    worst, best, count = np.inf, 0.0, 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(4, 10))
        spec = _random_spec(rng, d, int(rng.integers(2, 8)), int(rng.integers(1, 5)))
        w = rng.standard_normal((int(rng.integers(2, d + 1)), d))
        decomp = ss.decompose(w, spec)
        for theta in range(1, decomp.m):
            ratio = ss.response_deviation_ratio(decomp, spec, theta)
            worst, best = min(worst, ratio), max(best, ratio)
            count += 1
    measured = {"min_ratio": worst, "max_ratio": best, "evaluations": count}
    return CheckResult("truncation", worst >= 1 - tol, seeds, measured, {"min_ratio": 1.0}, f"ratio >= 1 - {tol:g} for every theta < m")


def benchmark_pair(seed, **overrides):
    """Paired ERM and SFP runs on the synthetic linear benchmark."""
    params = dict(BENCHMARK, **overrides)
    task, env, test = gen_linear_task(seed=seed, **params)
    cfg = SfpConfig(p_i=params["p_i"], p_o=params["p_o"], seed=seed, **BENCHMARK_TRAIN)
    out = {}
    for method in ("erm", "sfp"):
        model, trace = train(method, cfg, [env], test)
        w = model.params["w"]
        out[method] = {
            "trace": trace,
            "spurious": float(np.linalg.norm(w @ task.f_prime)),
            "invariant": float(np.linalg.norm(w @ task.in_block)),
        }
    return out


def check_penalty(seeds=20, min_pass=18, tol=1e-3, pairs=None):
    """SFP lowers the spurious response and keeps the invariant one."""
    pairs = pairs or [benchmark_pair(s) for s in range(seeds)]
    ok = [
        p["sfp"]["spurious"] < p["erm"]["spurious"] and p["sfp"]["invariant"] >= p["erm"]["invariant"] - tol
        for p in pairs
    ]
    measured = {
        "passing_seeds": int(sum(ok)),
        "spurious_reduced": int(sum(p["sfp"]["spurious"] < p["erm"]["spurious"] for p in pairs)),
        "invariant_kept": int(sum(p["sfp"]["invariant"] >= p["erm"]["invariant"] - tol for p in pairs)),
        "min_invariant_change": float(min(p["sfp"]["invariant"] - p["erm"]["invariant"] for p in pairs)),
    }
    return CheckResult("penalty", sum(ok) >= min_pass, len(pairs), measured, {"passing_seeds": len(pairs)}, f">= {min_pass}/{len(pairs)} seeds")


def check_loss_tracking(seeds=20, min_frac=0.9, pairs=None):
    """ERM keeps ID loss below OOD loss; SFP ends with the smaller gap."""
    pairs = pairs or [benchmark_pair(s) for s in range(seeds)]
    below = [bool(np.all(p["erm"]["trace"].column("loss_id") < p["erm"]["trace"].column("loss_ood"))) for p in pairs]

    def final_gap(tr):
        return abs(tr.column("loss_id")[-1] - tr.column("loss_ood")[-1])

    smaller = [final_gap(p["sfp"]["trace"]) < final_gap(p["erm"]["trace"]) for p in pairs]
    need = int(np.ceil(min_frac * len(pairs)))
    return CheckResult(
        "loss_tracking",
        all(below) and sum(smaller) >= need,
        len(pairs),
        {"erm_id_below_ood": int(sum(below)), "sfp_gap_smaller": int(sum(smaller))},
        {"erm_id_below_ood": len(pairs), "sfp_gap_smaller": len(pairs)},
        f"ERM ID < OOD every epoch in all seeds; SFP gap smaller in >= {need}/{len(pairs)}",
    )


def run_checks(only=None, seeds=None):
    """Run the selected checks; ``seeds`` widens the randomized ones."""
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; choose from {CHECKS}")
    results = []
    pairs = None
    for name in names:
        if name in ("penalty", "loss_tracking"):
            if pairs is None:
                pairs = [benchmark_pair(s) for s in range(seeds or 20)]
            results.append(check_penalty(pairs=pairs) if name == "penalty" else check_loss_tracking(pairs=pairs))
        elif name == "loss_gap":
            results.append(check_loss_gap())
        else:
            fn = {"linear_form": check_linear_form, "speed_gap": check_speed_gap, "truncation": check_truncation}[name]
            results.append(fn(seeds=seeds or 100))
    return results
