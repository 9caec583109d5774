"""Command line entry point: gen-data, train, verify, report.

Every command resolves its configuration as defaults, then an optional flat
``key=value`` file (``--config``), then explicit flags, and writes the resolved
result as ``config`` next to its outputs. ``sfp <command> --config <dir>/config``
therefore reproduces a run. Wall-clock time goes to a separate ``timing``
file so every other output is byte-identical on rerun.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 failed check.
"""

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datasets, models, training, verify
from .errors import Diverged, InvalidInput, SfpError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4

SIMPLIFIED = {"irm", "rex", "dro", "mrm"}


class ConfigError(Exception):
    pass


# -- config files -----------------------------------------------------------------


def read_config(path):
    if os.path.isdir(path):
        path = os.path.join(path, "config")
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    return {k.replace("-", "_"): v for k, v in datasets.read_meta(path).items()}


def write_config(path, values):
    with open(os.path.join(path, "config"), "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key}={_fmt(values[key])}\n")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    try:
        return [float(x) for x in str(v).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {v!r}") from exc


def parse_seeds(v):
    """``"3"``, ``"1..5"`` (inclusive) or ``"1,4,9"``."""
    if isinstance(v, int):
        return [v]
    s = str(v).strip()
    try:
        if ".." in s:
            lo, hi = s.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty seed range {s!r}")
            return list(range(lo, hi + 1))
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed specification {s!r}") from exc


def resolve(args, defaults, known):
    """Merge defaults, the ``--config`` file and explicit flags."""
    values = dict(defaults)
    if getattr(args, "config", None):
        from_file = read_config(args.config)
        unknown = sorted(set(from_file) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(from_file)
    for key in known:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


# -- gen-data -----------------------------------------------------------------------

GEN_DEFAULTS = {
    "task": "colored-mnist",
    "ratios": "0.8,0.6,0.0",
    "seed": "1",
    "out": "data",
    "images": None,
    "labels": None,
    "d_spurious": "2",
    "d_unknown": "2",
    "d_invariant": "2",
    "p_i": "0.8",
    "n": "2000",
    "noise_std": "0.01",
}


def cmd_gen_data(args):
    cfg = resolve(args, GEN_DEFAULTS, GEN_DEFAULTS)
    ratios = _floats(cfg["ratios"])
    if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError(f"ratios must lie in [0, 1], got {cfg['ratios']}")
    seed = parse_seeds(cfg["seed"])
    if len(seed) != 1:
        raise ConfigError("gen-data takes a single seed")
    seed = seed[0]
    task = cfg["task"]
    if task == "colored-mnist":
        if not cfg["images"] or not cfg["labels"]:
            raise ConfigError("colored-mnist needs --images and --labels IDX paths")
        for p in (cfg["images"], cfg["labels"]):
            if not os.path.exists(p):
                raise ConfigError(f"IDX file {p} not found")
        images, labels = datasets.load_idx(cfg["images"], cfg["labels"])
        base = datasets.build_colored_mnist(images, labels, 0.0, seed=seed)
        envs = datasets.split_environments(base, ratios, seed)
    elif task == "linear":
        p_i = float(cfg["p_i"])
        _, train_env, _ = datasets.gen_linear_task(
            int(cfg["d_spurious"]),
            int(cfg["d_unknown"]),
            int(cfg["d_invariant"]),
            p_i,
            1.0 - p_i,
            int(cfg["n"]),
            float(cfg["noise_std"]),
            seed,
        )
        envs = datasets.split_environments(train_env, ratios, seed)
    else:
        raise ConfigError(f"unknown task {task!r}; choose colored-mnist or linear")

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    names = []
    for i, env in enumerate(envs):
        name = f"env{i}"
        datasets.save_environment(env, os.path.join(out, name))
        names.append(name)
    with open(os.path.join(out, "manifest"), "w", encoding="utf-8") as fh:
        fh.write(f"task={task}\nseed={seed}\nratios={_fmt(ratios)}\nenvironments={','.join(names)}\n")
    write_config(out, cfg)
    print(f"wrote {len(envs)} environments to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "method": "sfp",
    "dataset": None,
    "seed": "1",
    "out": "runs",
    "train_envs": None,
    "test_env": None,
    "eta_mode": "two_sqrt_loss",
    "jobs": "1",
}
_CFG_FIELDS = [f for f in training.SfpConfig.field_names() if f not in ("seed", "eta_mode", "eta_fixed")]
TRAIN_KEYS = list(TRAIN_DEFAULTS) + _CFG_FIELDS


def _sfp_config(cfg, seed):
    kw = {}
    defaults = training.SfpConfig()
    for name in _CFG_FIELDS:
        if name not in cfg or cfg[name] is None:
            continue
        cur = getattr(defaults, name)
        raw = cfg[name]
        if isinstance(cur, bool):
            kw[name] = _bool(raw)
        elif isinstance(cur, int):
            kw[name] = int(raw)
        elif isinstance(cur, float):
            kw[name] = float(raw)
        else:
            kw[name] = str(raw)
    mode = str(cfg["eta_mode"])
    if mode.startswith("fixed"):
        _, _, val = mode.partition(":")
        kw["eta_mode"], kw["eta_fixed"] = "fixed", float(val or 0.0)
    else:
        kw["eta_mode"] = mode
    if "p_i" in kw and "p_o" not in kw:
        kw["p_o"] = 1.0 - kw["p_i"]
    return training.SfpConfig(seed=seed, **kw)


def _load_envs(dataset, train_idx, test_idx):
    manifest = datasets.read_meta(os.path.join(dataset, "manifest"))
    names = manifest["environments"].split(",")
    if test_idx is None:
        test_idx = len(names) - 1 if len(names) > 1 else None
    if train_idx is None:
        train_idx = [i for i in range(len(names)) if i != test_idx]
    for i in list(train_idx) + ([test_idx] if test_idx is not None else []):
        if not 0 <= i < len(names):
            raise ConfigError(f"environment index {i} outside 0..{len(names) - 1}")
    envs = [datasets.load_environment(os.path.join(dataset, names[i])) for i in train_idx]
    test = datasets.load_environment(os.path.join(dataset, names[test_idx])) if test_idx is not None else None
    return envs, test


def _run_one(job):
    """One (method, seed) run; returns ``(run_dir, status)``."""
    method, seed, cfg, run_dir = job
    sfp_cfg = _sfp_config(cfg, seed)
    train_idx = None if cfg["train_envs"] in (None, "") else [int(x) for x in str(cfg["train_envs"]).split(",")]
    test_idx = None if cfg["test_env"] in (None, "") else int(cfg["test_env"])
    envs, test = _load_envs(cfg["dataset"], train_idx, test_idx)
    os.makedirs(run_dir, exist_ok=True)
    resolved = dict(cfg, seed=str(seed), method=method, out=os.path.dirname(run_dir))
    resolved.pop("jobs", None)
    write_config(run_dir, resolved)
    start = time.perf_counter()
    status, model, trace = "ok", None, None
    try:
        model, trace = training.train(method, sfp_cfg, envs, test)
    except Diverged as exc:
        status, trace = f"diverged_at_batch_{exc.step}", getattr(exc, "trace", training.TrainTrace())
    elapsed = time.perf_counter() - start
    trace.to_csv(os.path.join(run_dir, "trace.csv"))
    summary = {
        "method": method,
        "seed": seed,
        "dataset": os.path.basename(os.path.normpath(cfg["dataset"])),
        "status": status,
        "train_acc": "nan",
        "test_acc": "nan",
        "theta": "",
        "baseline": "simplified stand-in" if method.split("+")[-1] in SIMPLIFIED else "",
    }
    if model is not None:
        merged = datasets.concat_environments(envs)
        summary["train_acc"] = repr(training.evaluate(model, merged)[0])
        if test is not None:
            summary["test_acc"] = repr(training.evaluate(model, test)[0])
        state = model
        if isinstance(model, training.SparseModel):
            summary["theta"] = model.theta
            summary["deviation_ratio"] = repr(model.deviation_ratio)
            state = model.state
        models.save_checkpoint(state, os.path.join(run_dir, "checkpoint"))
    with open(os.path.join(run_dir, "summary"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in summary.items())
    with open(os.path.join(run_dir, "timing"), "w", encoding="utf-8") as fh:
        fh.write(f"wall_clock_seconds={elapsed:.3f}\n")
    return run_dir, status


def cmd_train(args):
    cfg = resolve(args, TRAIN_DEFAULTS, TRAIN_KEYS)
    if not cfg["dataset"] or not os.path.exists(os.path.join(cfg["dataset"], "manifest")):
        raise ConfigError(f"dataset directory {cfg['dataset']!r} missing or has no manifest")
    method = str(cfg["method"]).lower()
    if method not in training.METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(training.METHODS)}")
    seeds = parse_seeds(cfg["seed"])
    for s in seeds:
        _sfp_config(cfg, s)  # validate before any work starts
    jobs = [(method, s, cfg, os.path.join(cfg["out"], f"{method}-seed{s}")) for s in seeds]
    n_jobs = max(1, int(cfg["jobs"]))
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    failed = False
    for run_dir, status in results:
        print(f"{run_dir}: {status}")
        failed |= status != "ok"
    return EXIT_DIVERGED if failed else EXIT_OK


# -- verify -------------------------------------------------------------------------


VERIFY_DEFAULTS = {"only": "", "seeds": "", "out": None}


def cmd_verify(args):
    cfg = resolve(args, VERIFY_DEFAULTS, VERIFY_DEFAULTS)
    only = [x for x in str(cfg["only"]).split(",") if x]
    try:
        seeds = int(cfg["seeds"]) if cfg["seeds"] else None
    except ValueError as exc:
        raise ConfigError(f"bad seed count {cfg['seeds']!r}") from exc
    try:
        results = verify.run_checks(only or None, seeds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = {"checks": [r.as_dict() for r in results], "passed": all(r.passed for r in results)}
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {json.dumps(r.as_dict()['measured'], sort_keys=True)}")
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "verify.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_config(cfg["out"], {"only": ",".join(only), "seeds": "" if seeds is None else seeds, "out": cfg["out"]})
    return EXIT_OK if report["passed"] else EXIT_CHECK


# -- report ----------------------------------------------------------------------


def _summaries(root):
    found = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "summary" in files:
            found.append(datasets.read_meta(os.path.join(dirpath, "summary")))
    return found


def cmd_report(args):
    rows = []
    for root in args.runs:
        if not os.path.isdir(root):
            raise ConfigError(f"run directory {root} not found")
        rows.extend(_summaries(root))
    if not rows:
        raise ConfigError("no run summaries found")
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["method"]), []).append(r)
    out_rows = []
    for (dataset, method), rs in sorted(groups.items()):
        tr = np.array([float(r["train_acc"]) for r in rs])
        te = np.array([float(r["test_acc"]) for r in rs])
        out_rows.append(
            [method, dataset, len(rs), f"{np.mean(tr):.4f}", f"{np.mean(te):.4f}", f"{np.median(te):.4f}", ",".join(sorted(r["seed"] for r in rs))]
        )
    header = ["method", "dataset", "runs", "train_acc_mean", "test_acc_mean", "test_acc_median", "seeds"]
    out = args.out or "report.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(out_rows)
    w = csv.writer(sys.stdout)
    w.writerow(header)
    w.writerows(out_rows)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sfp", description="Spurious-feature-targeted pruning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build biased environments")
    g.add_argument("--config")
    g.add_argument("--task", choices=["colored-mnist", "linear"])
    g.add_argument("--ratios")
    g.add_argument("--seed")
    g.add_argument("--out")
    g.add_argument("--images", help="IDX image file (colored-mnist)")
    g.add_argument("--labels", help="IDX label file (colored-mnist)")
    for k in ("d_spurious", "d_unknown", "d_invariant", "p_i", "n", "noise_std"):
        g.add_argument("--" + k.replace("_", "-"), dest=k)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method over a seed grid")
    t.add_argument("--config")
    t.add_argument("--method")
    t.add_argument("--dataset")
    t.add_argument("--seed", help="N, A..B or comma list")
    t.add_argument("--out")
    t.add_argument("--train-envs", dest="train_envs", help="comma list of environment indices")
    t.add_argument("--test-env", dest="test_env")
    t.add_argument("--eta-mode", dest="eta_mode", help="two_sqrt_loss or fixed:<value>")
    t.add_argument("--jobs")
    for k in _CFG_FIELDS:
        t.add_argument("--" + k.replace("_", "-"), dest=k)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run the property checks")
    v.add_argument("--config")
    v.add_argument("--only", help=f"comma list from {','.join(verify.CHECKS)}")
    v.add_argument("--seeds")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="aggregate run summaries into a table")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInput, ValueError, SfpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
