"""Biased training environments.

Two generators: full-colored-mnist (digits composited in white over one of
ten solid backgrounds, the background tied to the class for biased samples)
and a synthetic linear task with spurious, unknown and invariant feature
blocks. Environments persist to a plain directory format.
"""

import colorsys
import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, InconsistentFiles, InsufficientData, InvalidInput
from .subspace import DomainSpec

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
FOREGROUND_THRESHOLD = 0.5

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


# -- IDX ingestion -----------------------------------------------------------


def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path):
    """Read any IDX file into an ndarray; returns ``(magic, array)``."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: not an IDX file")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return magic, np.frombuffer(payload[:expected], dtype=dtype).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte array in IDX format (big-endian dims)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    with _open(path, "wb") as fh:
        fh.write(header + a.tobytes())


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair as ``(n x 784 floats in [0, 1], labels)``."""
    magic, images = read_idx(images_path)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{images_path}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    magic, labels = read_idx(labels_path)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{labels_path}: label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
    if images.shape[0] != labels.shape[0]:
        raise InconsistentFiles(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n = images.shape[0]
    flat = images.reshape(n, int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


# -- environments -------------------------------------------------------------


@dataclass(frozen=True)
class Palette:
    colors: np.ndarray  # (10, 3) in [0, 1]

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=np.float64)
        if c.shape != (10, 3) or c.min() < 0 or c.max() > 1:
            raise InvalidInput("palette must be ten RGB triples in [0, 1]")
        if len({tuple(row) for row in np.round(c, 12)}) != 10:
            raise InvalidInput("palette colors must be pairwise distinct")
        object.__setattr__(self, "colors", c)

    @classmethod
    def default(cls):
        return cls(np.array([colorsys.hsv_to_rgb(k / 10, 1.0, 1.0) for k in range(10)]))


@dataclass
class Environment:
    features: np.ndarray
    labels: np.ndarray
    bias_ratio: float
    id_mask: np.ndarray
    targets: np.ndarray = None  # regression targets (linear task only)
    kind: str = "colored"
    seed: int = 0
    palette: Palette = None
    classes: int = 10

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.id_mask = np.asarray(self.id_mask, dtype=bool)
        if len(self.labels) != len(self.features) or len(self.id_mask) != len(self.features):
            raise InvalidInput("features, labels and id_mask must have equal length")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def y(self):
        """What the model is trained against: targets if present, else labels."""
        return self.labels if self.targets is None else self.targets

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            id_mask=self.id_mask[idx],
            targets=None if self.targets is None else self.targets[idx],
        )


def _check_ratio(r):
    if not 0.0 <= r <= 1.0:
        raise InvalidInput(f"bias ratio {r} outside [0, 1]")


def _composite(gray, colors):
    """White digits over per-sample background colors; returns n x 2352."""
    n = gray.shape[0]
    fg = (gray > FOREGROUND_THRESHOLD)[:, :, None]
    rgb = np.where(fg, 1.0, colors[:, None, :])
    return rgb.reshape(n, -1)


def _draw_backgrounds(labels, bias_ratio, n_colors, rng):
    n = len(labels)
    n_biased = int(round(bias_ratio * n))
    biased = np.zeros(n, dtype=bool)
    biased[rng.permutation(n)[:n_biased]] = True
    color = rng.integers(0, n_colors, size=n)
    color[biased] = labels[biased]
    return color, biased


def build_colored_mnist(images, labels, bias_ratio, palette=None, seed=0):
    """Colorize grayscale digits (n x 784 in [0, 1]).

    Exactly ``round(bias_ratio * n)`` samples get the background of their
    class; the rest draw a background uniformly from the palette.
    """
    _check_ratio(bias_ratio)
    palette = palette or Palette.default()
    images = np.asarray(images, dtype=np.float64)
    images = images.reshape(len(images), int(np.prod(images.shape[1:])))
    if images.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
        raise InvalidInput("images must be 28 x 28")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() > 9):
        raise InvalidInput("labels must lie in [0, 10)")
    rng = np.random.default_rng(seed)
    color, biased = _draw_backgrounds(labels, bias_ratio, 10, rng)
    feats = _composite(images, palette.colors[color]) if len(labels) else np.zeros((0, 784 * 3))
    return Environment(feats, labels, bias_ratio, biased, kind="colored", seed=seed, palette=palette)


def foreground_of(features):
    """Recover the binary digit mask (n x 784) from composited features."""
    rgb = np.asarray(features).reshape(len(features), -1, 3)
    return np.all(rgb == 1.0, axis=2).astype(np.float64)


def background_of(features):
    """Background color per sample (n x 3), read off a non-foreground pixel."""
    rgb = np.asarray(features).reshape(len(features), -1, 3)
    bg = ~np.all(rgb == 1.0, axis=2)
    first = np.argmax(bg, axis=1)
    return rgb[np.arange(len(rgb)), first]


@dataclass(frozen=True)
class SyntheticLinearTask:
    w_star: np.ndarray
    f_prime: np.ndarray
    g_prime: np.ndarray
    in_block: np.ndarray
    spec: DomainSpec
    a_star: np.ndarray
    b_star: np.ndarray
    spurious_map: np.ndarray = field(repr=False, default=None)


def _linear_samples(rng, task_blocks, n, in_domain, noise_std, a, b_map):
    f_prime, g_prime, in_block = task_blocks
    c = rng.standard_normal((n, in_block.shape[1]))
    signal = c @ a.T
    y = signal + noise_std * rng.standard_normal(signal.shape)
    x = c @ in_block.T
    if in_domain:
        if f_prime.shape[1]:
            x = x + (signal @ b_map.T) @ f_prime.T
    elif g_prime.shape[1]:
        x = x + rng.standard_normal((n, g_prime.shape[1])) @ g_prime.T
    return x, y


def gen_linear_task(
    d_spurious,
    d_unknown,
    d_invariant,
    p_i,
    p_o,
    n,
    noise_std,
    seed,
    d=None,
    spurious_scale=2.0,
):
    """Two-domain linear regression task.

    Targets are ``A c + noise`` where ``c`` are the invariant coordinates. ID
    samples add a spurious block that copies the clean signal ``A c`` with
    gain ``spurious_scale``: it predicts the target on ID data but adds nothing
    beyond the invariant block. OOD samples add independent unknown features.
    Returns ``(task, train, test_ood)``.
    """
    if min(d_invariant, 1) < 1 or d_spurious < 0 or d_unknown < 0:
        raise InvalidInput("block dimensions must be non-negative, invariant >= 1")
    if abs(p_i + p_o - 1.0) > 1e-12 or not 0 < p_i < 1:
        raise InvalidInput("p_i + p_o must equal 1 with both positive")
    if n < 10:
        raise InvalidInput("n must be at least 10")
    total = d_spurious + d_unknown + d_invariant
    d = total if d is None else d
    if total > d:
        raise InvalidInput(f"feature blocks need {total} dimensions, ambient has {d}")

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    f_prime = q[:, :d_spurious]
    g_prime = q[:, d_spurious : d_spurious + d_unknown]
    in_block = q[:, d_spurious + d_unknown : total]
    a, _ = np.linalg.qr(rng.standard_normal((d_invariant, d_invariant)))
    outputs = d_invariant
    if d_spurious:
        b_map, _ = np.linalg.qr(rng.standard_normal((max(d_spurious, outputs), max(d_spurious, outputs))))
        b_map = spurious_scale * b_map[:d_spurious, :outputs]
    else:
        b_map = np.zeros((0, outputs))
    w_star = a @ in_block.T
    blocks = (f_prime, g_prime, in_block)

    n_id = int(round(p_i * n))
    x_id, y_id = _linear_samples(rng, blocks, n_id, True, noise_std, a, b_map)
    x_ood, y_ood = _linear_samples(rng, blocks, n - n_id, False, noise_std, a, b_map)
    order = rng.permutation(n)
    x = np.vstack([x_id, x_ood])[order]
    y = np.vstack([y_id, y_ood])[order]
    mask = np.r_[np.ones(n_id, bool), np.zeros(n - n_id, bool)][order]
    train = Environment(x, (y[:, 0] > 0).astype(np.int64), n_id / n, mask, targets=y, kind="linear", seed=seed, classes=2)

    xt, yt = _linear_samples(rng, blocks, n, False, noise_std, a, b_map)
    test = Environment(xt, (yt[:, 0] > 0).astype(np.int64), 0.0, np.zeros(n, bool), targets=yt, kind="linear", seed=seed, classes=2)

    f_basis = np.hstack([f_prime, in_block])
    g_basis = np.hstack([g_prime, in_block])
    spec = DomainSpec(x_id, x_ood, p_i, p_o) if 0 < n_id < n else None
    task = SyntheticLinearTask(
        w_star=w_star,
        f_prime=f_prime,
        g_prime=g_prime,
        in_block=in_block,
        spec=spec,
        a_star=f_basis.T @ w_star.T,
        b_star=g_basis.T @ w_star.T,
        spurious_map=b_map,
    )
    return task, train, test


def split_environments(env, ratios, seed, size=None):
    """Partition ``env`` into disjoint environments with target bias ratios.

    Colored environments keep equal shares of the samples and have their
    backgrounds re-drawn. Linear environments are re-sampled from the ID and
    OOD pools; ``size`` defaults to the largest equal size the pools allow.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise InvalidInput("need at least one ratio")
    for r in ratios:
        _check_ratio(r)
    rng = np.random.default_rng(seed)
    k = len(ratios)

    if env.kind == "colored":
        size = size or env.n // k
        if size * k > env.n or size < 1:
            raise InsufficientData(f"cannot cut {k} environments of {size} from {env.n} samples")
        order = rng.permutation(env.n)
        palette = env.palette or Palette.default()
        gray = foreground_of(env.features)
        out = []
        for i, r in enumerate(ratios):
            idx = order[i * size : (i + 1) * size]
            sub_seed = int(rng.integers(2**63 - 1))
            out.append(build_colored_mnist(gray[idx], env.labels[idx], r, palette, sub_seed))
        return out

    id_pool = rng.permutation(np.flatnonzero(env.id_mask))
    ood_pool = rng.permutation(np.flatnonzero(~env.id_mask))
    need_id = sum(ratios)
    need_ood = k - need_id
    if size is None:
        caps = [env.n // k]
        if need_id > 0:
            caps.append(int(len(id_pool) / need_id))
        if need_ood > 0:
            caps.append(int(len(ood_pool) / need_ood))
        size = min(caps)
    counts = [int(round(r * size)) for r in ratios]
    if size < 1 or sum(counts) > len(id_pool) or sum(size - c for c in counts) > len(ood_pool):
        raise InsufficientData(f"pools of {len(id_pool)} ID / {len(ood_pool)} OOD samples cannot fill {ratios}")
    out, i_pos, o_pos = [], 0, 0
    for r, c in zip(ratios, counts):
        idx = np.r_[id_pool[i_pos : i_pos + c], ood_pool[o_pos : o_pos + size - c]]
        i_pos, o_pos = i_pos + c, o_pos + size - c
        sub = env.subset(rng.permutation(idx))
        sub.bias_ratio = r
        out.append(sub)
    return out


def concat_environments(envs):
    first = envs[0]
    targets = None if first.targets is None else np.vstack([e.targets for e in envs])
    n = sum(e.n for e in envs)
    return replace(
        first,
        features=np.vstack([e.features for e in envs]),
        labels=np.concatenate([e.labels for e in envs]),
        id_mask=np.concatenate([e.id_mask for e in envs]),
        targets=targets,
        bias_ratio=float(sum(e.id_mask.sum() for e in envs) / max(n, 1)),
    )


# -- persistence ----------------------------------------------------------------


def save_environment(env, path):
    """Write ``meta``, ``data.f64le``, ``labels.u8`` and ``idmask.u8`` into ``path``."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "kind": env.kind,
        "n": env.n,
        "d": env.d,
        "bias_ratio": repr(float(env.bias_ratio)),
        "seed": env.seed,
        "classes": env.classes,
        "palette": "" if env.palette is None else ",".join(repr(float(c)) for c in env.palette.colors.ravel()),
    }
    if env.targets is not None:
        meta["targets_dim"] = env.targets.shape[1]
    with open(os.path.join(path, "meta"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in meta.items())
    env.features.astype("<f8").tofile(os.path.join(path, "data.f64le"))
    env.labels.astype(np.uint8).tofile(os.path.join(path, "labels.u8"))
    env.id_mask.astype(np.uint8).tofile(os.path.join(path, "idmask.u8"))
    if env.targets is not None:
        env.targets.astype("<f8").tofile(os.path.join(path, "targets.f64le"))


def read_meta(path):
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    return meta


def load_environment(path):
    meta = read_meta(os.path.join(path, "meta"))
    n, d = int(meta["n"]), int(meta["d"])
    feats = np.fromfile(os.path.join(path, "data.f64le"), dtype="<f8")
    if feats.size != n * d:
        raise FormatError(f"{path}: data.f64le holds {feats.size} values, expected {n * d}")
    labels = np.fromfile(os.path.join(path, "labels.u8"), dtype=np.uint8).astype(np.int64)
    mask = np.fromfile(os.path.join(path, "idmask.u8"), dtype=np.uint8).astype(bool)
    if len(labels) != n or len(mask) != n:
        raise InconsistentFiles(f"{path}: label or mask count differs from n={n}")
    targets = None
    if "targets_dim" in meta:
        targets = np.fromfile(os.path.join(path, "targets.f64le"), dtype="<f8").reshape(n, int(meta["targets_dim"]))
    palette = None
    if meta.get("palette"):
        palette = Palette(np.array([float(v) for v in meta["palette"].split(",")]).reshape(10, 3))
    return Environment(
        feats.reshape(n, d),
        labels,
        float(meta["bias_ratio"]),
        mask,
        targets=targets,
        kind=meta.get("kind", "colored"),
        seed=int(meta.get("seed", 0)),
        palette=palette,
        classes=int(meta.get("classes", 10)),
    )
