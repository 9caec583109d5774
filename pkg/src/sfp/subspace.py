"""Linear-subspace model of biased training.

Rows of the model weights ``W`` (m x d), of the ID data and of the OOD data
span the model space ``R``, the ID space ``S`` and the OOD space ``U``. Their
orthonormal bases ``E``, ``F`` and ``G`` turn the undirected gradient flow into
a sum of terms weighted by the singular values of the feature projections
``E.T @ F`` and ``E.T @ G``. Everything here is a pure function of numpy
arrays; weights are stored row-major with ``W.T = E @ r``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import DegenerateDenominator, Diverged, InvalidInput
from .numerics import as_matrix


@dataclass(frozen=True)
class DomainSpec:
    x_id: np.ndarray
    x_ood: np.ndarray
    p_i: float
    p_o: float

    def __post_init__(self):
        x_id = as_matrix(self.x_id, "x_id")
        x_ood = as_matrix(self.x_ood, "x_ood")
        if x_id.shape[1] != x_ood.shape[1]:
            raise InvalidInput("x_id and x_ood must share the feature dimension")
        if not (0.0 < self.p_i < 1.0 and 0.0 < self.p_o < 1.0):
            raise InvalidInput("proportions must lie in (0, 1)")
        if abs(self.p_i + self.p_o - 1.0) > 1e-12:
            raise InvalidInput("p_i + p_o must equal 1")
        object.__setattr__(self, "x_id", x_id)
        object.__setattr__(self, "x_ood", x_ood)

    @property
    def d(self):
        return self.x_id.shape[1]

    @classmethod
    def from_counts(cls, x_id, x_ood):
        """Proportions taken from the sample counts."""
        p, q = len(x_id), len(x_ood)
        return cls(x_id, x_ood, p / (p + q), q / (p + q))


@dataclass(frozen=True)
class SubspaceBases:
    e: np.ndarray
    f: np.ndarray
    g: np.ndarray
    z: np.ndarray  # x_id == (f @ z).T
    v: np.ndarray  # x_ood == (g @ v).T


@dataclass(frozen=True)
class ProjectionDecomposition:
    """Singular structure of the ID and OOD feature projections.

    ``xi`` is a complete orthonormal basis of the model space taken from the
    SVD of ``E.T @ F``; the OOD projection is expanded in the same basis, so
    ``E.T @ F == xi @ diag(sigma_id) @ lambda_.T`` and
    ``E.T @ G == xi @ diag(sigma_ood) @ gamma.T`` hold exactly. When both
    projections share left singular vectors, ``gamma`` holds the right singular
    vectors of ``E.T @ G`` and ``sigma_ood`` its singular values.
    """

    sigma_ef: np.ndarray
    sigma_eg: np.ndarray
    sigma_fg: np.ndarray
    xi: np.ndarray
    lambda_: np.ndarray
    gamma: np.ndarray
    sigma_id: np.ndarray
    sigma_ood: np.ndarray
    bases: SubspaceBases = field(repr=False)

    @property
    def m(self):
        return self.xi.shape[0]


@dataclass(frozen=True)
class ModelCoordinates:
    """ID coordinates ``a`` (dim S x out), OOD coordinates ``b`` (dim U x out)
    and the combined model-space coordinate ``r = p_i E'F a + p_o E'G b``."""

    a: np.ndarray
    b: np.ndarray
    r: np.ndarray


def build_bases(w, spec):
    w = as_matrix(w, "w")
    if w.shape[1] != spec.d:
        raise InvalidInput("w and the data must share the feature dimension")
    e = numerics.orthonormal_row_basis(w)
    f = numerics.orthonormal_row_basis(spec.x_id)
    g = numerics.orthonormal_row_basis(spec.x_ood)
    return SubspaceBases(e=e, f=f, g=g, z=f.T @ spec.x_id.T, v=g.T @ spec.x_ood.T)


def projection_spectrum(b):
    m = b.e.shape[1]
    ef = numerics.svd(b.e.T @ b.f)
    k = ef.k
    xi = numerics.complete_orthonormal(ef.U, m)
    sigma_id = np.zeros(m)
    sigma_id[:k] = ef.S[:m]
    lam = np.zeros((b.f.shape[1], m))
    lam[:, : min(k, m)] = ef.V[:, :m]

    h = b.g.T @ b.e @ xi  # column i is G'E xi_i
    sigma_ood = np.linalg.norm(h, axis=0)
    gamma = np.zeros_like(h)
    live = sigma_ood > 1e-14
    gamma[:, live] = h[:, live] / sigma_ood[live]

    return ProjectionDecomposition(
        sigma_ef=ef.S,
        sigma_eg=numerics.svd(b.e.T @ b.g).S,
        sigma_fg=numerics.svd(b.f.T @ b.g).S,
        xi=xi,
        lambda_=lam,
        gamma=gamma,
        sigma_id=sigma_id,
        sigma_ood=sigma_ood,
        bases=b,
    )


def decompose(w, spec):
    """``build_bases`` followed by ``projection_spectrum``."""
    return projection_spectrum(build_bases(w, spec))


# -- losses and gradients ---------------------------------------------------


def task_loss(w_t, x, w_star):
    """Mean over samples of ``||x W_t' - x W*'||^2``."""
    x = as_matrix(x, "x")
    resid = x @ (as_matrix(w_t) - as_matrix(w_star)).T
    return float(np.mean(np.sum(resid * resid, axis=1)))


def brute_gradient(w_t, x, w_star):
    """Gradient of ``task_loss`` with respect to ``w_t``."""
    x = as_matrix(x, "x")
    delta = as_matrix(w_t) - as_matrix(w_star)
    return 2.0 * (x @ delta.T).T @ x / x.shape[0]


def domain_losses(w, spec, w_star):
    return task_loss(w, spec.x_id, w_star), task_loss(w, spec.x_ood, w_star)


def mixture_loss(w, spec, w_star):
    lid, lood = domain_losses(w, spec, w_star)
    return spec.p_i * lid + spec.p_o * lood


def mixture_gradient(w, spec, w_star):
    """Gradient of ``p_i L_id + p_o L_ood``; equals ``brute_gradient`` on the
    pooled data whenever the proportions match the sample counts."""
    return spec.p_i * brute_gradient(w, spec.x_id, w_star) + spec.p_o * brute_gradient(
        w, spec.x_ood, w_star
    )


def coordinates(a, b, decomp, spec):
    """Assemble ModelCoordinates; ``r`` is rebuilt from the spectra."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d = decomp
    r = d.xi @ (
        spec.p_i * (d.sigma_id[:, None] * (d.lambda_.T @ a))
        + spec.p_o * (d.sigma_ood[:, None] * (d.gamma.T @ b))
    )
    return ModelCoordinates(a=a, b=b, r=r)


def extract_coordinates(w, decomp, spec):
    """Minimum-norm ``(a, b)`` with ``E r`` equal to the data-visible part of ``w``."""
    bs = decomp.bases
    w = as_matrix(w)
    system = np.hstack([spec.p_i * bs.e.T @ bs.f, spec.p_o * bs.e.T @ bs.g])
    sol, *_ = np.linalg.lstsq(system, bs.e.T @ w.T, rcond=None)
    ds = bs.f.shape[1]
    return coordinates(sol[:ds], sol[ds:], decomp, spec)


def weights_from(coords, decomp):
    """``W = (E r)'``."""
    return (decomp.bases.e @ coords.r).T


def _moments(decomp, spec):
    bs = decomp.bases
    m_id = bs.z @ spec.x_id / spec.x_id.shape[0]
    m_ood = bs.v @ spec.x_ood / spec.x_ood.shape[0]
    return m_id, m_ood


def linear_gradient(coords, decomp, spec):
    """Four-term linear form of the undirected gradient.

    ``coords`` carries the deviations ``a_t - a*`` and ``b_t - b*``. The data
    factors are the per-sample second moments expressed in the ``F`` and ``G``
    coordinates, which makes the form agree with ``mixture_gradient``.
    """
    d = decomp
    if coords.a.shape[0] != d.lambda_.shape[0] or coords.b.shape[0] != d.gamma.shape[0]:
        raise InvalidInput("coordinates do not match the decomposition dimensions")
    m_id, m_ood = _moments(d, spec)
    alpha = d.lambda_.T @ coords.a
    beta = d.gamma.T @ coords.b
    s_id, s_ood = d.sigma_id[:, None], d.sigma_ood[:, None]
    lam_id, gam_ood = d.lambda_.T @ m_id, d.gamma.T @ m_ood
    pi, po = spec.p_i, spec.p_o
    out = (
        pi * pi * (s_id**2 * alpha).T @ lam_id
        + po * po * (s_ood**2 * beta).T @ gam_ood
        + pi * po * ((s_id * s_ood * alpha).T @ gam_ood + (s_ood * s_id * beta).T @ lam_id)
    )
    return 2.0 * out


# -- undirected training ----------------------------------------------------


@dataclass
class Trajectory:
    weights: np.ndarray  # (steps + 1, out, d)
    loss_id: np.ndarray
    loss_ood: np.ndarray
    lr: float
    model_basis: np.ndarray = None

    @property
    def final(self):
        return self.weights[-1]

    @property
    def gap(self):
        return self.loss_ood - self.loss_id

    @property
    def epsilon(self):
        """Initial ID/OOD loss difference."""
        return float(self.gap[0])

    def to_csv(self, path, predicted=None):
        predicted = np.full(len(self.gap), np.nan) if predicted is None else np.broadcast_to(
            predicted, self.gap.shape
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "loss_id", "loss_ood", "gap_measured", "gap_predicted"])
            for t in range(len(self.gap)):
                out.writerow(
                    [t, repr(self.loss_id[t]), repr(self.loss_ood[t]), repr(self.gap[t]), repr(float(predicted[t]))]
                )


def simulate_undirected_training(spec, w0, w_star, lr, steps, model_basis=None):
    """Plain gradient descent on ``p_i L_id + p_o L_ood``.

    With ``model_basis`` (d x k, orthonormal columns) the weights are confined
    to its span: the gradient is projected before every step.
    """
    if lr <= 0:
        raise InvalidInput("lr must be positive")
    w = as_matrix(w0).copy()
    w_star = as_matrix(w_star)
    proj = None if model_basis is None else model_basis @ model_basis.T
    if proj is not None:
        w = w @ proj
    weights = [w.copy()]
    lid, lood = domain_losses(w, spec, w_star)
    loss_id, loss_ood = [lid], [lood]
    limit = 1e12 * max(1.0, lid, lood)
    for t in range(1, steps + 1):
        g = mixture_gradient(w, spec, w_star)
        if proj is not None:
            g = g @ proj
        w = w - lr * g
        lid, lood = domain_losses(w, spec, w_star)
        if not (np.isfinite(lid) and np.isfinite(lood)) or max(lid, lood) > limit:
            raise Diverged(t)
        weights.append(w.copy())
        loss_id.append(lid)
        loss_ood.append(lood)
    return Trajectory(np.array(weights), np.array(loss_id), np.array(loss_ood), lr, model_basis)


def accumulate_linear_form(traj, spec, w_star):
    """Replay a trajectory through the linear form.

    At each step the model space is rebuilt from ``W_t`` and ``W*``, the
    deviations are re-expressed as coordinates and the four-term gradient is
    accumulated. Returns the reconstructed final weights and the per-step
    coordinates.
    """
    w_star = as_matrix(w_star)
    w = traj.weights[0].copy()
    proj = None if traj.model_basis is None else traj.model_basis @ traj.model_basis.T
    recorded = []
    for w_t in traj.weights[:-1]:
        delta = w_t - w_star
        if not np.any(delta):
            recorded.append(None)
            continue
        decomp = decompose(np.vstack([w_t, w_star]), spec)
        coords = extract_coordinates(delta, decomp, spec)
        recorded.append(coords)
        g = linear_gradient(coords, decomp, spec)
        if proj is not None:
            g = g @ proj
        w = w - traj.lr * g
    return w, recorded


# -- closed-form predictions -------------------------------------------------


def directional_gap(decomp, spec):
    """Predicted speed gap ``2 (p_i^2 s_EF^2 - p_o^2 s_EG^2)`` on leading values."""
    s_ef = decomp.sigma_ef[0] if decomp.sigma_ef.size else 0.0
    s_eg = decomp.sigma_eg[0] if decomp.sigma_eg.size else 0.0
    return 2.0 * (spec.p_i**2 * s_ef**2 - spec.p_o**2 * s_eg**2)


def measure_directional_gap(decomp, spec, w_star, h=1e-3):
    """Measured learning-speed gap along the leading ID and OOD projections.

    The weights are perturbed away from ``w_star`` along the model-space image
    of the leading ID (resp. OOD) feature direction; the change of the
    undirected gradient, read back along that feature direction, is the speed
    of learning there. Uses only ``mixture_gradient``.
    """
    bs = decomp.bases
    w_star = as_matrix(w_star)

    def speed(proj_basis, p, data_basis):
        t = numerics.svd(bs.e.T @ data_basis)
        dw = np.zeros_like(w_star)
        dw[0] = p * t.S[0] * (bs.e @ t.U[:, 0])
        probe = np.zeros_like(w_star)
        probe[0] = data_basis @ t.V[:, 0]
        g_plus = mixture_gradient(w_star + h * dw, spec, w_star)
        g_minus = mixture_gradient(w_star - h * dw, spec, w_star)
        return float(np.sum((g_plus - g_minus) * probe) / (2 * h))

    return speed(bs.e, spec.p_i, bs.f) - speed(bs.e, spec.p_o, bs.g)


def loss_gap_prediction(spec, sigma_fg_max, epsilon):
    if not -1e-12 <= sigma_fg_max <= 1 + 1e-12:
        raise InvalidInput("sigma_fg_max must lie in [0, 1]")
    return (spec.p_i**2 - spec.p_o**2) * (1.0 - sigma_fg_max) + epsilon


# -- projection space and truncation ------------------------------------------


def _id_terms(decomp, spec, upto):
    d = decomp
    return spec.p_i * (d.xi[:, :upto] * d.sigma_id[:upto]) @ (d.bases.f @ d.lambda_[:, :upto]).T


def _ood_terms(decomp, spec):
    d = decomp
    return spec.p_o * (d.xi * d.sigma_ood) @ (d.bases.g @ d.gamma).T


def projection_space(decomp, spec):
    """``sum_i p_i s_i xi_i lambda_i' + p_o s~_i xi_i gamma_i'`` in ambient coordinates (m x d)."""
    return _id_terms(decomp, spec, decomp.m) + _ood_terms(decomp, spec)


def sparse_projection(decomp, spec, theta):
    """Projection space with the ID term truncated to its top ``theta`` triples."""
    if not 1 <= theta <= decomp.m:
        raise InvalidInput(f"theta must lie in [1, {decomp.m}]")
    return _id_terms(decomp, spec, theta) + _ood_terms(decomp, spec)


def model_response(projection, x):
    """Response of every model direction to every sample (m x n)."""
    return as_matrix(projection) @ as_matrix(x).T


def response_deviation_ratio(decomp, spec, theta):
    """Ratio of the ID/OOD response deviation before and after truncation.

    The OOD term is evaluated on the OOD samples and the ID term on the ID
    samples. The two sets are disjoint, so the deviation is a signed response
    over their union; it is reduced to a scalar by its Frobenius norm with each
    block averaged over its own sample count.
    """
    if not 1 <= theta <= decomp.m:
        raise InvalidInput(f"theta must lie in [1, {decomp.m}]")
    ood = model_response(_ood_terms(decomp, spec), spec.x_ood)
    ood_sq = np.sum(ood * ood) / spec.x_ood.shape[0]
    n_id = spec.x_id.shape[0]
    full = model_response(_id_terms(decomp, spec, decomp.m), spec.x_id)
    sparse = model_response(_id_terms(decomp, spec, theta), spec.x_id)
    num = np.sqrt(ood_sq + np.sum(full * full) / n_id)
    den = np.sqrt(ood_sq + np.sum(sparse * sparse) / n_id)
    if den < 1e-12:
        raise DegenerateDenominator("sparse response deviation vanishes")
    return float(num / den)


# -- constructed instances -----------------------------------------------------


def _orthonormal(rng, d, k):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q[:, :k]


def _whitened(rng, k, n, scale):
    # Rows of z are orthogonal with (z @ z.T) / n == scale * I.
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return np.sqrt(scale * n) * q.T


def aligned_instance(seed, d=12, k=3, n=40, outputs=2, orthogonal=False, whiten=False):
    """Instance whose ID and OOD projections share left singular vectors.

    Returns ``(spec, w_t, w_star, model_basis)``. With ``orthogonal`` the ID
    and OOD spaces are orthogonal and touch disjoint model directions;
    otherwise each pair ``f_i, g_i`` leans on the same model direction.
    """
    rng = np.random.default_rng(seed)
    need = 4 * k if orthogonal else 3 * k
    if d < need:
        raise InvalidInput(f"need d >= {need} for this construction")
    q = _orthonormal(rng, d, d)
    cos_f = rng.uniform(0.2, 1.0, k)
    cos_g = rng.uniform(0.2, 1.0, k)
    if orthogonal:
        e = q[:, : 2 * k]
        u, w = q[:, 2 * k : 3 * k], q[:, 3 * k : 4 * k]
        f = e[:, :k] * cos_f + u * np.sqrt(1 - cos_f**2)
        g = e[:, k:] * cos_g + w * np.sqrt(1 - cos_g**2)
    else:
        e = q[:, :k]
        u, w = q[:, k : 2 * k], q[:, 2 * k : 3 * k]
        f = e * cos_f + u * np.sqrt(1 - cos_f**2)
        g = e * cos_g + w * np.sqrt(1 - cos_g**2)
    p_i = float(rng.uniform(0.55, 0.95))
    if whiten:
        z, v = _whitened(rng, k, n, 1.0), _whitened(rng, k, n, 1.0)
    else:
        z, v = rng.standard_normal((k, n)), rng.standard_normal((k, n))
    spec = DomainSpec((f @ z).T, (g @ v).T, p_i, 1.0 - p_i)
    w_t = rng.standard_normal((outputs, e.shape[1])) @ e.T
    w_star = rng.standard_normal((outputs, e.shape[1])) @ e.T
    return spec, w_t, w_star, e


def mirrored_instance(p_i, cosines, n=64, seed=0, scale=0.5):
    """ID/OOD pair related by a reflection, with a model space fixed by it.

    Pair ``i`` has ID direction ``f_i`` and OOD direction ``g_i`` at principal
    cosine ``cosines[i]``. The model space is spanned by the bisectors
    ``u_i`` and the target reads the antisymmetric directions, so ID and OOD
    pull the model in opposite directions. Data are whitened with per-sample
    second moment ``scale`` in every coordinate.

    Returns ``(spec, w_star, model_basis)``.
    """
    cosines = np.atleast_1d(np.asarray(cosines, dtype=np.float64))
    k = cosines.size
    rng = np.random.default_rng(seed)
    q = _orthonormal(rng, 2 * k, 2 * k)
    u, w = q[:, :k], q[:, k:]
    half = np.arccos(np.clip(cosines, -1.0, 1.0)) / 2.0
    f = u * np.cos(half) + w * np.sin(half)
    g = u * np.cos(half) - w * np.sin(half)
    z = _whitened(rng, k, n, scale)
    w_star = (w @ np.full(k, 1.0 / np.sqrt(k)))[None, :]
    spec = DomainSpec((f @ z).T, (g @ z).T, p_i, 1.0 - p_i)
    return spec, w_star, u
