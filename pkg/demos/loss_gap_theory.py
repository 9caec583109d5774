"""How the ID/OOD loss gap of undirected training grows with the ID share.

Builds mirrored ID/OOD pairs at a fixed principal cosine, runs plain gradient
descent inside the model space and compares the converged gap with the
closed-form prediction. Then checks the four-term gradient on one instance.
"""

import numpy as np

from sfp import subspace as ss

COSINE = 0.3

print(f"principal cosine between ID and OOD spaces: {COSINE}")
print(f"{'p_i':>5} {'measured':>10} {'predicted':>10}")
for p_i in (0.5, 0.6, 0.7, 0.8, 0.9):
    spec, w_star, basis = ss.mirrored_instance(p_i, [COSINE], seed=0)
    traj = ss.simulate_undirected_training(spec, np.zeros_like(w_star), w_star, lr=0.5, steps=400, model_basis=basis)
    sigma = ss.decompose(basis.T, spec).sigma_fg[0]
    print(f"{p_i:5.1f} {traj.gap[-1]:10.4f} {ss.loss_gap_prediction(spec, sigma, traj.epsilon):10.4f}")

# identical subspaces leave nothing to exploit
spec, w_star, basis = ss.mirrored_instance(0.9, [1.0], seed=0)
traj = ss.simulate_undirected_training(spec, np.zeros_like(w_star), w_star, lr=0.5, steps=400, model_basis=basis)
print(f"cosine 1, p_i 0.9: gap {traj.gap[-1]:.2e}")

spec, w_t, w_star, _ = ss.aligned_instance(seed=3, d=16, k=4)
decomp = ss.decompose(np.vstack([w_t, w_star]), spec)
coords = ss.extract_coordinates(w_t - w_star, decomp, spec)
lin = ss.linear_gradient(coords, decomp, spec)
brute = ss.mixture_gradient(w_t, spec, w_star)
print(f"four-term gradient vs direct gradient: relative error {np.linalg.norm(lin - brute) / np.linalg.norm(brute):.1e}")

# learning-speed gap on an instance with orthogonal ID/OOD spaces
spec, _, w_star, e = ss.aligned_instance(seed=5, orthogonal=True, whiten=True)
decomp = ss.decompose(e.T, spec)
print(
    f"directional gap: predicted {ss.directional_gap(decomp, spec):.4f}, "
    f"measured {ss.measure_directional_gap(decomp, spec, w_star):.4f}"
)
