"""All five preconditioner families descending the same estimation criterion.

The criterion c(P) = E[dg^T P dg + dt^T P^{-1} dt] is evaluated on a frozen
set of noisy probe pairs from a 12-dimensional indefinite quadratic. Every
family descends it with multiplicative, norm-normalized steps on its own
matrix group; the sparser the family, the fewer parameters and the higher
the floor it can reach. The parameter counts follow the (M, N) = (3, 4)
matricization used by the Kronecker-structured families.
"""

import numpy as np

from psgdkit import (
    DensePrecond,
    DiagPrecond,
    KronPrecond,
    ScanPrecond,
    SpluPrecond,
    TangentPair,
    estimation_criterion,
)

rng = np.random.default_rng(3)
a = rng.standard_normal((12, 12))
h = 0.5 * (a + a.T) + np.diag(np.linspace(2.0, -2.0, 12))

pairs = []
for _ in range(256):
    dt = rng.standard_normal(12)
    pairs.append(TangentPair(dt, h @ dt + 0.05 * rng.standard_normal(12)))

families = {
    "dense": DensePrecond(12),
    "splu(r=3)": SpluPrecond(12, 3),
    "kron": KronPrecond(3, 4),
    "scan": ScanPrecond(3, 4),
    "diag": DiagPrecond(12),
}

print(f"{'family':<10} {'params':>6} {'c start':>9} {'c after 30 passes':>18}")
for name, p in families.items():
    start = estimation_criterion(p, pairs)
    for _ in range(30):
        for pair in pairs:
            p.update(pair, 0.05)
    end = estimation_criterion(p, pairs)
    print(f"{name:<10} {p.param_count():>6} {start:>9.2f} {end:>18.2f}")
