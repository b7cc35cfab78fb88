"""Central-finite-difference gradient comparison used across the test suite."""

import numpy as np

H = 1e-4
REL_TOL = 1e-3
# Absolute floor on the comparison denominator: gradients that are analytically
# zero read as FD cancellation noise, which would otherwise blow up the ratio.
FLOOR = 1e-6


def max_rel_err(f, x, grad, h=H, indices=None):
    """Worst relative error between ``grad`` and central differences of ``f``.

    ``f`` is a zero-argument callable re-evaluating the scalar loss; it must
    see mutations of ``x`` (pass the same array object the closure reads).
    ``indices`` restricts the check to a subset of flat positions.
    """
    flat = x.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        fd = (up - dn) / (2.0 * h)
        err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), FLOOR)
        worst = max(worst, err)
    return worst
