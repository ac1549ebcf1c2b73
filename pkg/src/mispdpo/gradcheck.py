"""Central finite-difference checks for the analytic gradients."""

import numpy as np

DEFAULT_STEP = 1e-5
# Coordinates whose true derivative is below this magnitude are compared on an
# absolute scale; a relative error is meaningless there.
SCALE_FLOOR = 1e-6


def central_difference(f, x, index, step=DEFAULT_STEP):
    """Central difference of scalar ``f`` at array ``x`` along one flat index."""
    flat = x.reshape(-1)
    orig = flat[index]
    flat[index] = orig + step
    fp = f()
    flat[index] = orig - step
    fm = f()
    flat[index] = orig
    return (fp - fm) / (2.0 * step)


def relative_error(analytic, numeric, floor=SCALE_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_arrays(f, arrays, grads, n_samples=None, rng=None, step=DEFAULT_STEP):
    """Compare analytic ``grads`` to central differences of ``f`` over ``arrays``.

    ``f`` closes over ``arrays`` and is re-evaluated after each in-place
    perturbation. When ``n_samples`` is given, that many (array, index)
    coordinates are drawn without replacement; otherwise every coordinate is
    checked.

    Returns:
        Array of per-coordinate relative errors.
    """
    coords = [(k, i) for k, arr in enumerate(arrays) for i in range(arr.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    errs = []
    for k, i in coords:
        num = central_difference(f, arrays[k], i, step)
        errs.append(relative_error(grads[k].reshape(-1)[i], num))
    return np.array(errs)
