import numpy as np
import pytest

import stepalign.autodiff as ad


def finite_diff_check(build_loss, arrays, eps=1e-5, tol=1e-4, floor=1e-8, coords=None, rng=None):
    """Compare analytic gradients of `build_loss(arrays) -> (tape, leaves, loss)`
    against central finite differences for every (or sampled) coordinate.

    Returns the worst relative error seen.
    """
    tape, leaves, loss = build_loss(arrays)
    grads = ad.backward(tape, loss, leaves)
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if coords is None:
            idx = range(flat.size)
        else:
            idx = (rng or np.random.default_rng(0)).choice(
                flat.size, size=min(coords, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            _, _, plus = build_loss(arrays)
            flat[i] = orig - eps
            _, _, minus = build_loss(arrays)
            flat[i] = orig
            numeric = (float(plus.data) - float(minus.data)) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[i])
            rel = abs(numeric - analytic) / max(floor, abs(numeric), abs(analytic))
            worst = max(worst, rel)
            assert rel <= tol, f"{name}[{i}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
