"""Pure-Python Frisch-Newton interior point kernel.

Solves the dual of the check-loss problem

    max_a  y'a   s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1

with a Mehrotra predictor-corrector on the bounded LP. The regression
coefficients are minus the equality multipliers.  The compiled kernel in
``_fnb.pyx`` implements the same iteration step for step.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

STEP_SCALE = 0.99995

# status codes shared with the compiled kernel
CONVERGED = 0
MAX_ITER = 1
BREAKDOWN = 2


def _max_step(v, dv):
    neg = dv < 0.0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def fnb_solve(X, y, tau, eps=1e-8, max_iter=200):
    """Run the interior point iteration.

    Returns ``(coef, iterations, gap, status)``; ``status`` is one of
    CONVERGED, MAX_ITER, BREAKDOWN.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, m = X.shape
    c = -y
    b = (1.0 - tau) * X.sum(axis=0)

    x = np.full(n, 1.0 - tau)
    s = np.full(n, tau)
    try:
        yd = cho_solve(cho_factor(X.T @ X), X.T @ c)
    except LinAlgError:
        return np.zeros(m), 0, np.inf, BREAKDOWN
    rd = c - X @ yd
    shift = 0.1 * float(np.mean(np.abs(rd))) + 1e-10
    z = np.maximum(rd, 0.0) + shift
    w = np.maximum(-rd, 0.0) + shift

    gap = float(x @ z + s @ w)
    for it in range(1, max_iter + 1):
        rp = b - X.T @ x
        rd = c - X @ yd - z + w
        mu = gap / (2.0 * n)
        theta = 1.0 / (z / x + w / s)
        try:
            fac = cho_factor((X * theta[:, None]).T @ X)
        except LinAlgError:
            return -yd, it, gap, BREAKDOWN

        def direction(rc_z, rc_w):
            g = rd - rc_z / x + rc_w / s
            dy = cho_solve(fac, rp + X.T @ (theta * g))
            dx = theta * (X @ dy - g)
            dz = (rc_z - z * dx) / x
            dw = (rc_w + w * dx) / s
            return dx, dy, dz, dw

        # predictor
        dx, dy, dz, dw = direction(-x * z, -s * w)
        ap = min(_max_step(x, dx), _max_step(s, -dx))
        ad = min(_max_step(z, dz), _max_step(w, dw))
        mu_aff = (float((x + ap * dx) @ (z + ad * dz))
                  + float((s - ap * dx) @ (w + ad * dw))) / (2.0 * n)
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dy, dz, dw = direction(sigma * mu - x * z - dx * dz,
                                   sigma * mu - s * w + dx * dw)
        ap = min(1.0, STEP_SCALE * min(_max_step(x, dx), _max_step(s, -dx)))
        ad = min(1.0, STEP_SCALE * min(_max_step(z, dz), _max_step(w, dw)))

        x = x + ap * dx
        s = s - ap * dx
        yd = yd + ad * dy
        z = z + ad * dz
        w = w + ad * dw

        gap = float(x @ z + s @ w)
        primal = float(c @ x)
        if gap <= eps * max(1.0, abs(primal)):
            return -yd, it, gap, CONVERGED
        if not np.isfinite(gap):
            return -yd, it, gap, BREAKDOWN
    return -yd, max_iter, gap, MAX_ITER
