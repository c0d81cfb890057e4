"""Limited-memory BFGS with a strong-Wolfe line search (bracket + cubic zoom)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iters: int
    line_search_failed: bool = False
    fun_history: list = field(default_factory=list)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolant on [a, b]; falls back to bisection."""
    with np.errstate(all="ignore"):
        d1 = da + db - 3.0 * (fa - fb) / (a - b)
        disc = d1 * d1 - da * db
        if disc < 0 or not np.isfinite(disc):
            return 0.5 * (a + b)
        d2 = np.sqrt(disc) * np.sign(b - a)
        denom = db - da + 2.0 * d2
        if denom == 0 or not np.isfinite(denom):
            return 0.5 * (a + b)
        t = b - (b - a) * (db + d2 - d1) / denom
    lo, hi = min(a, b), max(a, b)
    span = hi - lo
    if not np.isfinite(t) or t <= lo + 0.1 * span or t >= hi - 0.1 * span:
        return 0.5 * (a + b)
    return t


def _zoom(phi, a_lo, f_lo, d_lo, a_hi, f_hi, d_hi, f0, d0, c1, c2, max_evals):
    for _ in range(max_evals):
        a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        f, d = phi(a)
        if f > f0 + c1 * a * d0 or f >= f_lo:
            a_hi, f_hi, d_hi = a, f, d
        else:
            if abs(d) <= -c2 * d0:
                return a, f, d, True
            if d * (a_hi - a_lo) >= 0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, d_lo = a, f, d
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    return a_lo, f_lo, d_lo, False


def strong_wolfe(phi, f0, d0, a_init=1.0, c1=1e-4, c2=0.9, a_max=1e10, max_evals=25):
    """Find a step satisfying the strong Wolfe conditions along a descent direction.

    phi(a) must return (value, directional derivative) at step a. Returns
    (step, value, derivative, ok); on failure the best decreasing step seen is
    returned with ok=False (step 0 if nothing decreased).
    """
    if d0 >= 0:
        return 0.0, f0, d0, False
    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = a_init
    best = (0.0, f0, d0)
    for i in range(max_evals):
        f, d = phi(a)
        if np.isfinite(f) and f < best[1]:
            best = (a, f, d)
        if (not np.isfinite(f)) or f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            a, f, d, ok = _zoom(phi, a_prev, f_prev, d_prev, a, f, d,
                                f0, d0, c1, c2, max_evals)
            if ok:
                return a, f, d, True
            break
        if abs(d) <= -c2 * d0:
            return a, f, d, True
        if d >= 0:
            a, f, d, ok = _zoom(phi, a, f, d, a_prev, f_prev, d_prev,
                                f0, d0, c1, c2, max_evals)
            if ok:
                return a, f, d, True
            break
        a_prev, f_prev, d_prev = a, f, d
        a = min(2.0 * a, a_max)
        if a >= a_max:
            break
    a, f, d = best
    return a, f, d, False


def minimize(fun_grad, x0: np.ndarray, max_iters: int, history: int = 10,
             c1: float = 1e-4, c2: float = 0.9, grad_tol: float = 0.0,
             max_ls_evals: int = 25) -> LbfgsResult:
    """Run at most max_iters L-BFGS iterations (one full-batch step each).

    Stops early on a vanished gradient or a failed line search; accepted steps
    never increase the objective.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_grad(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    result = LbfgsResult(x, f, float(np.linalg.norm(g)), 0, fun_history=[f])
    for it in range(max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol or gnorm == 0.0:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0 / gnorm
        q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        d0 = float(g @ d)
        if d0 >= 0:  # safeguard: fall back to steepest descent
            d = -g / gnorm
            d0 = float(g @ d)

        cache = {}

        def phi(a, _d=d, _cache=cache):
            xa = x + a * _d
            fa, ga = fun_grad(xa)
            _cache[a] = (xa, ga)
            return fa, float(ga @ _d)

        step, f_new, _, ok = strong_wolfe(phi, f, d0, c1=c1, c2=c2,
                                          max_evals=max_ls_evals)
        if step == 0.0:
            result.line_search_failed = True
            break
        x_new, g_new = cache[step]
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        result.x, result.fun = x, f
        result.grad_norm = float(np.linalg.norm(g))
        result.n_iters = it + 1
        result.fun_history.append(f)
        if not ok:
            result.line_search_failed = True
            break
    result.x, result.fun = x, f
    result.grad_norm = float(np.linalg.norm(g))
    return result
