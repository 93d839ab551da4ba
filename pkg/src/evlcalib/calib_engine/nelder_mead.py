"""Nelder-Mead simplex minimization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class NMResult:
    x: np.ndarray
    fun: float
    evals: int
    converged: bool


def minimize(f: Callable[[np.ndarray], float], x0, step, tol: float = 1e-6,
             max_evals: int = 400, reflect: float = 1.0, expand: float = 2.0,
             contract: float = 0.5, shrink: float = 0.5) -> NMResult:
    """Minimize ``f`` from an axis-aligned simplex around ``x0``.

    Stops when the spread of simplex values drops below ``tol`` or after
    ``max_evals`` evaluations.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (n,))
    simplex = np.vstack([x0] + [x0 + step[i] * np.eye(n)[i] for i in range(n)])
    values = np.array([f(v) for v in simplex])
    evals = n + 1
    converged = False

    while True:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        if values[-1] - values[0] < tol:
            converged = True
            break
        if evals >= max_evals:
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + reflect * (centroid - worst)
        fr = f(xr)
        evals += 1
        if fr < values[0]:
            xe = centroid + expand * (xr - centroid)
            fe = f(xe)
            evals += 1
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + contract * (xr - centroid)
        else:
            xc = centroid + contract * (worst - centroid)
        fc = f(xc)
        evals += 1
        if fc < min(fr, values[-1]):
            simplex[-1], values[-1] = xc, fc
            continue
        best = simplex[0]
        for i in range(1, n + 1):
            simplex[i] = best + shrink * (simplex[i] - best)
            values[i] = f(simplex[i])
        evals += n

    return NMResult(simplex[0].copy(), float(values[0]), evals, converged)
