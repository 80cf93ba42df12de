"""Discrete residual of a solved field against its PDE."""

from __future__ import annotations

import itertools
from typing import Optional

import numpy as np

from ..model import ProblemSpec
from .grid import ValueField
from .hamiltonian import HamiltonianParams, hamiltonian, hamiltonian_state


def _derivatives(V, idx, h):
    """Central gradient and Hessian of ``V`` at ``idx``; None at an edge."""
    D = len(idx)
    if any(i == 0 or i == V.shape[k] - 1 for k, i in enumerate(idx)):
        return None
    p = np.empty(D)
    Q = np.empty((D, D))
    c = V[idx]
    for k in range(D):
        up = list(idx)
        dn = list(idx)
        up[k] += 1
        dn[k] -= 1
        p[k] = (V[tuple(up)] - V[tuple(dn)]) / (2 * h[k])
        Q[k, k] = (V[tuple(up)] - 2 * c + V[tuple(dn)]) / h[k] ** 2
    for k, l in itertools.combinations(range(D), 2):
        vals = []
        for sk, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            j = list(idx)
            j[k] += sk
            j[l] += sl
            vals.append(V[tuple(j)])
        Q[k, l] = Q[l, k] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h[k] * h[l])
    return p, Q


def _stencil_unmasked(mask, idx):
    box = tuple(slice(i - 1, i + 2) for i in idx)
    return not np.any(mask[box])


def viscosity_residual(field: ValueField, spec: ProblemSpec, params: HamiltonianParams, node) -> Optional[float]:
    """``-D_t V + rho V + H(x, DV, D^2 V)`` at ``node = (n, i1, ..., [j])``.

    The time difference is forward, ``(V[n+1] - V[n]) / h_t``, and the space
    derivatives are central.  Returns ``None`` when the node is on the last
    slice, touches the grid edge or the stencil crosses the mask.
    """
    g = field.grid
    node = tuple(int(i) for i in node)
    n, sidx = node[0], node[1:]
    if n >= g.nt:
        return None
    if field.masked[node] or field.masked[(n + 1,) + sidx]:
        return None
    V = field.values[n]
    if any(i == 0 or i == V.shape[k] - 1 for k, i in enumerate(sidx)):
        return None
    if not _stencil_unmasked(field.masked[n], sidx):
        return None
    der = _derivatives(V, sidx, g.spacings)
    if der is None:
        return None
    p, Q = der
    x = np.array([g.x_axes[k][sidx[k]] for k in range(g.dim)])
    t = float(g.times[n])
    dt = (field.values[(n + 1,) + sidx] - field.values[node]) / g.h_t
    if field.kind == "constrained":
        H, _ = hamiltonian(spec, params, x, p, Q, t)
    elif field.kind == "floor":
        # -dt v + sup_u (-L v) = 0
        us = params.u_grid(spec)
        mu = spec.mu(x[None, :], us, t)
        sg = spec.sigma(x[None, :], us, t)
        gen = mu @ p + 0.5 * np.einsum("nij,nkj,ik->n", sg, sg, Q)
        H = float(-gen.min())
    else:
        H, _ = hamiltonian_state(spec, params, x, p, Q, t)
    return float(-dt + params.rho * field.values[node] + H)


def max_residual(field: ValueField, spec: ProblemSpec, params: HamiltonianParams, region=None) -> float:
    """Largest |residual| over nodes where it is applicable.

    ``region`` optionally restricts x to a box ``[(lo, hi), ...]``.
    """
    g = field.grid
    worst = 0.0
    for node in np.ndindex(*g.shape):
        if region is not None:
            x = [g.x_axes[k][node[1 + k]] for k in range(g.dim)]
            if any(not lo <= xi <= hi for xi, (lo, hi) in zip(x, region)):
                continue
        r = viscosity_residual(field, spec, params, node)
        if r is not None:
            worst = max(worst, abs(r))
    return worst
