"""Nonlocal shift operator and PDE coefficient assembly.

The backward-in-time decoupling field is computed by marching its
time reversal u(t, x) = field(T - t, x) forward from t = 0.
All coefficient maps here are stated for the reversed (Cauchy) time t,
which means every underlying problem coefficient is evaluated at
T - t.  The reflection lives in this module only: callers pass Cauchy
time and never reflect themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteShiftError
from .grid import Grid, GridFunction, grid_nodes, multilinear_interpolate
from .problem import LevyMeasure, ProblemSpec

__all__ = [
    "NonlocalField",
    "eval_nonlocal",
    "integrate_over_nu",
    "assemble_coefficients",
]


@dataclass(frozen=True)
class NonlocalField:
    """Per-node, per-atom table of shifted differences of a grid function."""

    grid: Grid
    table: np.ndarray  # (n_nodes, K, m)
    t: float

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 3 or table.shape[0] != self.grid.n_nodes:
            raise ValueError("table must have shape (n_nodes, K, m)")
        if not np.all(np.isfinite(table)):
            raise ValueError("nonlocal table must be finite")
        table = table.copy()
        table.flags.writeable = False
        object.__setattr__(self, "table", table)


def eval_nonlocal(u: GridFunction, spec: ProblemSpec, t: float) -> NonlocalField:
    """Shifted-difference table u(x + shift_k) - u(x) for every node and atom.

    ``t`` is Cauchy time; the jump coefficient supplying the shift is
    evaluated at horizon - t.  Shifted points outside the box are
    clamped to the nearest face, so each entry is bounded by twice the
    sup norm of ``u``.
    """
    s = spec.horizon - t
    nodes = grid_nodes(u.grid)
    vals = u.values
    meas = spec.measure
    n_nodes = u.grid.n_nodes
    table = np.empty((n_nodes, len(meas), vals.shape[1]))
    for k in range(len(meas)):
        shift = np.asarray(spec.jump_coeff(s, nodes, vals, meas.marks[k]), dtype=float)
        if not np.all(np.isfinite(shift)):
            raise NonFiniteShiftError(
                f"jump coefficient returned non-finite shift for atom {k} at t={t}"
            )
        shift = shift.reshape(n_nodes, u.grid.ndim)
        zero_rows = ~np.any(shift != 0.0, axis=1)
        if np.all(zero_rows):
            table[:, k, :] = 0.0
            continue
        table[:, k, :] = multilinear_interpolate(u.grid, vals, nodes + shift) - vals
        # a vanishing shift means u(x + 0) - u(x) = 0 identically
        table[zero_rows, k, :] = 0.0
    return NonlocalField(grid=u.grid, table=table, t=t)


def integrate_over_nu(w: np.ndarray, measure: LevyMeasure) -> np.ndarray:
    """Weighted atom sum standing in for the integral against nu.

    ``w`` has shape (K, m) for a single node or (..., K, m) batched; the
    result drops the atom axis.
    """
    w = np.asarray(w, dtype=float)
    if w.shape[-2] != len(measure):
        raise ValueError(
            f"table has {w.shape[-2]} atom rows, measure has {len(measure)}"
        )
    return np.einsum("k,...km->...m", measure.weights, w)


def assemble_coefficients(
    spec: ProblemSpec,
    t: float,
    x: np.ndarray,
    u: np.ndarray,
    p: np.ndarray,
    w: np.ndarray,
):
    """Coefficient blocks of the reversed equation at Cauchy time ``t``.

    Returns ``(a2, a1, a0)`` with shapes (B, n, n), (B, n), (B, m) so the
    marching equation reads

        du/dt = sum_ij a2_ij d2u/dx_i dx_j - sum_i a1_i du/dx_i - a0.

    ``a2`` is half the Gram matrix of sigma (exactly symmetric), ``a1``
    couples the nu-integral of phi with the drift, and ``a0`` collects
    the generator and the nu-integral of the nonlocal table.  The
    composite gradient argument p * sigma is formed here; ``p`` is
    always the raw spatial gradient of the field.
    """
    s = spec.horizon - t
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)

    sig = np.asarray(spec.diffusion(s, x, u), dtype=float)
    a2 = 0.5 * np.einsum("bik,bjk->bij", sig, sig)
    p_sigma = np.einsum("bmi,bij->bmj", p, sig)

    phi_int = np.zeros((x.shape[0], spec.n))
    meas = spec.measure
    for k in range(len(meas)):
        phi_k = np.asarray(spec.jump_coeff(s, x, u, meas.marks[k]), dtype=float)
        phi_int += meas.weights[k] * phi_k.reshape(x.shape[0], spec.n)

    a1 = phi_int - np.asarray(spec.drift(s, x, u, p_sigma, w), dtype=float).reshape(
        x.shape[0], spec.n
    )
    a0 = -np.asarray(spec.generator(s, x, u, p_sigma, w), dtype=float).reshape(
        x.shape[0], spec.m
    ) - integrate_over_nu(w, meas)
    return a2, a1, a0
