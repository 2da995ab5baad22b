"""Scalar diagnostics for representation/weight pairs on a Markov reward process.

Everything here is a pure function of (mrp, phi, w) snapshots, so metrics can
be evaluated concurrently over trajectory logs. Span membership is always
tested through weighted projection residuals with explicit tolerances rather
than rank computations; matrix drift norms are max absolute entry throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .mdp import MarkovRewardProcess, key_matrix, value_function

COND_LIMIT = 1e12


class IllConditionedError(np.linalg.LinAlgError):
    """A linear subsystem was singular or too ill-conditioned to trust."""

    def __init__(self, matrix_name: str, cond: float):
        super().__init__(
            f"matrix {matrix_name} is singular or ill-conditioned "
            f"(cond = {cond:.3e}, limit {COND_LIMIT:.0e})"
        )
        self.matrix_name = matrix_name
        self.cond = cond


def _solve_guarded(G: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedError(name, float(cond))
    return np.linalg.solve(G, rhs)


@dataclass(frozen=True)
class MetricReport:
    """One named check: value observed, tolerance applied, pass/fail."""

    name: str
    value: float
    tolerance_used: float
    passed: bool

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "tolerance_used", float(self.tolerance_used))
        object.__setattr__(self, "passed", bool(self.passed))
        if np.isnan(self.value):
            raise ValueError(f"metric {self.name!r} has NaN value")


def reports_to_csv(reports: list[MetricReport]) -> str:
    """CSV (header + one row per report) with a trailing pass column."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "value", "tolerance", "pass"])
    for r in reports:
        writer.writerow([r.name, repr(r.value), repr(r.tolerance_used), str(r.passed).lower()])
    return buf.getvalue()


def weighted_value_error(
    mrp: MarkovRewardProcess,
    phi: np.ndarray,
    w: np.ndarray,
    V: np.ndarray | None = None,
) -> float:
    """Value approximation error 0.5 Tr((phi w - V)^T diag(d)(I - gamma P)(phi w - V)).

    Non-negative because the weighting matrix is positive definite, and zero
    exactly when phi w reproduces the value function. Pass a precomputed V to
    skip the linear solve.
    """
    if V is None:
        V = value_function(mrp)
    err = phi @ w - V
    weighted = mrp.d[:, None] * (err - mrp.gamma * (mrp.P @ err))
    return 0.5 * float(np.sum(err * weighted))


def weighted_error_gradients(
    mrp: MarkovRewardProcess,
    phi: np.ndarray,
    w: np.ndarray,
    V: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """True gradients of the weighted value error with respect to w and phi.

    Uses the symmetrized weighting 0.5 (A + A^T); for reversible chains this
    coincides with the expected semi-gradients of the bootstrapped loss.
    """
    if V is None:
        V = value_function(mrp)
    A = key_matrix(mrp)
    err = phi @ w - V
    sym_err = 0.5 * (A @ err + A.T @ err)
    return phi.T @ sym_err, sym_err @ w.T


def trace_objective(mrp: MarkovRewardProcess, phi: np.ndarray) -> float:
    """Trace of phi^T (I - gamma P)^{-1} phi, via a linear solve (no explicit inverse)."""
    system = np.eye(mrp.n) - mrp.gamma * mrp.P
    X = np.linalg.solve(system, phi)
    return float(np.sum(phi * X))


def trace_ceiling(mrp: MarkovRewardProcess, k: int) -> float:
    """Sum of the top-k eigenvalues of the symmetrized resolvent.

    This is the normalizer for the trace objective; for symmetric P it equals
    the maximum of the objective over orthonormal phi with k columns.
    """
    system = np.eye(mrp.n) - mrp.gamma * mrp.P
    resolvent = np.linalg.solve(system, np.eye(mrp.n))
    eigvals = np.linalg.eigvalsh(0.5 * (resolvent + resolvent.T))
    return float(eigvals[-k:].sum())


def normalized_trace_objective(
    mrp: MarkovRewardProcess,
    phi: np.ndarray,
    k: int | None = None,
    ceiling: float | None = None,
) -> float:
    """Trace objective divided by the top-k symmetrized-resolvent eigenvalue sum.

    Upper bounded by 1 for orthonormal phi when P is symmetric; reported
    unclamped, so asymmetric P may exceed 1.
    """
    if k is None:
        k = phi.shape[1]
    elif k != phi.shape[1]:
        raise ValueError(f"k={k} does not match phi column count {phi.shape[1]}")
    if ceiling is None:
        ceiling = trace_ceiling(mrp, k)
    return trace_objective(mrp, phi) / ceiling


def covariance_drift(phi: np.ndarray, phi0: np.ndarray) -> float:
    """Max-abs-entry of phi^T phi - phi0^T phi0."""
    if phi.shape != phi0.shape:
        raise ValueError(f"shape mismatch: {phi.shape} vs {phi0.shape}")
    return float(np.abs(phi.T @ phi - phi0.T @ phi0).max())


def projection_onto_span(
    basis: np.ndarray, weight: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Weighted projection of v onto span(basis): basis (basis^T W basis)^{-1} basis^T W v.

    Idempotent, and fixes v exactly when v already lies in the span. ``v`` may
    be a vector or a matrix of column vectors.
    """
    G = basis.T @ weight @ basis
    return basis @ _solve_guarded(G, basis.T @ (weight @ v), "basis^T W basis")


def critical_point_residual(mrp: MarkovRewardProcess, phi: np.ndarray) -> float:
    """How far phi is from the stationarity condition of the joint dynamics.

    Projects diag(d) R R^T diag(d) phi onto span(A phi) in the (A^T)^{-1}
    geometry, where A is the key matrix; the projector reduces to
    A phi (phi^T A phi)^{-1} phi^T. Returns the max-abs-entry of the part
    left outside the span; zero (up to tolerance) iff phi is stationary
    once w sits at its fixed point.
    """
    A = key_matrix(mrp)
    dR = mrp.d[:, None] * mrp.R
    target = dR @ (dR.T @ phi)
    G = phi.T @ A @ phi
    projected = (A @ phi) @ _solve_guarded(G, phi.T @ target, "phi^T A phi")
    return float(np.abs(target - projected).max())


def invariant_subspace_residual(P: np.ndarray, phi: np.ndarray) -> float:
    """Max-abs-entry of the part of P phi outside span(phi).

    Zero iff span(phi) is invariant under P. Raises on rank-deficient phi.
    """
    sv = np.linalg.svd(phi, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise np.linalg.LinAlgError(
            f"phi is rank deficient (min singular value {sv[-1]:.3e})"
        )
    target = P @ phi
    projected = phi @ _solve_guarded(phi.T @ phi, phi.T @ target, "phi^T phi")
    return float(np.abs(target - projected).max())


def gradient_check(
    mrp: MarkovRewardProcess,
    phi: np.ndarray,
    w: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """Max relative error between semi-gradient directions and finite differences.

    The analytic side is the negated, rate-normalized drift of the joint
    dynamics; the numeric side is a central finite difference of the weighted
    value error with step ``eps``. For reversible chains the two agree to
    O(eps^2); otherwise the returned discrepancy quantifies how far the
    dynamics is from a true gradient flow (a diagnostic, not a failure).
    """
    from .dynamics import expected_semi_gradients

    grad_w, grad_phi = expected_semi_gradients(mrp, phi, w)
    V = value_function(mrp)

    def error_at(p: np.ndarray, q: np.ndarray) -> float:
        return weighted_value_error(mrp, p, q, V=V)

    fd_w = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        dw = np.zeros_like(w)
        dw[idx] = eps
        fd_w[idx] = (error_at(phi, w + dw) - error_at(phi, w - dw)) / (2 * eps)
    fd_phi = np.zeros_like(phi)
    for idx in np.ndindex(*phi.shape):
        dphi = np.zeros_like(phi)
        dphi[idx] = eps
        fd_phi[idx] = (error_at(phi + dphi, w) - error_at(phi - dphi, w)) / (2 * eps)

    scale = max(np.abs(grad_w).max(), np.abs(grad_phi).max(), 1e-12)
    err = max(np.abs(grad_w - fd_w).max(), np.abs(grad_phi - fd_phi).max())
    return float(err / scale)
