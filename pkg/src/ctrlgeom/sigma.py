"""Singular set computation.

The singular set of a control-affine system collects the states where the
drift lies inside the span of the control fields, i.e. where some control
input makes the state an equilibrium.  At full-rank points it is the zero
set of the residual

    r(x) = U(x)^T f(x),

where the columns of U(x) form an orthonormal basis of the orthogonal
complement of range(G(x)).  The complement is a computational gauge: the
residual norm, the zero set and the rank of the residual Jacobian do not
depend on the choice of U, and in particular are unchanged by feedback
f -> f + G k(x).

Three routes are provided: a closed-form subspace for linear systems, a
triangular forward solve for strict-feedback systems, and Gauss-Newton plus
pseudo-arclength continuation (or a brute-force grid scan) in general.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .expr import EvaluationError
from .sysmodel import DEFAULT_RANK_TOL, grid_points, matrix_corank

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 50


class StratumError(Exception):
    """A point fell outside the corank-0 stratum."""

    def __init__(self, point, corank):
        super().__init__(
            f"control distribution has corank {corank} at {np.asarray(point)}; "
            f"the singular-set residual is only defined on the full-rank stratum"
        )
        self.point = np.asarray(point, dtype=float)
        self.corank = corank


class NewtonFailure(Exception):
    """Gauss-Newton did not reach the residual tolerance."""

    def __init__(self, message, point, residual_norm, iterations):
        super().__init__(
            f"{message}: residual {residual_norm:.3e} after {iterations} iterations"
        )
        self.point = np.asarray(point, dtype=float)
        self.residual_norm = residual_norm
        self.iterations = iterations


@dataclass
class SigmaResidualFrame:
    """Residual data at one full-rank point.

    ``basis`` has orthonormal columns spanning range(G(x))^perp and
    ``residual`` is basis^T f(x); its norm vanishes exactly on the singular
    set (at corank-0 points).
    """

    point: np.ndarray
    basis: np.ndarray
    residual: np.ndarray

    @property
    def norm(self):
        return float(np.linalg.norm(self.residual))


@dataclass
class NewtonResult:
    point: np.ndarray
    residual_norm: float
    iterations: int


@dataclass
class SigmaSet:
    """Computed representation of the singular set.

    ``kind`` is one of ``subspace`` (linear systems; ``basis`` holds an
    orthonormal basis), ``graph`` (strict-feedback samples), ``cloud``
    (deduplicated Newton limits) or ``curve`` (ordered continuation
    polyline).  Point-bearing kinds store residual norms alongside.
    """

    kind: str
    tol: float
    points: np.ndarray | None = None
    residual_norms: np.ndarray | None = None
    basis: np.ndarray | None = None
    degenerate: bool = False
    stop_reason: str | None = None
    skipped: list = field(default_factory=list)
    failures: int = 0

    def __len__(self):
        if self.points is None:
            return 0 if self.basis is None else self.basis.shape[1]
        return len(self.points)


def orthogonal_complement(G, rank_tol=DEFAULT_RANK_TOL):
    """Orthonormal basis of range(G)^perp for a full-column-rank G.

    Raises :class:`StratumError` when G drops rank.
    """
    G = np.asarray(G, dtype=float)
    n, m = G.shape
    U, sigma, _ = np.linalg.svd(G, full_matrices=True)
    largest = sigma[0] if sigma.size else 0.0
    rank = int(np.sum(sigma > rank_tol * largest)) if largest > 0.0 else 0
    if rank < m:
        raise StratumError(np.zeros(n), m - rank)
    return U[:, m:]


def sigma_residual(sys, x, rank_tol=DEFAULT_RANK_TOL):
    """Residual frame at ``x``; requires the full-rank stratum."""
    x = np.asarray(x, dtype=float)
    G = sys.control_matrix(x)
    corank = matrix_corank(G, rank_tol)
    if corank > 0:
        raise StratumError(x, corank)
    U = orthogonal_complement(G, rank_tol)
    f = sys.eval_drift(x)
    return SigmaResidualFrame(point=x, basis=U, residual=U.T @ f)


def residual_jacobian(sys, x, rank_tol=DEFAULT_RANK_TOL):
    """(n-m) x n Jacobian of the residual map at ``x``.

    Uses U^T (Jf - sum_i c_i Jg_i) with c the least-squares coefficients of
    the drift in the control columns.  On the singular set this equals the
    exact Jacobian of the residual and is gauge-independent up to an
    orthogonal factor, so its rank (the local submanifold-dimension
    certificate) and its nullspace (the continuation tangent) are
    well-defined.
    """
    x = np.asarray(x, dtype=float)
    G = sys.control_matrix(x)
    corank = matrix_corank(G, rank_tol)
    if corank > 0:
        raise StratumError(x, corank)
    U = orthogonal_complement(G, rank_tol)
    f = sys.eval_drift(x)
    coeffs, *_ = np.linalg.lstsq(G, f, rcond=None)
    J = sys.drift_jacobian(x)
    for j in range(sys.m):
        if coeffs[j] != 0.0:
            J = J - coeffs[j] * sys.control_jacobian(j, x)
    return U.T @ J


def residual_rank(sys, x, rank_tol=DEFAULT_RANK_TOL):
    """Numerical rank of the residual Jacobian (equals n-m at generic points)."""
    J = residual_jacobian(sys, x, rank_tol)
    sigma = np.linalg.svd(J, compute_uv=False)
    largest = sigma[0] if sigma.size else 0.0
    if largest == 0.0:
        return 0
    return int(np.sum(sigma > rank_tol * largest))


def sigma_linear(sys, rank_tol=DEFAULT_RANK_TOL):
    """Singular subspace of a linear system: nullspace of U^T A.

    U spans range(B)^perp.  The result is flagged degenerate when the
    nullspace dimension differs from m (the non-generic case); for A = 0 the
    whole state space is returned.
    """
    U = orthogonal_complement(sys.B, rank_tol)
    M = U.T @ sys.A
    _, sigma, Vt = np.linalg.svd(M, full_matrices=True)
    largest = sigma[0] if sigma.size else 0.0
    if largest == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sigma > rank_tol * largest))
    basis = Vt[rank:].T
    degenerate = basis.shape[1] != sys.m
    if degenerate:
        warnings.warn(
            f"singular subspace has dimension {basis.shape[1]}, expected {sys.m}: "
            f"non-generic state matrix",
            stacklevel=2,
        )
    return SigmaSet(kind="subspace", tol=rank_tol, basis=basis, degenerate=degenerate)


def _min_norm_step(J, r):
    step, *_ = np.linalg.lstsq(J, -r, rcond=None)
    return step


def sigma_newton(
    sys,
    seed,
    tol=DEFAULT_TOL,
    max_iter=DEFAULT_MAX_ITER,
    rank_tol=DEFAULT_RANK_TOL,
):
    """Gauss-Newton iteration driving the residual to zero from ``seed``.

    Steps are minimum-norm least-squares solutions of J dx = -r, damped by
    halving until the residual decreases, so the iteration lands on a
    nearby singular-set point.  Raises :class:`NewtonFailure` on
    stagnation or iteration exhaustion and :class:`StratumError` if an
    iterate leaves the full-rank stratum.
    """
    x = np.asarray(seed, dtype=float).copy()
    frame = sigma_residual(sys, x, rank_tol)
    norm = frame.norm
    if norm < tol:
        return NewtonResult(point=x, residual_norm=norm, iterations=0)
    for iteration in range(1, max_iter + 1):
        J = residual_jacobian(sys, x, rank_tol)
        step = _min_norm_step(J, frame.residual)
        alpha = 1.0
        for _ in range(30):
            candidate = x + alpha * step
            try:
                trial = sigma_residual(sys, candidate, rank_tol)
            except EvaluationError:
                trial = None  # left the expression domain; shorten the step
            if trial is not None and trial.norm < norm:
                break
            alpha *= 0.5
        else:
            raise NewtonFailure("no descent direction", x, norm, iteration)
        x = candidate
        frame = trial
        norm = trial.norm
        if norm < tol:
            return NewtonResult(point=x, residual_norm=norm, iterations=iteration)
    raise NewtonFailure("max_iter exceeded", x, norm, max_iter)


def _curve_tangent(sys, x, rank_tol):
    """Unit tangent of the singular curve (m = 1): nullspace of the residual Jacobian."""
    J = residual_jacobian(sys, x, rank_tol)
    U, sigma, Vt = np.linalg.svd(J, full_matrices=True)
    largest = sigma[0] if sigma.size else 0.0
    rank = int(np.sum(sigma > rank_tol * largest)) if largest > 0.0 else 0
    if rank < sys.n - 1:
        return None  # fold / branch point: curve structure lost
    return Vt[-1]


def _corrector(sys, prediction, tangent, tol, rank_tol, max_iter=20):
    """Newton corrector constrained to the hyperplane through ``prediction``."""
    y = prediction.copy()
    for _ in range(max_iter):
        try:
            frame = sigma_residual(sys, y, rank_tol)
        except EvaluationError:
            return None
        constraint = tangent @ (y - prediction)
        F = np.concatenate([frame.residual, [constraint]])
        if frame.norm < tol and abs(constraint) < tol * max(1.0, float(np.linalg.norm(y))):
            return y, frame.norm
        J = np.vstack([residual_jacobian(sys, y, rank_tol), tangent])
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None
        y = y + step
    return None


def sigma_continuation(
    sys,
    start,
    arc_step,
    n_steps,
    tol=DEFAULT_TOL,
    rank_tol=DEFAULT_RANK_TOL,
    direction=1,
):
    """Trace the singular curve of a single-input system from ``start``.

    Pseudo-arclength predictor-corrector: predict along the unit nullspace
    direction of the residual Jacobian, correct in the orthogonal
    hyperplane.  The initial tangent is canonicalized (largest component
    positive) and multiplied by ``direction``; the tangent orientation is
    then carried along the branch.  Tracing stops early at a stratum
    boundary, at a rank drop of the residual Jacobian (fold in the
    parametrization), or when the corrector keeps failing after four step
    halvings; the stop reason is recorded on the returned set.
    """
    if sys.m != 1:
        raise ValueError(f"continuation requires a single control field, got m={sys.m}")
    if arc_step <= 0:
        raise ValueError("arc_step must be positive")
    x = np.asarray(start, dtype=float).copy()
    frame = sigma_residual(sys, x, rank_tol)
    if frame.norm >= tol:
        raise ValueError(
            f"start point has residual {frame.norm:.3e}, not on the singular set (tol {tol:.1e})"
        )
    tangent = _curve_tangent(sys, x, rank_tol)
    if tangent is None:
        raise ValueError("residual Jacobian is rank deficient at the start point")
    pivot = int(np.argmax(np.abs(tangent)))
    if tangent[pivot] < 0:
        tangent = -tangent
    tangent = direction * tangent

    points = [x.copy()]
    norms = [frame.norm]
    stop_reason = "completed"
    for _ in range(n_steps):
        h = arc_step
        accepted = None
        for _ in range(5):  # nominal step plus four halvings
            prediction = x + h * tangent
            try:
                accepted = _corrector(sys, prediction, tangent, tol, rank_tol)
            except StratumError:
                accepted = None
                stop_reason = "stratum_boundary"
                break
            if accepted is not None:
                break
            h *= 0.5
        if accepted is None:
            if stop_reason == "completed":
                stop_reason = "corrector_failure"
            break
        y, norm = accepted
        new_tangent = _curve_tangent(sys, y, rank_tol)
        if new_tangent is None:
            points.append(y)
            norms.append(norm)
            stop_reason = "fold"
            break
        if new_tangent @ tangent < 0:
            new_tangent = -new_tangent
        points.append(y)
        norms.append(norm)
        x, tangent = y, new_tangent
    return SigmaSet(
        kind="curve",
        tol=tol,
        points=np.asarray(points),
        residual_norms=np.asarray(norms),
        stop_reason=stop_reason,
    )


def sigma_strict_feedback(sfs, x1_samples, tol=DEFAULT_TOL, rank_tol=DEFAULT_RANK_TOL):
    """Sample the singular graph of a strict-feedback system.

    For each x1 sample the remaining coordinates follow from the forward
    substitution x_{i+1} = -f_i / g_i.  Samples where some g_i vanishes are
    skipped and reported in ``skipped`` as (sample, equation index) pairs.
    Every computed point is validated against the general residual test on
    the converted control-affine system.
    """
    affine = sfs.to_control_affine()
    points = []
    norms = []
    skipped = []
    for x1 in x1_samples:
        x = np.zeros(sfs.n)
        x[0] = float(x1)
        env = {sfs.states[0]: x[0]}
        failed = None
        for i in range(sfs.n - 1):
            gi = sfs.g[i].eval(env)
            if gi == 0.0 or not np.isfinite(gi):
                failed = i
                break
            fi = sfs.f[i].eval(env)
            x[i + 1] = -fi / gi
            env[sfs.states[i + 1]] = x[i + 1]
        if failed is not None:
            skipped.append((float(x1), failed + 1))
            continue
        frame = sigma_residual(affine, x, rank_tol)
        if frame.norm >= tol * max(1.0, float(np.linalg.norm(affine.eval_drift(x)))):
            skipped.append((float(x1), -1))
            continue
        points.append(x)
        norms.append(frame.norm)
    if skipped:
        warnings.warn(
            f"{len(skipped)} of {len(x1_samples)} samples skipped "
            f"(vanishing g_i or residual above tolerance)",
            stacklevel=2,
        )
    return SigmaSet(
        kind="graph",
        tol=tol,
        points=np.asarray(points) if points else np.empty((0, sfs.n)),
        residual_norms=np.asarray(norms),
        skipped=skipped,
    )


def sigma_grid_scan(
    sys,
    box,
    step,
    tol=DEFAULT_TOL,
    rank_tol=DEFAULT_RANK_TOL,
    max_iter=DEFAULT_MAX_ITER,
    max_points=1_000_000,
):
    """Newton from every grid point; deduplicated limits form a point cloud.

    The cloud doubles as a brute-force oracle for the continuation route.
    Converged points closer than step/10 to an already accepted point are
    merged.  Seeds that fail (divergence, stratum crossing) are counted in
    ``failures``.  If every seed was already converged at iteration zero the
    drift is degenerate (the singular set fills the sampled region) and the
    set is flagged accordingly.
    """
    seeds = grid_points(box, step, max_points=max_points)
    dedup = float(np.min(np.broadcast_to(np.asarray(step, dtype=float), (len(box),)))) / 10.0
    accepted = []
    norms = []
    failures = 0
    zero_iteration = 0
    converged = 0
    for seed in seeds:
        try:
            result = sigma_newton(sys, seed, tol=tol, max_iter=max_iter, rank_tol=rank_tol)
        except (NewtonFailure, StratumError):
            failures += 1
            continue
        converged += 1
        if result.iterations == 0:
            zero_iteration += 1
        point = result.point
        if any(np.linalg.norm(point - q) < dedup for q in accepted):
            continue
        accepted.append(point)
        norms.append(result.residual_norm)
    degenerate = converged > 0 and zero_iteration == converged and converged == len(seeds)
    if degenerate:
        warnings.warn(
            "every seed satisfies the residual tolerance already: "
            "degenerate (drift-free or near drift-free) system, the singular set "
            "fills the sampled region",
            stacklevel=2,
        )
    return SigmaSet(
        kind="cloud",
        tol=tol,
        points=np.asarray(accepted) if accepted else np.empty((0, len(box))),
        residual_norms=np.asarray(norms),
        failures=failures,
        degenerate=degenerate,
    )
