"""Feedback design on a control-transverse manifold, and what it produces.

The synthesized law cancels the drift component normal to W and contracts
the defining functions s(x) = x_dep - h(x_ind) at a chosen rate:

    G_s(x) u = -L_f s(x) - lambda * s(x),      G_s = (ds/dx) G(x),

solved in the minimum-norm least-squares sense.  Along the closed loop
d/dt s = -lambda s (exactly, when G_s is square nonsingular), which makes W
invariant and exponentially attracting while leaving the singular set
untouched -- feedback only moves the drift inside the control directions.

Deforming a parametrized family W(mu) deforms the induced dynamics; this
module tracks its equilibrium branches over mu and locates folds (branch
pairs that merge where W(mu) becomes tangent to the singular set) and
eigenvalue zero crossings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .expr import EvaluationError
from .sigma import StratumError, residual_jacobian, sigma_residual
from .sysmodel import DEFAULT_RANK_TOL
from .transverse import (
    DEFAULT_MARGIN_TOL,
    TransversalityError,
    find_equilibria,
    transversality_to_D,
)

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-9


class ClosedLoopSystem:
    """Closed-loop view f(x) + G(x) u(x), duck-compatible with the residual test.

    Only pointwise evaluation is available (the control is numerical), which
    is all the singular-set membership predicate needs.
    """

    def __init__(self, law):
        self.law = law
        self.states = law.sys.states
        self.n = law.sys.n
        self.m = law.sys.m

    def eval_drift(self, x):
        return self.law.closed_loop(x)

    def control_matrix(self, x):
        return self.law.sys.control_matrix(x)


class FeedbackLaw:
    """Invariance feedback for a control-transverse manifold.

    ``control_box`` is an optional (lower, upper) pair of per-input bounds;
    bounds are monitored during simulation, never enforced (saturation would
    break the invariance contract).
    """

    def __init__(self, W, sys, gain, margin_tol=1e-10, control_box=None):
        if gain < 0:
            raise ValueError(f"gain must be nonnegative, got {gain}")
        self.W = W
        self.sys = sys
        self.gain = float(gain)
        self.margin_tol = margin_tol
        self.control_box = control_box

    def control(self, x):
        """Control input at a state; minimum-norm when the system is over-actuated."""
        x = np.asarray(x, dtype=float)
        s = self.W.defining_residual(x)
        J_s = self.W.defining_jacobian(x)
        G_s = J_s @ self.sys.control_matrix(x)
        sigma = np.linalg.svd(G_s, compute_uv=False)
        if sigma[-1] <= self.margin_tol * max(1.0, sigma[0]):
            raise TransversalityError(
                f"control-direction block of the defining Jacobian is singular at {x} "
                f"(smallest singular value {sigma[-1]:.3e}); W is not transverse to D there"
            )
        rhs = -(J_s @ self.sys.eval_drift(x)) - self.gain * s
        u, *_ = np.linalg.lstsq(G_s, rhs, rcond=None)
        return u

    def closed_loop(self, x):
        """Closed-loop velocity f(x) + G(x) u(x)."""
        x = np.asarray(x, dtype=float)
        return self.sys.eval_drift(x) + self.sys.control_matrix(x) @ self.control(x)

    def closed_loop_system(self):
        return ClosedLoopSystem(self)


def synthesize_invariance_feedback(W, sys, gain, margin_tol=1e-10, control_box=None):
    """Feedback law making W invariant and attracting at rate ``gain``."""
    return FeedbackLaw(W, sys, gain, margin_tol=margin_tol, control_box=control_box)


@dataclass
class Trajectory:
    """Closed-loop simulation output on a uniform reporting grid."""

    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    s_norm: np.ndarray
    complete: bool
    diagnostic: str | None = None
    bound_violations: list = field(default_factory=list)


def simulate(law, x0, t_final, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, n_report=201):
    """Integrate the closed loop with an adaptive embedded 4(5) pair.

    Reports states, inputs and the distance-to-W samples ||s(x(t))|| on a
    uniform grid of ``n_report`` times.  Integration failure (step-size
    underflow) yields a truncated trajectory with the solver's diagnostic.
    """
    if t_final <= 0:
        raise ValueError(f"t_final must be positive, got {t_final}")
    x0 = np.asarray(x0, dtype=float)
    t_eval = np.linspace(0.0, float(t_final), n_report)
    sol = solve_ivp(
        lambda t, y: law.closed_loop(y),
        (0.0, float(t_final)),
        x0,
        method="RK45",
        rtol=rtol,
        atol=atol,
        t_eval=t_eval,
    )
    states = sol.y.T
    controls = np.array([law.control(x) for x in states]) if len(states) else np.empty((0, law.sys.m))
    s_norm = np.array([np.linalg.norm(law.W.defining_residual(x)) for x in states])
    violations = []
    if law.control_box is not None:
        lower, upper = (np.asarray(b, dtype=float) for b in law.control_box)
        for t, u in zip(sol.t, controls):
            for j in range(law.sys.m):
                if u[j] < lower[j] or u[j] > upper[j]:
                    violations.append((float(t), j, float(u[j])))
        if violations:
            logger.warning(
                "control bounds violated at %d of %d reported steps",
                len({v[0] for v in violations}), len(sol.t),
            )
    return Trajectory(
        t=sol.t,
        states=states,
        controls=controls,
        s_norm=s_norm,
        complete=sol.status == 0,
        diagnostic=None if sol.status == 0 else sol.message,
        bound_violations=violations,
    )


@dataclass
class BifurcationEvent:
    mu: float
    kind: str  # fold | eigenvalue-zero-crossing | imaginary-axis-crossing
    point: np.ndarray
    eigenvalue: float


@dataclass
class Branch:
    """One equilibrium tracked across consecutive parameter samples."""

    mu_indices: list
    records: list

    @property
    def first(self):
        return self.mu_indices[0]

    @property
    def last(self):
        return self.mu_indices[-1]


@dataclass
class BifurcationDiagram:
    mu: np.ndarray
    equilibria: list  # per-mu lists of EquilibriumRecord
    branches: list
    events: list
    diagnostics: list


def _leading_real(record):
    return float(np.max(record.eigenvalues.real))


def _chart_det(record):
    return float(np.prod(record.eigenvalues).real)


def _greedy_match(left_points, right_points, match_radius):
    """Nearest-neighbour pairing of two point lists within a radius.

    Returns (matched pairs as index tuples, matched-left set, matched-right set).
    """
    pairs = []
    for i, p in enumerate(left_points):
        for j, q in enumerate(right_points):
            d = float(np.linalg.norm(p - q))
            if d < match_radius:
                pairs.append((d, i, j))
    pairs.sort(key=lambda item: item[0])
    taken_left = set()
    taken_right = set()
    matched = []
    for d, i, j in pairs:
        if i in taken_left or j in taken_right:
            continue
        taken_left.add(i)
        taken_right.add(j)
        matched.append((i, j))
    return matched, taken_left, taken_right


def _match_branches(mu_values, per_mu, match_radius, diagnostics):
    branches = [Branch([0], [r]) for r in per_mu[0]] if per_mu else []
    active = list(branches)
    for k in range(1, len(mu_values)):
        records = list(per_mu[k])
        points = [r.chart_point for r in records]
        for i in range(len(points)):
            for j in range(i + 1, len(points)):
                if np.linalg.norm(points[i] - points[j]) < match_radius:
                    diagnostics.append(
                        f"branch matching ambiguous at mu={mu_values[k]:.6g}: "
                        f"equilibria {i} and {j} closer than the matching radius"
                    )
        ends = [b.records[-1].chart_point for b in active]
        matched, taken_branch, taken_record = _greedy_match(ends, points, match_radius)
        for bi, ri in matched:
            active[bi].mu_indices.append(k)
            active[bi].records.append(records[ri])
        new_active = [b for bi, b in enumerate(active) if bi in taken_branch]
        for ri, record in enumerate(records):
            if ri not in taken_record:
                branch = Branch([k], [record])
                branches.append(branch)
                new_active.append(branch)
        active = new_active
    return branches


def _equilibria_at(W, sys, mu, seeds, tol, rank_tol):
    return find_equilibria(W.with_mu(mu), sys, seeds, tol=tol, rank_tol=rank_tol)


def _count_near(records, center, radius):
    return sum(1 for r in records if np.linalg.norm(r.chart_point - center) < radius)


def _bisect_pair_count(W, sys, seeds, center, radius, mu_with, mu_without, tol, rank_tol,
                       mu_resolution):
    """Shrink the bracket around the parameter where a nearby equilibrium pair vanishes."""
    while abs(mu_with - mu_without) > mu_resolution:
        mid = 0.5 * (mu_with + mu_without)
        records = _equilibria_at(W, sys, mid, seeds, tol, rank_tol)
        if _count_near(records, center, radius) >= 2:
            mu_with = mid
        else:
            mu_without = mid
    return 0.5 * (mu_with + mu_without)


def _combined_det(W, sys, x, mu, rank_tol):
    Wm = W.with_mu(mu)
    J = np.vstack([Wm.defining_jacobian(x), residual_jacobian(sys, x, rank_tol)])
    return float(np.linalg.det(J))


def _refine_fold(W, sys, x0, mu0, tol, rank_tol, max_iter=40):
    """Newton on the extended system {on W(mu), on Sigma, combined det = 0}.

    Pins the fold to the actual tangency point of W(mu) with the singular
    set, solving for (x, mu) jointly.  Returns None on failure.
    """
    n = sys.n
    trouble = (EvaluationError, StratumError, np.linalg.LinAlgError)

    def F(z):
        x, mu = z[:n], z[n]
        s = W.with_mu(mu).defining_residual(x)
        r = sigma_residual(sys, x, rank_tol).residual
        return np.concatenate([s, r, [_combined_det(W, sys, x, mu, rank_tol)]])

    z = np.concatenate([np.asarray(x0, dtype=float), [float(mu0)]])
    try:
        Fz = F(z)
    except trouble:
        return None
    norm = float(np.linalg.norm(Fz))
    for _ in range(max_iter):
        if norm < tol:
            return z[:n], float(z[n])
        J = np.zeros((n + 1, n + 1))
        for i in range(n + 1):
            h = 1e-7 * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            try:
                J[:, i] = (F(zp) - F(zm)) / (2.0 * h)
            except trouble:
                return None
        try:
            step = np.linalg.solve(J, -Fz)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        improved = False
        for _ in range(20):
            trial = z + alpha * step
            try:
                F_trial = F(trial)
            except trouble:
                alpha *= 0.5
                continue
            trial_norm = float(np.linalg.norm(F_trial))
            if trial_norm < norm:
                z, Fz, norm = trial, F_trial, trial_norm
                improved = True
                break
            alpha *= 0.5
        if not improved:
            return None
    return (z[:n], float(z[n])) if norm < tol else None


def _track_to(W, sys, record, mu, tol, rank_tol):
    """Re-solve one equilibrium at a nearby parameter value, seeded from ``record``."""
    found = find_equilibria(W.with_mu(mu), sys, [record.point], tol=tol, rank_tol=rank_tol)
    if not found:
        return None
    return min(found, key=lambda r: np.linalg.norm(r.chart_point - record.chart_point))


def _bisect_scalar(W, sys, branch_lo, branch_hi, mu_lo, mu_hi, value, tol, rank_tol,
                   mu_resolution):
    """Bisect on a scalar of the tracked equilibrium changing sign between two samples."""
    v_lo = value(branch_lo)
    record = branch_lo
    while abs(mu_hi - mu_lo) > mu_resolution:
        mid = 0.5 * (mu_lo + mu_hi)
        tracked = _track_to(W, sys, record, mid, tol, rank_tol)
        if tracked is None:
            return None, None
        if value(tracked) * v_lo > 0:
            mu_lo = mid
            v_lo = value(tracked)
        else:
            mu_hi = mid
        record = tracked
    return 0.5 * (mu_lo + mu_hi), record


def trace_bifurcation(
    W,
    sys,
    mu_values,
    seeds,
    tol=1e-9,
    rank_tol=DEFAULT_RANK_TOL,
    match_radius=0.5,
    mu_resolution=1e-6,
    margin_tol=DEFAULT_MARGIN_TOL,
):
    """Track equilibrium branches of the family W(mu) and detect bifurcations.

    For every parameter sample, equilibria of the induced dynamics are found
    from the given seeds and matched into branches by nearest neighbour.
    Detected events:

    * ``fold``: a branch pair merges and vanishes.  The parameter is
      bracketed by bisection on the local pair count, then the exact
      tangency point of W(mu) with the singular set is solved for; events
      closer than twice the parameter resolution are merged.
    * ``eigenvalue-zero-crossing``: the chart Jacobian determinant changes
      sign along a branch (a real eigenvalue through zero), refined by
      bisection.
    * ``imaginary-axis-crossing``: the real part of a complex eigenvalue
      pair changes sign along a branch; reported without normal-form
      analysis.

    Transversality of W(mu) to the control distribution is verified at every
    found equilibrium and raises :class:`TransversalityError` when it fails.
    """
    if W.param is None:
        raise ValueError("trace_bifurcation needs a manifold family with a free parameter")
    mu_values = np.asarray(mu_values, dtype=float)
    diagnostics = []
    per_mu = []
    for mu in mu_values:
        Wm = W.with_mu(mu)
        records = find_equilibria(Wm, sys, seeds, tol=tol, rank_tol=rank_tol)
        for record in records:
            check = transversality_to_D(Wm, sys, record.point, tol=margin_tol, on_tol=1e-6)
            if not check.transverse:
                raise TransversalityError(
                    f"W(mu={mu:.6g}) is not transverse to the control distribution at "
                    f"{record.point} (margin {check.margin:.3e})"
                )
        per_mu.append(records)

    branches = _match_branches(mu_values, per_mu, match_radius, diagnostics)
    events = []

    # folds: an equilibrium pair present on one side of a sample interval and
    # absent on the other.  Candidates come from records left unmatched when
    # pairing consecutive samples; a lone unmatched record teams up with its
    # nearest neighbour, which covers grids that sample the tangency exactly.
    for k in range(len(mu_values) - 1):
        left, right = per_mu[k], per_mu[k + 1]
        _, taken_left, taken_right = _greedy_match(
            [r.chart_point for r in left], [r.chart_point for r in right], match_radius
        )
        for rich_k, poor_k, records, taken in (
            (k + 1, k, right, taken_right),
            (k, k + 1, left, taken_left),
        ):
            unmatched = [r for i, r in enumerate(records) if i not in taken]
            for record in unmatched:
                others = [q for q in records if q is not record]
                if not others:
                    continue
                partner = min(
                    others,
                    key=lambda q: np.linalg.norm(q.chart_point - record.chart_point),
                )
                gap = float(np.linalg.norm(partner.chart_point - record.chart_point))
                if gap > 2.0 * match_radius:
                    continue
                center = 0.5 * (record.chart_point + partner.chart_point)
                radius = max(2.0 * gap, 10.0 * mu_resolution)
                extra_seeds = [record.point, partner.point]
                mu_star = _bisect_pair_count(
                    W, sys, list(seeds) + extra_seeds, center, radius,
                    float(mu_values[rich_k]), float(mu_values[poor_k]),
                    tol, rank_tol, mu_resolution,
                )
                merge_point = 0.5 * (record.point + partner.point)
                refined = _refine_fold(W, sys, merge_point, mu_star, tol, rank_tol)
                if refined is not None:
                    x_star, mu_ref = refined
                    if abs(mu_ref - mu_star) <= 10.0 * mu_resolution:
                        merge_point, mu_star = x_star, mu_ref
                eig = 0.5 * (_leading_real(record) + _leading_real(partner))
                events.append(
                    BifurcationEvent(mu=float(mu_star), kind="fold",
                                     point=merge_point, eigenvalue=float(eig))
                )

    # eigenvalue crossings along persisting branches
    for branch in branches:
        for step in range(len(branch.mu_indices) - 1):
            k0, k1 = branch.mu_indices[step], branch.mu_indices[step + 1]
            r0, r1 = branch.records[step], branch.records[step + 1]
            mu0, mu1 = float(mu_values[k0]), float(mu_values[k1])
            det0, det1 = _chart_det(r0), _chart_det(r1)
            if det0 * det1 < 0:
                mu_star, record = _bisect_scalar(
                    W, sys, r0, r1, mu0, mu1, _chart_det, tol, rank_tol, mu_resolution
                )
                if mu_star is not None:
                    real_eigs = record.eigenvalues[np.abs(record.eigenvalues.imag) < 1e-6]
                    eig = float(real_eigs.real[np.argmin(np.abs(real_eigs.real))]) if real_eigs.size else 0.0
                    events.append(
                        BifurcationEvent(mu=mu_star, kind="eigenvalue-zero-crossing",
                                         point=record.point, eigenvalue=eig)
                    )
                continue
            pair0 = r0.eigenvalues[np.abs(r0.eigenvalues.imag) > 1e-6]
            pair1 = r1.eigenvalues[np.abs(r1.eigenvalues.imag) > 1e-6]
            if pair0.size and pair1.size:
                re0 = float(np.max(pair0.real))
                re1 = float(np.max(pair1.real))
                if re0 * re1 < 0:
                    def complex_real_part(record):
                        pair = record.eigenvalues[np.abs(record.eigenvalues.imag) > 1e-6]
                        return float(np.max(pair.real)) if pair.size else 0.0

                    mu_star, record = _bisect_scalar(
                        W, sys, r0, r1, mu0, mu1, complex_real_part, tol, rank_tol,
                        mu_resolution,
                    )
                    if mu_star is not None:
                        events.append(
                            BifurcationEvent(mu=mu_star, kind="imaginary-axis-crossing",
                                             point=record.point, eigenvalue=complex_real_part(record))
                        )

    events = _dedupe_events(events, 2.0 * mu_resolution)
    events.sort(key=lambda e: (e.mu, e.kind))
    return BifurcationDiagram(
        mu=mu_values, equilibria=per_mu, branches=branches, events=events,
        diagnostics=diagnostics,
    )


def _dedupe_events(events, mu_radius):
    kept = []
    for event in sorted(events, key=lambda e: (e.kind, e.mu)):
        duplicate = any(
            e.kind == event.kind
            and abs(e.mu - event.mu) < mu_radius
            and np.linalg.norm(e.point - event.point) < 1e-2
            for e in kept
        )
        if not duplicate:
            kept.append(event)
    return kept
