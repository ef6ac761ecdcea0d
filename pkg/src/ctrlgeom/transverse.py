"""Control-transverse manifolds and their induced dynamics.

A control-transverse manifold W has dimension n - m and satisfies
T_p W (+) D_p = T_p M at every point, D being the span of the control
fields.  Along W any velocity then splits uniquely into a tangential part
and a control-direction part; dropping the control part leaves a vector
field on W, the induced (control-transverse) dynamics.  Its equilibria are
exactly the intersections of W with the singular set, and they are isolated
precisely when W is also transverse to the singular set.

Manifolds are kept in graph form over a coordinate split; level-set input
is converted locally through an implicit-function solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import expr as ex
from .sigma import StratumError, residual_jacobian, sigma_residual
from .sysmodel import DEFAULT_RANK_TOL

logger = logging.getLogger(__name__)

DEFAULT_MARGIN_TOL = 1e-8
ISOLATION_CONDITION_LIMIT = 1e8


class TransversalityError(Exception):
    """A transverse-sum decomposition is (numerically) singular."""


class NotOnManifoldError(ValueError):
    """A point violates the manifold's defining equations."""


@dataclass
class TransversalityCheck:
    transverse: bool
    margin: float
    condition_number: float


class _ManifoldBase:
    """Shared chart bookkeeping for graph and level-set manifolds."""

    states: list
    ind: tuple
    dep: tuple
    param: str | None

    @property
    def n(self):
        return len(self.states)

    @property
    def m(self):
        return len(self.dep)

    def _check_split(self, states, ind, dep):
        n = len(states)
        ind = tuple(int(i) for i in ind)
        dep = tuple(int(i) for i in dep)
        if sorted(ind + dep) != list(range(n)):
            raise ValueError(
                f"ind {ind} and dep {dep} must partition the state indices 0..{n-1}"
            )
        return ind, dep

    def chart_of(self, x):
        """Chart coordinates of a full-space point: its independent components."""
        return np.asarray(x, dtype=float)[list(self.ind)]

    def graph_jacobian(self, x):
        """m x (n-m) matrix of partial derivatives of the dependent coordinates."""
        raise NotImplementedError

    def tangent_basis(self, x):
        """n x (n-m) tangent basis aligned with the chart: column k is
        e_{ind_k} plus the graph-slope combination of the dependent axes."""
        dh = self.graph_jacobian(x)
        T = np.zeros((self.n, self.n - self.m))
        for k, i in enumerate(self.ind):
            T[i, k] = 1.0
        for j, d in enumerate(self.dep):
            T[d, :] = dh[j, :]
        return T

    def on_manifold(self, x, tol=1e-9):
        return float(np.linalg.norm(self.defining_residual(x))) < tol


class TransverseManifold(_ManifoldBase):
    """Graph-form manifold W = { x : x_dep = h(x_ind) }.

    ``ind`` and ``dep`` are 0-based state indices partitioning the state
    list; ``h`` holds one expression per dependent coordinate, written over
    the independent state names plus an optional parameter (``param``),
    which must be bound with :meth:`with_mu` before evaluation.
    """

    def __init__(self, states, ind, dep, h, param=None):
        self.states = list(states)
        self.ind, self.dep = self._check_split(self.states, ind, dep)
        if len(h) != len(self.dep):
            raise ValueError(f"need {len(self.dep)} graph expressions, got {len(h)}")
        allowed = {self.states[i] for i in self.ind}
        if param is not None:
            allowed.add(param)
        for component in h:
            extra = component.variables() - allowed
            if extra:
                raise ValueError(
                    f"graph expressions may only use {sorted(allowed)}, found {sorted(extra)}"
                )
        self.h = list(h)
        self.param = param
        self._grad = None

    @classmethod
    def from_strings(cls, states, ind, dep, h, param=None):
        states = list(states)
        names = [states[i] for i in ind] + ([param] if param else [])
        return cls(states, ind, dep, ex.parse_vector(h, names), param=param)

    def with_mu(self, value):
        """Bind the deformation parameter, yielding a concrete manifold."""
        if self.param is None:
            raise ValueError("manifold has no deformation parameter")
        h = [ex.substitute(component, self.param, float(value)) for component in self.h]
        return TransverseManifold(self.states, self.ind, self.dep, h, param=None)

    def _require_bound(self):
        if self.param is not None:
            raise ValueError(
                f"parameter '{self.param}' is unbound; call with_mu(value) first"
            )

    def _chart_env(self, x):
        return {self.states[i]: float(x[i]) for i in self.ind}

    def graph_values(self, chart):
        """h evaluated at chart coordinates."""
        self._require_bound()
        env = {self.states[i]: float(v) for i, v in zip(self.ind, chart)}
        return np.array([component.eval(env) for component in self.h])

    def lift(self, chart, guess=None):
        """Full-space point over the chart coordinates."""
        x = np.zeros(self.n)
        x[list(self.ind)] = np.asarray(chart, dtype=float)
        x[list(self.dep)] = self.graph_values(chart)
        return x

    def defining_residual(self, x):
        """s(x) = x_dep - h(x_ind); zero exactly on the manifold."""
        self._require_bound()
        x = np.asarray(x, dtype=float)
        env = self._chart_env(x)
        return np.array(
            [x[d] - component.eval(env) for d, component in zip(self.dep, self.h)]
        )

    def defining_jacobian(self, x):
        """m x n Jacobian of the defining functions."""
        self._require_bound()
        if self._grad is None:
            self._grad = [
                [component.diff(self.states[i]) for i in self.ind] for component in self.h
            ]
        env = self._chart_env(np.asarray(x, dtype=float))
        J = np.zeros((self.m, self.n))
        for j, d in enumerate(self.dep):
            J[j, d] = 1.0
            for k, i in enumerate(self.ind):
                J[j, i] = -self._grad[j][k].eval(env)
        return J

    def graph_jacobian(self, x):
        self._require_bound()
        J = self.defining_jacobian(x)
        return -J[:, list(self.ind)]


class LevelSetManifold(_ManifoldBase):
    """Manifold given as the joint zero set of m functions of the state.

    A coordinate split is fixed at construction (or chosen automatically at
    a reference point); dependent coordinates are recovered pointwise by a
    Newton solve, and tangent data comes from the implicit function theorem.
    """

    def __init__(self, states, equations, ind, dep, param=None, reference=None):
        self.states = list(states)
        self.ind, self.dep = self._check_split(self.states, ind, dep)
        if len(equations) != len(self.dep):
            raise ValueError(
                f"{len(self.dep)} dependent coordinates require "
                f"{len(self.dep)} defining equations, got {len(equations)}"
            )
        self.equations = list(equations)
        self.param = param
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self._grad = [
            [component.diff(name) for name in self.states] for component in self.equations
        ]

    @classmethod
    def from_point(cls, states, equations, at, rank_tol=DEFAULT_RANK_TOL, param=None):
        """Choose the best-conditioned split at a reference point.

        Raises :class:`NotOnManifoldError` when no split gives an invertible
        dependent block (the level set is not a graph near ``at``).
        """
        if param is not None:
            raise ValueError("bind the parameter before choosing a split at a point")
        states = list(states)
        probe = cls(states, equations, ind=range(len(states) - len(equations)),
                    dep=range(len(states) - len(equations), len(states)), param=param)
        J = probe._equation_jacobian(np.asarray(at, dtype=float))
        _, _, pivots = scipy.linalg.qr(J, pivoting=True)
        dep = tuple(sorted(int(p) for p in pivots[: len(equations)]))
        ind = tuple(i for i in range(len(states)) if i not in dep)
        block = J[:, list(dep)]
        sigma = np.linalg.svd(block, compute_uv=False)
        if sigma[0] == 0.0 or sigma[-1] <= rank_tol * sigma[0]:
            raise NotOnManifoldError(
                "no coordinate split solves the level-set equations near the "
                "reference point (defining Jacobian is rank deficient)"
            )
        return cls(states, equations, ind, dep, param=param, reference=at)

    def with_mu(self, value):
        if self.param is None:
            raise ValueError("manifold has no deformation parameter")
        equations = [ex.substitute(c, self.param, float(value)) for c in self.equations]
        return LevelSetManifold(self.states, equations, self.ind, self.dep, param=None)

    def _env(self, x):
        if self.param is not None:
            raise ValueError(
                f"parameter '{self.param}' is unbound; call with_mu(value) first"
            )
        return {name: float(v) for name, v in zip(self.states, x)}

    def _equation_jacobian(self, x):
        env = self._env(x)
        return np.array([[entry.eval(env) for entry in row] for row in self._grad])

    def defining_residual(self, x):
        env = self._env(np.asarray(x, dtype=float))
        return np.array([component.eval(env) for component in self.equations])

    def defining_jacobian(self, x):
        return self._equation_jacobian(np.asarray(x, dtype=float))

    def graph_jacobian(self, x):
        J = self.defining_jacobian(x)
        block = J[:, list(self.dep)]
        return -np.linalg.solve(block, J[:, list(self.ind)])

    def lift(self, chart, guess=None, tol=1e-13, max_iter=50):
        """Solve the defining equations for the dependent coordinates."""
        x = np.zeros(self.n)
        x[list(self.ind)] = np.asarray(chart, dtype=float)
        dep = list(self.dep)
        if guess is not None:
            x[dep] = np.asarray(guess, dtype=float)
        elif self.reference is not None:
            x[dep] = self.reference[dep]
        for _ in range(max_iter):
            residual = self.defining_residual(x)
            if np.linalg.norm(residual) < tol * max(1.0, float(np.linalg.norm(x))):
                return x
            block = self.defining_jacobian(x)[:, dep]
            try:
                x[dep] -= np.linalg.solve(block, residual)
            except np.linalg.LinAlgError as exc:
                raise NotOnManifoldError(
                    f"implicit solve hit a singular dependent block at chart {chart}"
                ) from exc
        raise NotOnManifoldError(
            f"implicit solve for the dependent coordinates did not converge at chart {chart}"
        )


def transversality_to_D(W, sys, p, tol=DEFAULT_MARGIN_TOL, on_tol=1e-9):
    """Check T_p W (+) D_p = T_p M at a point p of W.

    Builds the n x n matrix [tangent basis | G(p)]; the margin is its
    smallest singular value and the check passes when it exceeds ``tol``.
    """
    p = np.asarray(p, dtype=float)
    if not W.on_manifold(p, on_tol):
        raise NotOnManifoldError(
            f"point {p} violates the manifold equations "
            f"(|s| = {np.linalg.norm(W.defining_residual(p)):.3e})"
        )
    M = np.hstack([W.tangent_basis(p), sys.control_matrix(p)])
    sigma = np.linalg.svd(M, compute_uv=False)
    smallest = float(sigma[-1])
    cond = float(sigma[0] / sigma[-1]) if sigma[-1] > 0.0 else float("inf")
    return TransversalityCheck(transverse=smallest > tol, margin=smallest, condition_number=cond)


class TransverseDynamics:
    """The vector field induced on W's chart by splitting off control directions.

    At a chart point, the full-space drift decomposes uniquely as
    f(p) = T alpha + G beta; ``alpha`` is the chart velocity.
    """

    def __init__(self, W, sys, margin_tol=DEFAULT_MARGIN_TOL, fd_step=1e-6):
        self.W = W
        self.sys = sys
        self.margin_tol = margin_tol
        self.fd_step = fd_step

    def _decompose(self, p):
        T = self.W.tangent_basis(p)
        G = self.sys.control_matrix(p)
        M = np.hstack([T, G])
        sigma = np.linalg.svd(M, compute_uv=False)
        if sigma[-1] <= self.margin_tol:
            raise TransversalityError(
                f"transverse decomposition margin {sigma[-1]:.3e} below "
                f"{self.margin_tol:.1e} at {p}"
            )
        coeffs = np.linalg.solve(M, self.sys.eval_drift(p))
        return T, G, coeffs

    def velocity(self, chart):
        """Chart velocity alpha at the given chart coordinates."""
        p = self.W.lift(chart)
        _, _, coeffs = self._decompose(p)
        return coeffs[: self.W.n - self.W.m]

    def split_velocity(self, p):
        """Full-space parts (v_W, v_D) with v_W + v_D = f(p)."""
        T, G, coeffs = self._decompose(p)
        k = self.W.n - self.W.m
        return T @ coeffs[:k], G @ coeffs[k:]

    def jacobian(self, chart):
        """Chart-space Jacobian by central differences of the velocity map."""
        chart = np.asarray(chart, dtype=float)
        k = chart.size
        J = np.zeros((k, k))
        for i in range(k):
            h = self.fd_step * max(1.0, abs(chart[i]))
            forward = chart.copy()
            backward = chart.copy()
            forward[i] += h
            backward[i] -= h
            J[:, i] = (self.velocity(forward) - self.velocity(backward)) / (2.0 * h)
        return J


def transverse_dynamics(W, sys, margin_tol=DEFAULT_MARGIN_TOL, fd_step=1e-6):
    """Induced dynamics of ``sys`` on the chart of ``W``."""
    return TransverseDynamics(W, sys, margin_tol=margin_tol, fd_step=fd_step)


@dataclass
class EquilibriumRecord:
    """An intersection point of W with the singular set.

    ``eigenvalues`` belong to the chart Jacobian of the induced dynamics;
    ``index`` counts eigenvalues with positive real part; ``isolated`` is the
    combined-Jacobian condition test.
    """

    point: np.ndarray
    chart_point: np.ndarray
    eigenvalues: np.ndarray
    index: int
    isolated: bool
    condition_number: float
    residual_norm: float


def _combined_system(W, sys, x, rank_tol):
    s = W.defining_residual(x)
    frame = sigma_residual(sys, x, rank_tol)
    return np.concatenate([s, frame.residual])


def _combined_jacobian(W, sys, x, rank_tol):
    return np.vstack(
        [W.defining_jacobian(x), residual_jacobian(sys, x, rank_tol)]
    )


def find_equilibria(
    W,
    sys,
    seeds,
    tol=1e-9,
    rank_tol=DEFAULT_RANK_TOL,
    max_iter=50,
    dedup_radius=1e-6,
    fd_step=1e-6,
):
    """Newton search for points of W on the singular set, from many seeds.

    Solves the square system {defining equations of W, singular-set
    residual}.  Converged roots are deduplicated, equipped with induced-
    dynamics eigenvalues, and classified: ``isolated`` holds when the
    combined Jacobian has condition number below 1e8.  Seeds that fail to
    converge (or leave the full-rank stratum) are logged and skipped.
    """
    dynamics = TransverseDynamics(W, sys, fd_step=fd_step)
    roots = []
    failures = 0
    for seed in seeds:
        x = np.asarray(seed, dtype=float).copy()
        converged = False
        try:
            F = _combined_system(W, sys, x, rank_tol)
            norm = float(np.linalg.norm(F))
            for _ in range(max_iter):
                if norm < tol:
                    converged = True
                    break
                J = _combined_jacobian(W, sys, x, rank_tol)
                try:
                    step = np.linalg.solve(J, -F)
                except np.linalg.LinAlgError:
                    step, *_ = np.linalg.lstsq(J, -F, rcond=None)
                alpha = 1.0
                for _ in range(30):
                    trial = x + alpha * step
                    try:
                        F_trial = _combined_system(W, sys, trial, rank_tol)
                    except ex.EvaluationError:
                        alpha *= 0.5
                        continue
                    trial_norm = float(np.linalg.norm(F_trial))
                    if trial_norm < norm:
                        x, F, norm = trial, F_trial, trial_norm
                        break
                    alpha *= 0.5
                else:
                    break
            else:
                converged = norm < tol
        except (StratumError, ex.EvaluationError):
            failures += 1
            continue
        if not converged:
            failures += 1
            continue
        if any(np.linalg.norm(x - r) < dedup_radius for r in roots):
            continue
        roots.append(x)
    if failures:
        logger.info("find_equilibria: %d of %d seeds failed to converge", failures, len(seeds))

    records = []
    for x in roots:
        J = _combined_jacobian(W, sys, x, rank_tol)
        cond = float(np.linalg.cond(J))
        eigenvalues = np.linalg.eigvals(dynamics.jacobian(W.chart_of(x)))
        records.append(
            EquilibriumRecord(
                point=x,
                chart_point=W.chart_of(x),
                eigenvalues=eigenvalues,
                index=int(np.sum(eigenvalues.real > 0.0)),
                isolated=cond < ISOLATION_CONDITION_LIMIT,
                condition_number=cond,
                residual_norm=float(np.linalg.norm(_combined_system(W, sys, x, rank_tol))),
            )
        )
    return records


def transversality_to_sigma(W, sys, eq, tol=1e-6, rank_tol=DEFAULT_RANK_TOL):
    """Check T_p W + T_p Sigma = T_p M at an equilibrium of the induced dynamics.

    The margin is the smallest singular value of the combined n x n Jacobian
    (defining equations of W stacked on the singular-set residual).  A small
    margin flags tangency, the mechanism producing non-isolated equilibria.
    """
    point = eq.point if isinstance(eq, EquilibriumRecord) else np.asarray(eq, dtype=float)
    J = _combined_jacobian(W, sys, point, rank_tol)
    sigma = np.linalg.svd(J, compute_uv=False)
    smallest = float(sigma[-1])
    cond = float(sigma[0] / sigma[-1]) if sigma[-1] > 0.0 else float("inf")
    return TransversalityCheck(transverse=smallest > tol, margin=smallest, condition_number=cond)
