"""System models: linear, control-affine and strict-feedback forms.

A control-affine system is a drift field plus control fields over R^n,

    dx/dt = f(x) + sum_i u_i * g_i(x),

with every component held as a symbolic expression so Jacobians come from
exact differentiation rather than step-size tuning.  The module also labels
grids of sample points by the corank of the control matrix G(x), exposing
the regular (full-rank) stratum that downstream singular-set computations
are confined to.
"""

from __future__ import annotations

import numpy as np

from . import expr as ex


DEFAULT_RANK_TOL = 1e-10


class GridSizeError(ValueError):
    """Requested sampling grid exceeds the configured cap."""

    def __init__(self, required, cap):
        super().__init__(
            f"grid would contain {required} points, exceeding the cap of {cap}; "
            f"increase the step, shrink the box, or raise max_points"
        )
        self.required = required
        self.cap = cap


def matrix_corank(G, rank_tol=DEFAULT_RANK_TOL):
    """Corank of a matrix: columns minus numerical rank.

    Rank counts singular values above ``rank_tol`` times the largest one;
    an identically zero matrix has rank 0.
    """
    G = np.asarray(G, dtype=float)
    m = G.shape[1]
    if m == 0:
        return 0
    sigma = np.linalg.svd(G, compute_uv=False)
    largest = sigma[0] if sigma.size else 0.0
    if largest == 0.0:
        return m
    rank = int(np.sum(sigma > rank_tol * largest))
    return m - rank


class LinearControlSystem:
    """Linear system dx/dt = A x + B u with B of full column rank."""

    def __init__(self, A, B, rank_tol=DEFAULT_RANK_TOL):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]
        if not 1 <= m <= n:
            raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
        if matrix_corank(B, rank_tol) > 0:
            raise ValueError("B is rank deficient; full column rank m is required")
        self.A = A
        self.B = B
        self.n = n
        self.m = m

    def to_control_affine(self, states=None):
        """View as a control-affine system: f = A x, g_i = column i of B."""
        names = list(states) if states is not None else [f"x{i+1}" for i in range(self.n)]
        drift = [_linear_form(self.A[i], names) for i in range(self.n)]
        controls = [
            [ex.Const(self.B[i, j]) for i in range(self.n)] for j in range(self.m)
        ]
        return ControlAffineSystem(names, drift, controls)


def _linear_form(row, names):
    """Expression for sum_j row[j] * names[j]."""
    node = None
    for coeff, name in zip(row, names):
        term = ex.Mul(ex.Const(coeff), ex.Var(name))
        node = term if node is None else ex.Add(node, term)
    return node if node is not None else ex.Const(0.0)


class ControlAffineSystem:
    """Drift and control vector fields over named states, with symbolic Jacobians.

    Instances are immutable after construction; evaluation methods are pure
    and safe to call concurrently.
    """

    def __init__(self, states, drift, controls):
        states = list(states)
        n = len(states)
        if n == 0:
            raise ValueError("need at least one state")
        if len(set(states)) != n:
            raise ValueError("state names must be distinct")
        if len(drift) != n:
            raise ValueError(f"drift has {len(drift)} components, expected {n}")
        m = len(controls)
        if not 1 <= m <= n:
            raise ValueError(f"need 1 <= m <= n control fields, got m={m}")
        for j, field in enumerate(controls):
            if len(field) != n:
                raise ValueError(f"control field {j+1} has {len(field)} components, expected {n}")
        declared = set(states)
        for component in list(drift) + [c for field in controls for c in field]:
            extra = component.variables() - declared
            if extra:
                raise ValueError(f"undeclared state names in expression: {sorted(extra)}")
        self.states = states
        self.drift = list(drift)
        self.controls = [list(field) for field in controls]
        self.n = n
        self.m = m
        self._drift_jac = None
        self._control_jacs = None

    @classmethod
    def from_strings(cls, states, drift, controls):
        states = list(states)
        drift_exprs = ex.parse_vector(drift, states)
        control_exprs = [ex.parse_vector(field, states) for field in controls]
        return cls(states, drift_exprs, control_exprs)

    def env(self, x):
        return dict(zip(self.states, map(float, x)))

    def eval_drift(self, x):
        """Drift vector f(x)."""
        env = self.env(x)
        out = np.empty(self.n)
        for i, component in enumerate(self.drift):
            try:
                out[i] = component.eval(env)
            except ex.EvaluationError as exc:
                raise ex.EvaluationError(f"drift component {i+1}: {exc}") from exc
        return out

    def control_matrix(self, x):
        """n x m matrix G(x) whose column i is g_i(x)."""
        env = self.env(x)
        G = np.empty((self.n, self.m))
        for j, field in enumerate(self.controls):
            for i, component in enumerate(field):
                try:
                    G[i, j] = component.eval(env)
                except ex.EvaluationError as exc:
                    raise ex.EvaluationError(
                        f"control field {j+1}, component {i+1}: {exc}"
                    ) from exc
        return G

    def rhs(self, x, u):
        """Closed form right-hand side f(x) + G(x) u."""
        return self.eval_drift(x) + self.control_matrix(x) @ np.asarray(u, dtype=float)

    def _jacobian_table(self, components):
        return [[c.diff(name) for name in self.states] for c in components]

    def drift_jacobian(self, x):
        """n x n Jacobian of the drift, by symbolic differentiation."""
        if self._drift_jac is None:
            self._drift_jac = self._jacobian_table(self.drift)
        return _eval_table(self._drift_jac, self.env(x))

    def control_jacobian(self, j, x):
        """n x n Jacobian of control field g_{j+1}."""
        if self._control_jacs is None:
            self._control_jacs = [self._jacobian_table(field) for field in self.controls]
        return _eval_table(self._control_jacs[j], self.env(x))


def _eval_table(table, env):
    return np.array([[entry.eval(env) for entry in row] for row in table])


class StrictFeedbackSystem:
    """Triangular single-input form.

    State i evolves as dx_i/dt = f_i(x_1..x_i) + g_i(x_1..x_i) * x_{i+1}
    for i < n, and dx_n/dt = f_n(x) + g_n(x) * u.  The dependency pattern is
    verified by scanning variable occurrences.
    """

    def __init__(self, states, f, g):
        states = list(states)
        n = len(states)
        if len(f) != n or len(g) != n:
            raise ValueError(f"need {n} f and g expressions, got {len(f)} and {len(g)}")
        for i in range(n):
            allowed = set(states[: i + 1])
            for label, component in (("f", f[i]), ("g", g[i])):
                extra = component.variables() - allowed
                if extra:
                    raise ValueError(
                        f"{label}{i+1} may only depend on {states[:i+1]}, "
                        f"but uses {sorted(extra)}"
                    )
        self.states = states
        self.f = list(f)
        self.g = list(g)
        self.n = n

    @classmethod
    def from_strings(cls, states, f, g):
        states = list(states)
        return cls(states, ex.parse_vector(f, states), ex.parse_vector(g, states))

    def to_control_affine(self):
        """Equivalent control-affine system (m = 1)."""
        drift = []
        for i in range(self.n - 1):
            drift.append(ex.Add(self.f[i], ex.Mul(self.g[i], ex.Var(self.states[i + 1]))))
        drift.append(self.f[self.n - 1])
        control = [ex.Const(0.0)] * (self.n - 1) + [self.g[self.n - 1]]
        return ControlAffineSystem(self.states, drift, [control])


def distribution_corank(sys, x, rank_tol=DEFAULT_RANK_TOL):
    """Corank of span(g_1(x), ..., g_m(x)): m minus the numerical rank of G(x)."""
    if not 0.0 < rank_tol < 1.0:
        raise ValueError(f"rank_tol must be in (0, 1), got {rank_tol}")
    return matrix_corank(sys.control_matrix(x), rank_tol)


def grid_points(box, step, max_points=None):
    """Axis-aligned sampling grid over ``box`` with the given step(s).

    ``box`` is a sequence of (lo, hi) pairs; ``step`` is a scalar or one step
    per axis.  Axis values come from ``linspace`` so that symmetric boxes hit
    the midpoint exactly.  Returns an array of shape (N, n).
    """
    box = [(float(lo), float(hi)) for lo, hi in box]
    ndim = len(box)
    steps = np.broadcast_to(np.asarray(step, dtype=float), (ndim,))
    axes = []
    total = 1
    for (lo, hi), h in zip(box, steps):
        if not hi > lo:
            raise ValueError(f"degenerate box axis [{lo}, {hi}]")
        if not h > 0:
            raise ValueError(f"step must be positive, got {h}")
        count = int(round((hi - lo) / h)) + 1
        axes.append(np.linspace(lo, lo + (count - 1) * h, count))
        total *= count
    if max_points is not None and total > max_points:
        raise GridSizeError(total, max_points)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class RankStratification:
    """Corank labels of the control distribution over a sampling grid."""

    def __init__(self, box, step, points, coranks):
        self.box = [(float(lo), float(hi)) for lo, hi in box]
        self.step = step
        self.points = np.asarray(points, dtype=float)
        self.coranks = np.asarray(coranks, dtype=int)

    @property
    def regular_fraction(self):
        """Fraction of samples in the corank-0 (full rank) stratum."""
        if self.coranks.size == 0:
            return 0.0
        return float(np.mean(self.coranks == 0))

    @property
    def labels(self):
        """Mapping from sample point (as a tuple) to its corank."""
        return {tuple(p): int(c) for p, c in zip(self.points, self.coranks)}

    def samples_with_corank(self, corank):
        """Sample points labelled with the given corank, shape (k, n)."""
        return self.points[self.coranks == corank]


def stratify(sys, box, step, rank_tol=DEFAULT_RANK_TOL, max_points=1_000_000):
    """Label every grid point of ``box`` with its distribution corank."""
    if len(box) != sys.n:
        raise ValueError(f"box has {len(box)} axes, system has {sys.n} states")
    points = grid_points(box, step, max_points=max_points)
    coranks = np.fromiter(
        (distribution_corank(sys, p, rank_tol) for p in points),
        dtype=int,
        count=len(points),
    )
    return RankStratification(box, step, points, coranks)
