"""Objective assembly and solvers for stack registration.

The objective couples a distance measure with a deformation regularizer:

* groupwise mode: ``J = D(all fields) + sum_k S(u_k)`` with an optional
  gauge constraint (zero mean displacement over the stack, or first image
  fixed),
* sequential mode: ``J = sum_{k>=2} D(pair k-1, k) + S(u_k)`` with the
  first image fixed, minimized by Gauss-Seidel sweeps over one field at a
  time.

The solver is limited-memory BFGS with a strong Wolfe line search.  Its
initial inverse-metric application solves ``(H_reg + eps I) z = q`` by
conjugate gradients, where ``H_reg`` is the (constant) regularizer Hessian
and ``eps = 1e-6 * alpha``; this preconditions the oscillatory components
while leaving low-frequency alignment moves cheap.  All inner products run
through order-canonical accumulation, so solves are exactly invariant under
permutations of the input stack.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .accum import block_dot, block_norm, mean_axis0, sorted_sum
from .errors import ConfigError, OptimError
from .grids import DisplacementField, GridSpec, ImageStack, prolong, restrict_stack
from .measures import (
    GROUPWISE_KINDS,
    PAIRWISE_KINDS,
    MeasureKind,
    measure_eval,
    resolve_measure,
)
from .regularize import RegKind, reg_eval, reg_glo, reg_hessian_apply

CONSTRAINTS = ("none", "fix_first", "zero_mean")


@dataclass(frozen=True)
class ObjectiveSpec:
    """What to minimize: measure + regularizer, mode, gauge constraint.

    ``constraint='auto'`` resolves to ``zero_mean`` for groupwise mode and
    ``fix_first`` for sequential mode.
    """

    measure: MeasureKind
    regularizer: RegKind
    mode: str = "groupwise"
    constraint: str = "auto"

    def __post_init__(self):
        if self.mode not in ("groupwise", "sequential"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "sequential" and not isinstance(self.measure, PAIRWISE_KINDS):
            raise ConfigError("sequential mode requires a pairwise measure")
        if self.mode == "groupwise" and not isinstance(self.measure, GROUPWISE_KINDS):
            raise ConfigError("groupwise mode requires a groupwise measure")
        if self.constraint == "auto":
            resolved = "zero_mean" if self.mode == "groupwise" else "fix_first"
            object.__setattr__(self, "constraint", resolved)
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"unknown constraint {self.constraint!r}")
        if self.mode == "sequential" and self.constraint == "zero_mean":
            raise ConfigError("zero-mean constraint requires groupwise mode")


@dataclass(frozen=True)
class SolveOptions:
    """Solver knobs shared by all levels."""

    levels: int = 1
    maxiter: int = 50
    gtol: float = 1e-5
    memory: int = 5
    sweeps: int = 1
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    ls_max_expand: int = 10
    ls_max_bisect: int = 20
    metric: str = "reg"  # "reg" or "identity"
    metric_eps_rel: float = 1e-6
    cg_tol: float = 1e-10
    cg_maxiter: int = 200
    max_fevals: int | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.maxiter < 0 or self.sweeps < 1:
            raise ConfigError("maxiter must be >= 0 and sweeps >= 1")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ConfigError("need 0 < c1 < c2 < 1 for the Wolfe conditions")
        if self.metric not in ("reg", "identity"):
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass
class IterRecord:
    level: int
    component: int  # -1 for groupwise solves, else index of the active field
    iteration: int
    value: float
    grad_norm: float
    step: float
    wolfe_ok: bool
    subgradient: bool
    fevals: int
    gevals: int
    elapsed: float


@dataclass
class LevelTrace:
    level: int
    dims: tuple[int, int]
    records: list[IterRecord] = field(default_factory=list)
    terminations: list[str] = field(default_factory=list)


@dataclass
class SolveReport:
    spec: ObjectiveSpec
    options: SolveOptions
    traces: list[LevelTrace]
    fields: list[DisplacementField]
    fevals: int
    gevals: int
    elapsed: float
    line_search_failures: int

    @property
    def final_value(self) -> float:
        for trace in reversed(self.traces):
            if trace.records:
                return trace.records[-1].value
        return math.nan

    def all_records(self):
        for trace in self.traces:
            yield from trace.records


# ---------------------------------------------------------------------------
# objective


def _fields_to_array(fields) -> np.ndarray:
    return np.stack([f.u for f in fields])


def _array_to_fields(grid: GridSpec, x: np.ndarray):
    return [DisplacementField(grid, x[i]) for i in range(x.shape[0])]


def _project_gradient(grads: np.ndarray, constraint: str) -> np.ndarray:
    if constraint == "fix_first":
        grads = grads.copy()
        grads[0] = 0.0
        return grads
    if constraint == "zero_mean":
        return grads - mean_axis0(grads)[None, ...]
    return grads


def _project_point(x: np.ndarray, constraint: str) -> np.ndarray:
    if constraint == "zero_mean":
        return x - mean_axis0(x)[None, ...]
    return x


def objective(spec: ObjectiveSpec, stack: ImageStack, fields):
    """Evaluate ``J`` and its per-field gradients under the chosen constraint.

    ``fields`` may be a list of ``DisplacementField`` or a raw array of shape
    (K, m1, m2, 2).  Returns ``(value, grads, subgradient_flag)``.
    """
    if isinstance(fields, np.ndarray):
        fields = _array_to_fields(stack.grid, fields)
    me = measure_eval(stack, list(fields), spec.measure)
    if spec.mode == "groupwise":
        reg_value, reg_grads = reg_glo(fields, spec.regularizer)
    else:
        # the first image is the anchor of the sequential chain; it carries
        # no regularization term of its own
        reg_grads = np.zeros_like(me.grads)
        parts = []
        for k in range(1, stack.k):
            v, g = reg_eval(spec.regularizer, fields[k])
            parts.append(v)
            reg_grads[k] = g
        reg_value = sorted_sum(parts)
    value = me.value + reg_value
    grads = _project_gradient(me.grads + reg_grads, spec.constraint)
    return value, grads, me.subgradient


# ---------------------------------------------------------------------------
# inner linear algebra


def _cg_solve(apply_b, rhs: np.ndarray, tol: float, maxiter: int) -> np.ndarray:
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rs = block_dot(r, r)
    rhs_norm = math.sqrt(max(rs, 0.0))
    if rhs_norm == 0.0:
        return x
    p = r.copy()
    for _ in range(maxiter):
        bp = apply_b(p)
        denom = block_dot(p, bp)
        if denom <= 0.0:
            break
        a = rs / denom
        x += a * p
        r -= a * bp
        rs_new = block_dot(r, r)
        if math.sqrt(max(rs_new, 0.0)) <= tol * rhs_norm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _make_metric_solve(reg_kind: RegKind, grid: GridSpec, opts: SolveOptions):
    eps = opts.metric_eps_rel * reg_kind.alpha

    def apply_b(z: np.ndarray) -> np.ndarray:
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            out[i] = reg_hessian_apply(reg_kind, grid, z[i])
        return out + eps * z

    def solve(q: np.ndarray) -> np.ndarray:
        return _cg_solve(apply_b, q, opts.cg_tol, opts.cg_maxiter)

    return solve


# ---------------------------------------------------------------------------
# L-BFGS with strong Wolfe line search


@dataclass
class _Counters:
    fevals: int = 0
    gevals: int = 0
    budget: int | None = None

    def charge(self):
        self.fevals += 1
        self.gevals += 1

    @property
    def exhausted(self) -> bool:
        return self.budget is not None and self.fevals >= self.budget


@dataclass
class _Eval:
    alpha: float
    value: float
    grad: np.ndarray
    slope: float
    subgradient: bool


class _LineSearchResult:
    def __init__(self, ev: _Eval | None, ok: bool, reason: str):
        self.ev = ev
        self.ok = ok
        self.reason = reason


def _strong_wolfe(fun, x, p, f0, slope0, opts: SolveOptions, counters: _Counters,
                  first_trial: float = 1.0):
    """Bracket + bisection zoom for the strong Wolfe conditions.

    Returns the accepted evaluation, or the best strictly-decreasing
    evaluation seen with ``ok=False`` when bracketing or the bisection cap
    fails.
    """
    c1, c2 = opts.wolfe_c1, opts.wolfe_c2
    best: _Eval | None = None

    def evaluate(alpha: float) -> _Eval:
        nonlocal best
        value, grad, sub = fun(x + alpha * p)
        ev = _Eval(alpha, value, grad, block_dot(grad, p), sub)
        if best is None or ev.value < best.value:
            best = ev
        return ev

    def fallback(reason: str) -> _LineSearchResult:
        if best is not None and best.value < f0:
            return _LineSearchResult(best, False, reason)
        return _LineSearchResult(None, False, reason)

    def zoom(lo: _Eval, hi: _Eval) -> _LineSearchResult:
        for _ in range(opts.ls_max_bisect):
            if counters.exhausted:
                return fallback("budget")
            mid = evaluate(0.5 * (lo.alpha + hi.alpha))
            if mid.value > f0 + c1 * mid.alpha * slope0 or mid.value >= lo.value:
                hi = mid
            else:
                if abs(mid.slope) <= c2 * abs(slope0):
                    return _LineSearchResult(mid, True, "wolfe")
                if mid.slope * (hi.alpha - lo.alpha) >= 0:
                    hi = lo
                lo = mid
        return fallback("bisection_cap")

    prev = _Eval(0.0, f0, None, slope0, False)
    alpha = first_trial
    for i in range(opts.ls_max_expand):
        if counters.exhausted:
            return fallback("budget")
        ev = evaluate(alpha)
        if ev.value > f0 + c1 * alpha * slope0 or (i > 0 and ev.value >= prev.value):
            return zoom(prev, ev)
        if abs(ev.slope) <= c2 * abs(slope0):
            return _LineSearchResult(ev, True, "wolfe")
        if ev.slope >= 0:
            return zoom(ev, prev)
        prev = ev
        alpha *= 2.0
    return fallback("expansion_cap")


@dataclass
class _LbfgsOutcome:
    x: np.ndarray
    value: float
    termination: str
    ls_failures: int


def lbfgs(
    fun,
    x0: np.ndarray,
    opts: SolveOptions,
    metric_solve=None,
    project_point=None,
    first_step_scale: float | None = None,
    counters: _Counters | None = None,
    trace: LevelTrace | None = None,
    level: int = 0,
    component: int = -1,
    t0: float | None = None,
) -> _LbfgsOutcome:
    """Limited-memory BFGS minimization of ``fun``.

    ``fun`` maps an array to ``(value, grad, subgradient_flag)``.  With
    ``metric_solve`` the two-loop recursion seeds with the regularizer
    metric; otherwise the usual ``s.y / y.y`` scaled identity is used.  In
    metric-seeded runs the first trial of each line search is capped at
    ``first_step_scale / |p|_inf``, because the metric's near-null
    directions carry no natural scale; Wolfe expansion can still grow the
    step from there.
    """
    counters = counters if counters is not None else _Counters()
    t0 = t0 if t0 is not None else time.perf_counter()

    def charged(z):
        counters.charge()
        return fun(z)

    x = x0.copy()
    if project_point is not None:
        x = project_point(x)
    if counters.exhausted:
        return _LbfgsOutcome(x, math.nan, "budget", 0)
    value, grad, sub = charged(x)
    gnorm = block_norm(grad)
    gnorm0 = gnorm
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    ls_failures = 0

    def record(iteration, step, wolfe_ok, subflag):
        if trace is not None:
            trace.records.append(
                IterRecord(
                    level=level,
                    component=component,
                    iteration=iteration,
                    value=value,
                    grad_norm=gnorm,
                    step=step,
                    wolfe_ok=wolfe_ok,
                    subgradient=subflag,
                    fevals=counters.fevals,
                    gevals=counters.gevals,
                    elapsed=time.perf_counter() - t0,
                )
            )

    record(0, 0.0, True, sub)
    termination = "maxiter"
    for iteration in range(1, opts.maxiter + 1):
        if gnorm <= opts.gtol * max(1.0, gnorm0):
            termination = "gtol"
            break
        if counters.exhausted:
            termination = "budget"
            break
        p = -_two_loop(grad, s_list, y_list, rho_list, metric_solve)
        slope = block_dot(grad, p)
        if not np.isfinite(slope) or slope >= 0.0:
            p = -grad
            slope = -(gnorm**2)
        first_trial = 1.0
        if metric_solve is not None and first_step_scale is not None:
            pinf = float(np.abs(p).max())
            if pinf > first_step_scale:
                first_trial = first_step_scale / pinf
        ls = _strong_wolfe(charged, x, p, value, slope, opts, counters, first_trial)
        if ls.ev is None:
            if ls.reason == "budget":
                termination = "budget"
            else:
                termination = "line_search_failure"
                ls_failures += 1
            break
        if not ls.ok and ls.reason != "budget":
            ls_failures += 1
        x_new = x + ls.ev.alpha * p
        if project_point is not None:
            x_new = project_point(x_new)
        s = x_new - x
        y = ls.ev.grad - grad
        x = x_new
        value = ls.ev.value
        grad = ls.ev.grad
        gnorm = block_norm(grad)
        sy = block_dot(s, y)
        if sy > 1e-10 * block_norm(s) * block_norm(y):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > opts.memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        record(iteration, ls.ev.alpha, ls.ok, ls.ev.subgradient)
        if not ls.ok:
            termination = "budget" if ls.reason == "budget" else "line_search_failure"
            break
    else:
        termination = "maxiter"
    if gnorm <= opts.gtol * max(1.0, gnorm0) and termination == "maxiter":
        termination = "gtol"
    return _LbfgsOutcome(x, value, termination, ls_failures)


def _two_loop(grad, s_list, y_list, rho_list, metric_solve):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * block_dot(s, q)
        alphas.append(a)
        q -= a * y
    if metric_solve is not None:
        r = metric_solve(q)
    elif s_list:
        gamma = block_dot(s_list[-1], y_list[-1]) / block_dot(y_list[-1], y_list[-1])
        r = gamma * q
    else:
        r = q
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * block_dot(y, r)
        r += (a - b) * s
    return r


# ---------------------------------------------------------------------------
# solvers


def _solve_level_groupwise(spec, stack, x0, opts, counters, trace, level, t0):
    metric = None
    if opts.metric == "reg":
        metric = _make_metric_solve(spec.regularizer, stack.grid, opts)

    def fun(x):
        return objective(spec, stack, x)

    def project(x):
        return _project_point(x, spec.constraint)

    outcome = lbfgs(
        fun,
        x0,
        opts,
        metric_solve=metric,
        project_point=project,
        first_step_scale=min(stack.grid.spacing),
        counters=counters,
        trace=trace,
        level=level,
        component=-1,
        t0=t0,
    )
    trace.terminations.append(f"level{level}:{outcome.termination}")
    return outcome.x, outcome.ls_failures


def _component_objective(spec, stack, fields, idx):
    """Objective restricted to field ``idx`` in a sequential chain.

    Only the pair terms touching image ``idx`` and its own regularizer vary;
    neighbors enter through their current (frozen) warped images.
    """
    from .measures import _pair_core  # local import to keep the API surface small
    from .grids import warp_with_jacobian

    left = None
    right = None
    if idx > 0:
        left, _ = warp_with_jacobian(stack[idx - 1], fields[idx - 1], want_jac=False)
    if idx < stack.k - 1:
        right, _ = warp_with_jacobian(stack[idx + 1], fields[idx + 1], want_jac=False)
    grid = stack.grid

    def fun(x):
        u = DisplacementField(grid, x[0])
        warped, jac = warp_with_jacobian(stack[idx], u)
        value = 0.0
        cot = np.zeros(grid.dims)
        if left is not None:
            v, _, db = _pair_core(spec.measure, left, warped)
            value += v
            cot += db
        if right is not None:
            v, da, _ = _pair_core(spec.measure, warped, right)
            value += v
            cot += da
        rv, rg = reg_eval(spec.regularizer, u)
        value += rv
        grads = (cot[..., None] * jac + rg)[None, ...]
        return value, grads, False

    return fun


def gauss_seidel_sweep(
    spec: ObjectiveSpec,
    stack: ImageStack,
    fields,
    opts: SolveOptions,
    counters: _Counters | None = None,
    trace: LevelTrace | None = None,
    level: int = 0,
    t0: float | None = None,
):
    """Sequential Gauss-Seidel sweeps: minimize over one field at a time.

    The first field stays exactly as given (the chain anchor).  Returns the
    updated field list and the number of line-search failures.
    """
    if spec.mode != "sequential":
        raise ConfigError("gauss_seidel_sweep needs a sequential spec")
    counters = counters if counters is not None else _Counters()
    trace = trace if trace is not None else LevelTrace(level, stack.grid.dims)
    t0 = t0 if t0 is not None else time.perf_counter()
    fields = list(fields)
    metric = None
    if opts.metric == "reg":
        metric = _make_metric_solve(spec.regularizer, stack.grid, opts)
    failures = 0
    for sweep in range(opts.sweeps):
        for idx in range(1, stack.k):
            if counters.exhausted:
                trace.terminations.append(f"level{level}:budget")
                return fields, failures
            fun = _component_objective(spec, stack, fields, idx)
            outcome = lbfgs(
                fun,
                fields[idx].u[None, ...],
                opts,
                metric_solve=metric,
                first_step_scale=min(stack.grid.spacing),
                counters=counters,
                trace=trace,
                level=level,
                component=idx,
                t0=t0,
            )
            fields[idx] = DisplacementField(stack.grid, outcome.x[0])
            failures += outcome.ls_failures
            trace.terminations.append(f"level{level}:sweep{sweep}:field{idx}:{outcome.termination}")
    return fields, failures


def build_pyramid(stack: ImageStack, levels: int):
    """Stacks from finest to coarsest, validating the coarsest size."""
    pyramid = [stack]
    for _ in range(levels - 1):
        pyramid.append(restrict_stack(pyramid[-1]))
    coarsest = pyramid[-1].grid.dims
    if coarsest[0] < 8 or coarsest[1] < 8:
        raise OptimError(
            f"coarsest level {coarsest} is below the 8x8 minimum; use fewer levels"
        )
    return pyramid[::-1]


def multilevel_solve(
    spec: ObjectiveSpec,
    stack: ImageStack,
    opts: SolveOptions,
    initial_fields=None,
) -> SolveReport:
    """Coarse-to-fine solve with warm starts prolonged between levels."""
    t0 = time.perf_counter()
    pyramid = build_pyramid(stack, opts.levels)
    counters = _Counters(budget=opts.max_fevals)
    traces: list[LevelTrace] = []
    failures = 0
    k = stack.k
    coarse_grid = pyramid[0].grid
    if initial_fields is not None:
        fields = list(initial_fields)
        if len(fields) != k:
            raise OptimError(f"expected {k} initial fields, got {len(fields)}")
        if any(f.grid != coarse_grid for f in fields):
            raise OptimError("initial fields must live on the coarsest grid")
        x = _fields_to_array(fields)
    else:
        x = np.zeros((k, *coarse_grid.dims, 2))
    for level, level_stack in enumerate(pyramid):
        trace = LevelTrace(level, level_stack.grid.dims)
        traces.append(trace)
        level_spec = replace(spec, measure=resolve_measure(spec.measure, level_stack))
        if spec.mode == "groupwise":
            x = _project_point(x, spec.constraint)
            x, fails = _solve_level_groupwise(
                level_spec, level_stack, x, opts, counters, trace, level, t0
            )
        else:
            fields, fails = gauss_seidel_sweep(
                level_spec,
                level_stack,
                _array_to_fields(level_stack.grid, x),
                opts,
                counters=counters,
                trace=trace,
                level=level,
                t0=t0,
            )
            x = _fields_to_array(fields)
        failures += fails
        if level + 1 < len(pyramid):
            fine_grid = pyramid[level + 1].grid
            fields = _array_to_fields(level_stack.grid, x)
            x = _fields_to_array([prolong(f, fine_grid) for f in fields])
    final_fields = _array_to_fields(pyramid[-1].grid, x)
    return SolveReport(
        spec=spec,
        options=opts,
        traces=traces,
        fields=final_fields,
        fevals=counters.fevals,
        gevals=counters.gevals,
        elapsed=time.perf_counter() - t0,
        line_search_failures=failures,
    )
