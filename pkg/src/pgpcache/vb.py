"""Mean-field variational inference with a point estimate of the hyperparameters.

The objective (lower is better, ``-L`` bounds the log evidence)::

    L(mu, sigma, theta) = -dsum' mu + N sum_m exp(mu_m + sigma_m / 2)
                          + 1/2 sum_m (Kinv_mm sigma_m - log sigma_m)
                          + 1/2 (mu' Kinv mu + log det Ktilde)

``sigma`` holds variances.  Optimisation alternates two blocks: successive
pseudo-convex approximation (separable surrogate + Armijo on the true
objective) for ``(mu, sigma)``, and BFGS over ``log theta``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from pgpcache.errors import InvalidInputError, NonConvergenceError, NumericalFailureError
from pgpcache.kernel import (
    HyperParams,
    as_features,
    build_cov,
    diag_of_inverse,
    inverse,
    kernel_matrix,
    solve_with,
    sq_dists,
    trace_products,
)
from pgpcache.posterior import RequestMatrix

log = logging.getLogger(__name__)

# log-hyperparameters are kept inside this box; beyond it the kernel is
# numerically degenerate anyway
LOG_THETA_BOUND = 25.0
_MAX_NEWTON_STEP = 5.0


@dataclass(frozen=True)
class VbConfig:
    outer_tol: float = 1e-6
    max_outer: int = 100
    spca_tol: float = 1e-10
    max_spca: int = 50
    armijo_gamma: float = 0.5
    armijo_eta: float = 1e-4
    max_backtracks: int = 50
    wolfe_c2: float = 0.9
    newton_tol: float = 1e-10
    max_newton: int = 100
    bfgs_gtol: float = 1e-6
    bfgs_ftol: float = 1e-12
    max_bfgs: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("outer_tol", "spca_tol", "newton_tol", "bfgs_gtol"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")
        for name in ("armijo_gamma", "armijo_eta", "wolfe_c2"):
            if not 0 < getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class VariationalPosterior:
    mu: np.ndarray
    sigma: np.ndarray
    theta: HyperParams
    elbo_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    status: str = "init"
    stalled: bool = False
    history: tuple = ()

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != sigma.shape:
            raise InvalidInputError("mu and sigma must have the same length")
        # sigma = 0 (a point mass) is accepted for prediction; fitted posteriors have sigma > 0
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise InvalidInputError("variational variances must be finite and >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "elbo_trace", np.asarray(self.elbo_trace, dtype=float))

    @property
    def n_contents(self) -> int:
        return self.mu.size


class _Objective:
    """Shared evaluation of L; data enter through per-content totals only."""

    def __init__(self, data: RequestMatrix, features):
        x = as_features(features)
        if x.shape[0] != data.n_contents:
            raise InvalidInputError(f"{data.n_contents} request rows but {x.shape[0]} feature rows")
        self.totals = data.totals
        self.n_slots = data.n_slots
        self.dists = sq_dists(x)
        self.n_features = x.shape[1]
        self._cache_key = None
        self._cache = None

    def factor(self, hp: HyperParams):
        """``(CovFactor, diag(Kinv))`` for ``hp``; recomputed only when ``hp`` changes."""
        key = hp.theta.tobytes()
        if key != self._cache_key:
            cf = build_cov(None, hp, dists=self.dists)
            self._cache = (cf, diag_of_inverse(cf))
            self._cache_key = key
        return self._cache

    def value(self, mu, sigma, cf, kdiag) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            val = (-self.totals @ mu
                   + self.n_slots * np.sum(np.exp(mu + 0.5 * sigma))
                   + 0.5 * np.sum(kdiag * sigma - np.log(sigma))
                   + 0.5 * (mu @ solve_with(cf, mu) + cf.logdet))
        return float(val) if np.isfinite(val) else np.inf

    def var_grad(self, mu, sigma, cf, kdiag):
        kinv_mu = solve_with(cf, mu)
        with np.errstate(over="ignore"):
            e = self.n_slots * np.exp(mu + 0.5 * sigma)
        g_mu = -self.totals + e + kinv_mu
        g_sigma = 0.5 * e + 0.5 * kdiag - 0.5 / sigma
        return g_mu, g_sigma, kinv_mu

    def hyper_value_and_grad(self, phi, mu, sigma):
        """L and its gradient in ``phi = log theta`` with ``(mu, sigma)`` frozen."""
        phi = np.asarray(phi, dtype=float)
        if np.any(np.abs(phi) > LOG_THETA_BOUND):
            return np.inf, np.full(phi.size, np.nan)
        hp = HyperParams.from_log(phi)
        kmat = kernel_matrix(None, hp, self.dists)
        try:
            cf = build_cov(None, hp, dists=self.dists, kmat=kmat)
        except NumericalFailureError:
            return np.inf, np.full(phi.size, np.nan)
        kinv = inverse(cf)
        a = kinv @ mu
        kdiag = np.diag(kinv).copy()
        with np.errstate(over="ignore", invalid="ignore"):
            val = (-self.totals @ mu
                   + self.n_slots * np.sum(np.exp(mu + 0.5 * sigma))
                   + 0.5 * np.sum(kdiag * sigma - np.log(sigma))
                   + 0.5 * (mu @ a + cf.logdet))
        # dL/dphi_q = 1/2 sum(W * dK_q),  W = Kinv - Kinv diag(sigma) Kinv - a a'
        w = kinv - (kinv * sigma) @ kinv - np.outer(a, a)
        grad = 0.5 * trace_products(w, hp, self.dists, kmat)
        return (float(val) if np.isfinite(val) else np.inf), grad


def _newton_root(fun, x0, tol, max_iter, what, lo=None, hi=None):
    """Vectorised safeguarded Newton for increasing scalar functions.

    ``fun(x) -> (g, dg)`` with ``dg > 0``.  Each coordinate keeps its own
    sign bracket, optionally seeded by ``lo`` / ``hi``, and falls back to
    bisection when a Newton step leaves it.  Steps are length-capped only
    while the bracket is open.  Finished coordinates are frozen, so results
    do not depend on how many coordinates are solved together.
    """
    x = np.array(x0, dtype=float)
    lo = np.full(x.shape, -np.inf) if lo is None else np.array(lo, dtype=float)
    hi = np.full(x.shape, np.inf) if hi is None else np.array(hi, dtype=float)
    x = np.clip(x, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
    dx = dx_old = hi - lo
    for _ in range(max_iter):
        g, dg = fun(x)
        done = np.abs(g) < tol
        lo = np.where(g < 0, np.maximum(lo, x), lo)
        hi = np.where(g > 0, np.minimum(hi, x), hi)
        # bracket collapsed to rounding level: nothing left to gain
        done |= (hi - lo) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
        if np.all(done):
            return x
        closed = np.isfinite(lo) & np.isfinite(hi)
        with np.errstate(invalid="ignore"):
            step = -g / dg
        step = np.where(closed, step, np.clip(step, -_MAX_NEWTON_STEP, _MAX_NEWTON_STEP))
        new = x + step
        # bisect when Newton leaves the bracket or shrinks slower than bisection would
        slow = np.abs(2 * g) > np.abs(dx_old * dg)
        bisect = closed & ((new <= lo) | (new >= hi) | slow | ~np.isfinite(new))
        new = np.where(bisect, 0.5 * (lo + hi), new)
        dx_old, dx = dx, np.abs(new - x)
        x = np.where(done, x, new)
    g, _ = fun(x)
    raise NonConvergenceError(
        f"{what} Newton solve did not converge in {max_iter} iterations "
        f"(max |gradient| {np.max(np.abs(g)):.3g})",
        grad_norm=float(np.max(np.abs(g))),
    )


def solve_mu_scalar(dsum, scale, kdiag, coupling, x0=None, tol=1e-10, max_iter=100):
    """Minimise ``-dsum mu + scale exp(mu) + kdiag mu^2 / 2 + coupling mu`` coordinate-wise.

    In the SPCA surrogate ``scale = N exp(sigma_prev / 2)``, which makes the
    surrogate's gradient match the true objective at the expansion point.
    """
    dsum, scale, kdiag, coupling = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (dsum, scale, kdiag, coupling)))
    if np.any(kdiag <= 0) or np.any(scale < 0):
        raise InvalidInputError("need a quadratic coefficient > 0 and scale >= 0")
    x0 = np.zeros(dsum.shape) if x0 is None else x0
    # root bracket: kdiag mu <= dsum - coupling, and scale exp(mu) <= scale for mu <= 0
    net = dsum - coupling
    lo = np.minimum(0.0, (net - scale) / kdiag) - 1.0
    hi = np.maximum(0.0, net / kdiag) + 1.0

    def fun(mu):
        with np.errstate(over="ignore"):
            e = scale * np.exp(mu)
        return -dsum + e + kdiag * mu + coupling, e + kdiag

    return _newton_root(fun, x0, tol, max_iter, "mean", lo, hi)


def solve_sigma_scalar(rate, kdiag, x0=None, tol=1e-10, max_iter=100):
    """Minimise ``rate exp(sigma / 2) + (kdiag sigma - log sigma) / 2`` over ``sigma > 0``.

    ``rate`` is ``N exp(mu)``.  Newton runs in ``tau = log sigma``, which keeps
    the iterate positive; the derivative in ``tau`` is monotone.
    """
    rate, kdiag = np.broadcast_arrays(np.asarray(rate, dtype=float), np.asarray(kdiag, dtype=float))
    if np.any(kdiag <= 0) or np.any(rate < 0):
        raise InvalidInputError("need kdiag > 0 and rate >= 0")
    tau0 = -np.log(rate + kdiag) if x0 is None else np.log(x0)

    def fun(tau):
        with np.errstate(over="ignore"):
            s = np.exp(tau)
            e = 0.5 * rate * np.exp(0.5 * s)
        lin = s * (e + 0.5 * kdiag)
        return lin - 0.5, lin + 0.5 * s * s * e

    return np.exp(_newton_root(fun, tau0, tol, max_iter, "variance"))


def _spca_iteration(obj, mu, sigma, cf, kdiag, l0, cfg):
    """One surrogate-minimise / Armijo step.  Returns ``(mu, sigma, L, status)``.

    ``status`` is ``"step"``, ``"stationary"`` or ``"stalled"``.
    """
    g_mu, g_sigma, kinv_mu = obj.var_grad(mu, sigma, cf, kdiag)
    coupling = kinv_mu - kdiag * mu
    with np.errstate(over="ignore"):
        scale = obj.n_slots * np.exp(0.5 * sigma)
    mu_bar = solve_mu_scalar(obj.totals, scale, kdiag, coupling, x0=mu,
                             tol=cfg.newton_tol, max_iter=cfg.max_newton)
    with np.errstate(over="ignore"):
        rate = obj.n_slots * np.exp(mu)
    sigma_bar = solve_sigma_scalar(rate, kdiag, x0=sigma, tol=cfg.newton_tol,
                                   max_iter=cfg.max_newton)
    d_mu = mu_bar - mu
    d_sigma = sigma_bar - sigma
    slope = g_mu @ d_mu + g_sigma @ d_sigma
    if not slope < -1e-15 * max(1.0, abs(l0)):
        return mu, sigma, l0, "stationary"
    s = 1.0
    for _ in range(cfg.max_backtracks):
        mu_new = mu + s * d_mu
        sigma_new = sigma + s * d_sigma
        l1 = obj.value(mu_new, sigma_new, cf, kdiag)
        if l1 <= l0 + cfg.armijo_eta * s * slope:
            return mu_new, sigma_new, l1, "step"
        s *= cfg.armijo_gamma
    return mu, sigma, l0, "stalled"


def _spca_block(obj, mu, sigma, hp, cfg):
    cf, kdiag = obj.factor(hp)
    value = obj.value(mu, sigma, cf, kdiag)
    stalled = False
    for _ in range(cfg.max_spca):
        mu, sigma, new_value, status = _spca_iteration(obj, mu, sigma, cf, kdiag, value, cfg)
        if status != "step":
            stalled = status == "stalled"
            value = new_value
            break
        decrease = value - new_value
        value = new_value
        if decrease <= cfg.spca_tol * max(1.0, abs(value)):
            break
    return mu, sigma, value, stalled


def spca_variational_step(vp: VariationalPosterior, data: RequestMatrix, features,
                          cfg: VbConfig | None = None) -> VariationalPosterior:
    """A single SPCA iteration on ``(mu, sigma)`` at fixed ``theta``."""
    cfg = cfg or VbConfig()
    obj = _Objective(data, features)
    cf, kdiag = obj.factor(vp.theta)
    l0 = obj.value(vp.mu, vp.sigma, cf, kdiag)
    mu, sigma, l1, status = _spca_iteration(obj, vp.mu, vp.sigma, cf, kdiag, l0, cfg)
    return replace(vp, mu=mu, sigma=sigma, stalled=status == "stalled",
                   elbo_trace=np.append(vp.elbo_trace, l1))


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    hess: np.ndarray
    n_iter: int
    stalled: bool
    n_updates: int = 0
    n_skipped: int = 0


def bfgs_minimize(fun, x0, max_iter=50, gtol=1e-6, ftol=0.0, armijo_gamma=0.5,
                  armijo_eta=1e-4, c2=0.9, max_backtracks=50, hess0=None,
                  callback=None) -> BfgsResult:
    """BFGS on a Hessian approximation ``H`` with Armijo backtracking.

    The update ``H + yy'/y's - Hss'H/s'Hs`` is applied only when the
    curvature condition ``y's > (c2 - 1) g's`` holds, which keeps ``H``
    symmetric positive definite; otherwise the update is skipped.
    ``callback(x, f, H)`` runs after every accepted step.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    n = x.size
    h = np.eye(n) if hess0 is None else np.array(hess0, dtype=float)
    scaled = hess0 is not None
    if not np.isfinite(f):
        return BfgsResult(x, f, g, h, 0, True)
    updates = skipped = 0
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            it -= 1
            break
        try:
            p = -linalg.cho_solve(linalg.cho_factor(h), g)
        except linalg.LinAlgError:
            h = np.eye(n)
            p = -g
        slope = g @ p
        if not slope < 0:
            h = np.eye(n)
            p = -g
            slope = g @ p
        step = 1.0
        for _ in range(max_backtracks):
            x_new = x + step * p
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo_eta * step * slope:
                break
            step *= armijo_gamma
        else:
            return BfgsResult(x, f, g, h, it, True, updates, skipped)
        s = x_new - x
        y = g_new - g
        ys = y @ s
        if ys > (c2 - 1.0) * (g @ s) and ys > 0:
            if not scaled:
                h = (y @ y) / ys * np.eye(n)
                scaled = True
            hs = h @ s
            h = h + np.outer(y, y) / ys - np.outer(hs, hs) / (s @ hs)
            h = 0.5 * (h + h.T)
            updates += 1
        else:
            skipped += 1
        f_old = f
        x, f, g = x_new, f_new, g_new
        if callback is not None:
            callback(x, f, h)
        if f_old - f <= ftol * max(1.0, abs(f)):
            break
    return BfgsResult(x, f, g, h, it, False, updates, skipped)


def _hyper_block(obj, mu, sigma, hp, cfg):
    res = bfgs_minimize(
        lambda phi: obj.hyper_value_and_grad(phi, mu, sigma),
        hp.to_log(),
        max_iter=cfg.max_bfgs, gtol=cfg.bfgs_gtol, ftol=cfg.bfgs_ftol,
        armijo_gamma=cfg.armijo_gamma, armijo_eta=cfg.armijo_eta, c2=cfg.wolfe_c2,
        max_backtracks=cfg.max_backtracks,
    )
    return HyperParams.from_log(res.x), res.fun, res.stalled


def bfgs_hyper_step(vp: VariationalPosterior, data: RequestMatrix, features,
                    cfg: VbConfig | None = None) -> HyperParams:
    """Minimise L over ``log theta`` with ``(mu, sigma)`` held fixed."""
    cfg = cfg or VbConfig()
    obj = _Objective(data, features)
    return _hyper_block(obj, vp.mu, vp.sigma, vp.theta, cfg)[0]


def initial_posterior(data: RequestMatrix, n_features: int) -> VariationalPosterior:
    mu = np.log((data.totals + 0.5) / data.n_slots)
    alpha0 = max(float(np.var(mu)), 1e-2)
    theta = HyperParams(0.1, [alpha0] + [1.0 / n_features] * n_features)
    return VariationalPosterior(mu, np.full(mu.size, 1.0 / data.n_slots), theta)


def elbo_objective(vp: VariationalPosterior, data: RequestMatrix, features,
                   include_constants: bool = False) -> float:
    """L at ``vp``.

    With ``include_constants`` the dropped terms ``sum log d! - M/2`` are added
    back, making ``-L`` a true lower bound on ``log p(D | theta)``.
    """
    obj = _Objective(data, features)
    if vp.n_contents != data.n_contents:
        raise InvalidInputError("posterior and data sizes differ")
    cf, kdiag = obj.factor(vp.theta)
    value = obj.value(vp.mu, vp.sigma, cf, kdiag)
    if include_constants:
        value += float(np.sum(gammaln(data.counts + 1.0))) - 0.5 * vp.n_contents
    return value


def fit(data: RequestMatrix, features, cfg: VbConfig | None = None,
        init: VariationalPosterior | None = None) -> VariationalPosterior:
    """Block-coordinate descent: SPCA on ``(mu, sigma)``, then BFGS on ``theta``, repeated.

    ``status`` is ``"converged"``, ``"max_outer"`` or ``"stalled"`` (both
    blocks stalled in the same outer iteration: converged with a warning).
    """
    cfg = cfg or VbConfig()
    obj = _Objective(data, features)
    vp = init or initial_posterior(data, obj.n_features)
    if vp.n_contents != data.n_contents:
        raise InvalidInputError("initial posterior does not match the data")
    mu, sigma, hp = vp.mu, vp.sigma, vp.theta
    cf, kdiag = obj.factor(hp)
    value = obj.value(mu, sigma, cf, kdiag)
    trace = [value]
    history = [(0, "init", value, hp.theta)]
    status = "max_outer"
    for outer in range(1, cfg.max_outer + 1):
        start = value
        mu, sigma, value, stalled_var = _spca_block(obj, mu, sigma, hp, cfg)
        trace.append(value)
        history.append((outer, "variational", value, hp.theta))
        hp, value, stalled_hyp = _hyper_block(obj, mu, sigma, hp, cfg)
        trace.append(value)
        history.append((outer, "hyper", value, hp.theta))
        if stalled_var and stalled_hyp:
            status = "stalled"
            log.warning("both VB blocks stalled at outer iteration %d", outer)
            break
        if start - value <= cfg.outer_tol * max(abs(value), 1e-12):
            status = "converged"
            break
    return VariationalPosterior(mu, sigma, hp, np.array(trace), status, False, tuple(history))


def vb_mean_rates(vp: VariationalPosterior) -> np.ndarray:
    """Expected next-slot count per content: ``exp(mu + sigma / 2)``."""
    return np.exp(vp.mu + 0.5 * vp.sigma)


def write_trace_csv(vp: VariationalPosterior, path) -> None:
    if not vp.history:
        raise InvalidInputError("posterior carries no optimisation history")
    n_alpha = vp.theta.alphas.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_iter", "block", "L", "theta_eta"]
                   + [f"theta_alpha_{q}" for q in range(n_alpha)])
        for outer, block, value, theta in vp.history:
            w.writerow([outer, block, repr(float(value))] + [repr(float(t)) for t in theta])
