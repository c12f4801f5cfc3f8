"""Inner solvers for the client subproblem and the classical proximal step.

The Bayesian client subproblem is

    min_mu  L(mu) + <eta, mu> + rho * KL(q || q_g),

whose stationarity condition reads  grad_mu L + eta + rho * (lam - lam_g) = 0.
``solve_conjugate`` exploits it in closed form for T-linear losses,
``solve_von`` runs natural-gradient descent on it, and ``solve_ivon`` is the
stochastic diagonal-Gaussian variant with the two extra Lagrange-multiplier
terms.  ``solve_admm_client`` is the classical point-estimate proximal step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EstimatorUnsupported,
    FamilyMismatch,
    NonFiniteUpdate,
    NonPositivePrecision,
    PrecisionEscape,
    ResultNotInFamily,
)
from .families import (
    DIAG,
    Array,
    DualVec,
    NatParam,
    dual_axpy,
    dual_inf_norm,
    nat_sub,
)
from .losses import (
    Analytic,
    Estimator,
    LinearInT,
    Logistic,
    LossSpec,
    MulticlassLogistic,
    Quadratic,
    conjugate_coefficient,
    loss_grad,
    natural_gradient,
    scale_loss,
)

# ---------------------------------------------------------------------------
# client subproblem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubproblemSpec:
    """One client subproblem: loss, incoming dual, server parameter, step sizes.

    ``tau`` tempers the data loss (the loss is divided by it); the linear dual
    term is never tempered.
    """

    loss: LossSpec
    eta: DualVec
    lam_g: NatParam
    rho: float
    tau: float = 1.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.eta.fam != self.lam_g.fam:
            raise FamilyMismatch("eta and lam_g families differ")

    def tempered_loss(self) -> LossSpec:
        return scale_loss(self.loss, self.tau)


def solve_conjugate(spec: SubproblemSpec) -> NatParam:
    """Closed-form stationary point for T-linear losses.

    lam = lam_g + (c - eta) / rho, with l = -<c, T>.  The post-update dual
    eta + rho (lam - lam_g) then equals c = -grad L exactly.
    """
    c = conjugate_coefficient(spec.tempered_loss(), spec.lam_g.fam)
    step = dual_axpy(-1.0, spec.eta, c)  # c - eta
    target = dual_axpy(1.0 / spec.rho, step, spec.lam_g.as_dual())
    try:
        return NatParam.from_dual(target)
    except NonPositivePrecision as exc:
        raise ResultNotInFamily(f"conjugate solve left the family: {exc}") from exc


@dataclass
class VonResult:
    lam: NatParam
    converged: bool
    grad_norm: float
    steps: int
    grad_norms: list[float] = field(default_factory=list)


def subproblem_gradient(
    spec: SubproblemSpec,
    lam: NatParam,
    estimator: Estimator,
    tempered: LossSpec | None = None,
) -> DualVec:
    """grad_mu of the client objective at ``lam``."""
    ng = natural_gradient(tempered or spec.tempered_loss(), lam, estimator)
    return dual_axpy(spec.rho, nat_sub(lam, spec.lam_g), dual_axpy(1.0, spec.eta, ng))


def solve_von(
    spec: SubproblemSpec,
    steps: int = 500,
    beta: float = 0.5,
    estimator: Estimator = Analytic(),
    tol: float = 1e-8,
    init: NatParam | None = None,
) -> VonResult:
    """Natural-gradient descent lam <- lam - beta * grad_mu F, started at lam_g.

    If a step leaves the family, beta is halved for that step only (at most 10
    halvings, then :class:`PrecisionEscape`).  Converges linearly on quadratic
    losses with exact moments; ``grad_norms`` records the residual trace.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    lam = spec.lam_g if init is None else init
    tempered = spec.tempered_loss()
    norms: list[float] = []
    gnorm = np.inf
    taken = 0
    for taken in range(steps + 1):
        grad = subproblem_gradient(spec, lam, estimator, tempered)
        gnorm = dual_inf_norm(grad)
        norms.append(gnorm)
        if gnorm <= tol or taken == steps:
            break
        trial = beta
        for _ in range(11):
            try:
                lam = NatParam.from_dual(dual_axpy(-trial, grad, lam.as_dual()))
                break
            except NonPositivePrecision:
                trial *= 0.5
        else:
            raise PrecisionEscape(
                f"iterate left the family at step {taken} and halving did not repair it"
            )
    return VonResult(lam, gnorm <= tol, gnorm, taken, norms)


# ---------------------------------------------------------------------------
# IVON (diagonal Gaussian, stochastic)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IvonConfig:
    """Hyperparameters of the stochastic diagonal solver.

    ``lr`` is the constant step size unless ``lr_schedule`` supplies one value
    per step.  Defaults follow the solver's usual recommendations.
    """

    steps: int = 1000
    lr: float = 0.1
    lr_schedule: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.99999
    h0: float = 0.1
    batch_size: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta1, beta2 must lie in (0, 1)")
        if self.h0 < 0.0:
            raise ValueError("h0 must be >= 0")
        if self.lr_schedule is not None and len(self.lr_schedule) < self.steps:
            raise ValueError("lr_schedule shorter than steps")

    def rate(self, t: int) -> float:
        return self.lr if self.lr_schedule is None else self.lr_schedule[t]


@dataclass(frozen=True)
class IvonState:
    m: Array
    h: Array
    g: Array


def _stochastic_gradient(loss: LossSpec, theta: Array, batch_size, rng) -> Array:
    """Unbiased gradient of the loss as given; subsamples rows for data losses."""
    if (
        batch_size is None
        or not isinstance(loss, (Logistic, MulticlassLogistic))
        or batch_size >= loss.n_examples
    ):
        return loss_grad(loss, theta)
    idx = rng.choice(loss.n_examples, size=batch_size, replace=False)
    lift = loss.n_examples / batch_size
    if isinstance(loss, Logistic):
        sub = Logistic(loss.X[idx], loss.y[idx], loss.scale)
    else:
        sub = MulticlassLogistic(loss.X[idx], loss.y[idx], loss.n_classes, loss.scale)
    return lift * loss_grad(sub, theta)


def _ivon_step(
    state: IvonState,
    theta: Array,
    ghat: Array,
    sigma2: Array,
    lr: float,
    cfg: IvonConfig,
    delta: Array,
    m_p: Array,
    v: Array,
    u: Array,
) -> IvonState:
    """One update given the sampled theta, its stochastic gradient, and the
    sampling variance sigma2 the draw actually used.

    The quadratic correction in the h-recursion bounds the update below by
    (h - delta)/2, so h + delta stays positive whatever hhat is.
    """
    hhat = ghat * (theta - state.m) / sigma2 - u
    g = cfg.beta1 * state.g + (1.0 - cfg.beta1) * ghat
    h = (
        cfg.beta2 * state.h
        + (1.0 - cfg.beta2) * hhat
        + 0.5 * (1.0 - cfg.beta2) ** 2 * (state.h - hhat) ** 2 / (state.h + delta)
    )
    m = state.m - lr * (g + v - u * state.m + delta * (state.m - m_p)) / (h + delta)
    return IvonState(m, h, g)


@dataclass
class IvonResult:
    m: Array
    s: Array  # posterior precision = loss_scale * (h + delta)
    h: Array


def solve_ivon(
    loss: LossSpec,
    prior: NatParam,
    loss_scale: float,
    v: Array,
    u: Array,
    cfg: IvonConfig,
) -> IvonResult:
    """Minimize  loss_scale * E_q[l + v^T theta - theta^T diag(u) theta / 2] + KL(q || prior).

    ``prior`` must be a diagonal-precision parameter (m_p, s_p); internally
    delta = 1 / (loss_scale * sigma_p^2) = s_p / loss_scale, and the returned
    precision is loss_scale * (h + delta).  The Hessian recursion keeps
    h + delta > 0 by construction; non-finite iterates abort with the last
    finite state attached.
    """
    if prior.fam.kind != DIAG:
        raise EstimatorUnsupported("solve_ivon requires a diagonal-precision prior")
    if loss_scale <= 0:
        raise ValueError("loss_scale must be > 0")
    dim = prior.fam.dim
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if v.shape != (dim,) or u.shape != (dim,):
        raise FamilyMismatch("multiplier vectors must match the parameter dimension")
    m_p = prior.m
    delta = prior.prec / loss_scale
    rng = np.random.default_rng(cfg.seed)
    state = IvonState(m_p.copy(), np.full(dim, cfg.h0), np.zeros(dim))
    for t in range(cfg.steps):
        sigma2 = 1.0 / (loss_scale * (state.h + delta))
        theta = state.m + np.sqrt(sigma2) * rng.standard_normal(dim)
        with np.errstate(over="ignore", invalid="ignore"):
            ghat = _stochastic_gradient(loss, theta, cfg.batch_size, rng)
            new = _ivon_step(state, theta, ghat, sigma2, cfg.rate(t), cfg, delta, m_p, v, u)
        if not (np.all(np.isfinite(new.m)) and np.all(np.isfinite(new.h))):
            raise NonFiniteUpdate(
                f"non-finite iterate at step {t}",
                mean=state.m,
                precision=loss_scale * (state.h + delta),
            )
        state = new
    return IvonResult(state.m, loss_scale * (state.h + delta), state.h)


# ---------------------------------------------------------------------------
# classical proximal client step
# ---------------------------------------------------------------------------


@dataclass
class AdmmClientResult:
    theta: Array
    converged: bool
    grad_norm: float
    steps: int


def _gd_lipschitz(loss: LossSpec) -> float:
    """Cheap curvature bound used to pick a safe fixed step size."""
    if isinstance(loss, Logistic):
        gram = loss.X.T @ loss.X
        return 0.25 * float(np.linalg.eigvalsh(gram)[-1]) / loss.scale
    if isinstance(loss, MulticlassLogistic):
        gram = loss.X.T @ loss.X
        return 0.5 * float(np.linalg.eigvalsh(gram)[-1]) / loss.scale
    if isinstance(loss, LinearInT):
        if loss.c.b2 is None:
            return 0.0
        payload = -2.0 * loss.c.b2
        if payload.ndim == 1:
            return float(np.max(np.abs(payload)))
        return float(np.max(np.abs(np.linalg.eigvalsh(payload))))
    return float(np.max(np.abs(np.linalg.eigvalsh(loss.A))))


def solve_admm_client(
    loss: LossSpec,
    v: Array,
    theta_g: Array,
    rho: float,
    steps: int = 500,
    lr: float | None = None,
    tol: float = 1e-8,
) -> AdmmClientResult:
    """Minimize  l(theta) + v^T theta + rho/2 ||theta - theta_g||^2.

    Quadratic losses use the exact solve (A + rho I) theta = rho theta_g - b - v;
    everything else runs fixed-step gradient descent (no line search) with a
    step from a curvature bound.  Hitting the iteration cap returns the best
    iterate with ``converged=False`` rather than raising.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    v = np.asarray(v, dtype=float)
    theta_g = np.asarray(theta_g, dtype=float)
    if isinstance(loss, Quadratic):
        mat = loss.A + rho * np.eye(loss.dim)
        theta = np.linalg.solve(mat, rho * theta_g - loss.b - v)
        grad = loss_grad(loss, theta) + v + rho * (theta - theta_g)
        return AdmmClientResult(theta, True, float(np.max(np.abs(grad))), 0)
    if lr is None:
        lr = 1.0 / (_gd_lipschitz(loss) + rho)
    theta = theta_g.copy()
    best = theta
    best_norm = np.inf
    taken = 0
    for taken in range(steps + 1):
        grad = loss_grad(loss, theta) + v + rho * (theta - theta_g)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < best_norm:
            best, best_norm = theta, gnorm
        if gnorm <= tol or taken == steps:
            break
        theta = theta - lr * grad
    return AdmmClientResult(best, best_norm <= tol, best_norm, taken)
