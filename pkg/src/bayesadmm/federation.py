"""Round engines for six federated methods, plus fixed-point verifiers.

All the distribution-valued engines share one server combine,

    lam_g <- (1 - alpha) * mean(lam_k) + alpha * (eta_0 + sum_k eta_k),

with alpha = 1/(1 + rho K); PVI is the alpha = 1 case with no proximal pull.
They differ in the client subproblem's KL weight and in which coordinates the
dual update uses: natural-parameter differences (the Bayesian engines),
expectation-parameter differences (the Bregman variant), or a damped
natural-parameter step (PVI).  Client steps within a round are independent and
may run on parallel workers; results are reduced in client-id order so the
outcome does not depend on the worker count.

Divergence is a reportable outcome, never silently repaired: engines raise on
family-invalid states and :func:`run_rounds` converts that into a structured
trace event.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EstimatorUnsupported,
    FamilyMismatch,
    NonFiniteUpdate,
    NonPositivePrecision,
    NonPositiveServerPrecision,
    PrecisionEscape,
    ResultNotInFamily,
)
from .families import (
    DIAG,
    ISOTROPIC,
    Array,
    DualVec,
    Family,
    NatParam,
    dual_axpy,
    dual_from_jsonable,
    dual_inf_norm,
    dual_scale,
    dual_sum,
    dual_to_jsonable,
    dual_zero,
    exp_sub,
    family_from_jsonable,
    family_to_jsonable,
    nat_from_jsonable,
    nat_sub,
    nat_to_jsonable,
    to_expectation,
    to_natural,
)
from .losses import (
    Analytic,
    Delta,
    Estimator,
    LinearInT,
    LossSpec,
    MonteCarlo,
    Quadratic,
    Reparam,
    conjugate_coefficient,
    loss_from_jsonable,
    loss_grad,
    loss_to_jsonable,
    natural_gradient,
    scale_loss,
)
from .solvers import (
    IvonConfig,
    SubproblemSpec,
    solve_admm_client,
    solve_conjugate,
    solve_ivon,
    solve_von,
)

METHODS = ("admm", "bayes_admm", "pvi", "bregman_admm", "ivon_admm", "fedavg")


# ---------------------------------------------------------------------------
# state and configuration
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    """Per-client state; Bayesian engines use (lam, eta), point engines (theta, v)."""

    id: int
    loss: LossSpec
    n_examples: int
    lam: NatParam | None = None
    eta: DualVec | None = None
    theta: Array | None = None
    v: Array | None = None


@dataclass
class ServerState:
    rho: float
    K: int
    gamma: float | None = None  # dual step; defaults to rho
    tau: float = 1.0
    fam: Family | None = None
    lam_g: NatParam | None = None
    eta0: DualVec | None = None
    theta_g: Array | None = None
    delta: float = 1.0  # regularizer precision for the point engines
    l0: LossSpec | None = None  # non-quadratic regularizer forces the inner-solve server
    alpha_override: float | None = None

    def __post_init__(self):
        if self.rho <= 0 or self.K < 1 or self.tau <= 0:
            raise ValueError("need rho > 0, tau > 0 and K >= 1")

    @property
    def alpha(self) -> float:
        """Server mixing weight 1/(1 + rho K) unless explicitly pinned."""
        if self.alpha_override is not None:
            return self.alpha_override
        return 1.0 / (1.0 + self.rho * self.K)

    @property
    def dual_step(self) -> float:
        return self.rho if self.gamma is None else self.gamma


@dataclass(frozen=True)
class InnerConfig:
    """Client-solver choice and tolerances."""

    solver: str = "auto"  # conjugate | von | prox | ivon | auto
    steps: int = 500
    beta: float = 0.5
    tol: float = 1e-8
    lr: float | None = None  # point proximal step only
    estimator: str = "auto"  # analytic | delta | mc | reparam | auto
    mc_count: int = 64
    ivon: IvonConfig = field(default_factory=IvonConfig)


@dataclass(frozen=True)
class MethodConfig:
    method: str
    inner: InnerConfig = field(default_factory=InnerConfig)
    delta_method: bool = False
    damping: float = 1.0  # pvi dual damping
    local_steps: int = 10  # fedavg
    lr: float = 0.1  # fedavg
    client_repeats: int = 1
    repeat_tol: float = 0.0  # > 0 stops repeats once the dual stops moving
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.client_repeats < 1:
            raise ValueError("client_repeats must be >= 1")


def seed_for(base: int, rnd: int, client_id: int) -> int:
    """Deterministic per-client seed: a hash mix of (base, round, client)."""
    return int(np.random.SeedSequence((base, rnd, client_id)).generate_state(1)[0])


def resolve_estimator(inner: InnerConfig, loss: LossSpec, seed: int) -> Estimator:
    name = inner.estimator
    if name == "auto":
        name = "analytic" if isinstance(loss, (Quadratic, LinearInT)) else "delta"
    if name == "analytic":
        return Analytic()
    if name == "delta":
        return Delta()
    if name == "mc":
        return MonteCarlo(inner.mc_count, seed)
    if name == "reparam":
        return Reparam(inner.mc_count, seed)
    raise ValueError(f"unknown estimator {inner.estimator!r}")


def init_bayes_states(
    prior: NatParam,
    losses: list[LossSpec],
    n_examples: list[int],
    rho: float,
    gamma: float | None = None,
    tau: float = 1.0,
    alpha_override: float | None = None,
) -> tuple[ServerState, list[ClientState]]:
    """Server at the prior, duals at zero."""
    fam = prior.fam
    server = ServerState(
        rho=rho,
        K=len(losses),
        gamma=gamma,
        tau=tau,
        fam=fam,
        lam_g=prior,
        eta0=prior.as_dual(),
        alpha_override=alpha_override,
    )
    clients = [
        ClientState(i, loss, n, lam=prior, eta=dual_zero(fam))
        for i, (loss, n) in enumerate(zip(losses, n_examples))
    ]
    return server, clients


def init_point_states(
    dim: int,
    losses: list[LossSpec],
    n_examples: list[int],
    rho: float,
    delta: float = 1.0,
) -> tuple[ServerState, list[ClientState]]:
    server = ServerState(rho=rho, K=len(losses), theta_g=np.zeros(dim), delta=delta)
    clients = [
        ClientState(i, loss, n, theta=np.zeros(dim), v=np.zeros(dim))
        for i, (loss, n) in enumerate(zip(losses, n_examples))
    ]
    return server, clients


def _map_clients(fn, clients: list[ClientState], workers: int) -> list:
    """Apply fn to every client; results come back in client-list order."""
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


# ---------------------------------------------------------------------------
# shared server combine
# ---------------------------------------------------------------------------


def server_combine(
    lam_ks: list[NatParam], eta_ks: list[DualVec], eta0: DualVec, alpha: float
) -> NatParam:
    """lam_g = (1 - alpha) mean(lam_k) + alpha (eta_0 + sum eta_k), id order, Kahan sums."""
    gathered = dual_sum([eta0] + list(eta_ks))
    mean_lam = dual_scale(1.0 / len(lam_ks), dual_sum([lam.as_dual() for lam in lam_ks]))
    return NatParam.from_dual(dual_axpy(alpha, gathered, dual_scale(1.0 - alpha, mean_lam)))


# ---------------------------------------------------------------------------
# Bayesian client step (shared by bayes/bregman/pvi)
# ---------------------------------------------------------------------------


def _effective_inner(cfg: MethodConfig) -> InnerConfig:
    """The delta method replaces any sampling estimator with point evaluation."""
    inner = cfg.inner
    if cfg.delta_method and inner.estimator in ("auto", "mc", "reparam"):
        inner = replace(inner, estimator="delta")
    return inner


def _solve_client(
    spec: SubproblemSpec, inner: InnerConfig, cfg: MethodConfig, seed: int
) -> tuple[NatParam, dict]:
    solver = inner.solver
    loss = spec.loss
    if solver == "auto":
        try:
            conjugate_coefficient(scale_loss(loss, spec.tau), spec.lam_g.fam)
            solver = "conjugate"
        except (EstimatorUnsupported, FamilyMismatch):
            if spec.lam_g.fam.kind == ISOTROPIC and cfg.delta_method:
                solver = "prox"
            else:
                solver = "von"
    if solver == "conjugate":
        return solve_conjugate(spec), {"converged": True, "grad_norm": 0.0}
    if solver == "prox":
        # Isotropic family with the delta method: the subproblem collapses to
        # the classical proximal step on the mean.
        if spec.lam_g.fam.kind != ISOTROPIC:
            raise FamilyMismatch("prox inner solver requires the isotropic family")
        res = solve_admm_client(
            scale_loss(loss, spec.tau),
            spec.eta.b1,
            spec.lam_g.m,
            spec.rho,
            steps=inner.steps,
            lr=inner.lr,
            tol=inner.tol,
        )
        lam = NatParam(spec.lam_g.fam, res.theta)
        return lam, {"converged": res.converged, "grad_norm": res.grad_norm}
    if solver == "von":
        est = resolve_estimator(inner, loss, seed)
        res = solve_von(spec, steps=inner.steps, beta=inner.beta, estimator=est, tol=inner.tol)
        return res.lam, {"converged": res.converged, "grad_norm": res.grad_norm}
    raise ValueError(f"unknown inner solver {inner.solver!r}")


def _distribution_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: MethodConfig,
    rnd: int,
    base_seed: int,
    kl_weight: float,
    dual_step: float,
    dual_in_mu: bool,
    alpha: float,
) -> dict:
    """One generic round: client solves, dual updates, shared server combine."""
    lam_g = server.lam_g
    mu_g = to_expectation(lam_g) if dual_in_mu else None
    inner = _effective_inner(cfg)

    def step(client: ClientState):
        seed = seed_for(base_seed, rnd, client.id)
        eta = client.eta
        lam = client.lam
        info: dict = {}
        for _ in range(cfg.client_repeats):
            spec = SubproblemSpec(client.loss, eta, lam_g, rho=kl_weight, tau=server.tau)
            lam, info = _solve_client(spec, inner, cfg, seed)
            if dual_in_mu:
                direction = exp_sub(to_expectation(lam), mu_g)
            else:
                direction = nat_sub(lam, lam_g)
            new_eta = dual_axpy(dual_step, direction, eta)
            moved = dual_inf_norm(dual_axpy(-1.0, eta, new_eta))
            eta = new_eta
            if cfg.repeat_tol > 0 and moved <= cfg.repeat_tol:
                break
        return lam, eta, info

    results = _map_clients(step, clients, cfg.workers)
    converged = all(r[2].get("converged", True) for r in results)
    for client, (lam, eta, _) in zip(clients, results):
        client.lam = lam
        client.eta = eta
    try:
        server.lam_g = server_combine(
            [c.lam for c in clients], [c.eta for c in clients], server.eta0, alpha
        )
    except NonPositivePrecision as exc:
        raise ResultNotInFamily(f"server combine left the family at round {rnd}: {exc}") from exc
    return {"inner_converged": converged}


def bayes_admm_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Client KL weight rho, dual step gamma (= rho by default) in natural coordinates."""
    return _distribution_round(
        server, clients, cfg, rnd, base_seed,
        kl_weight=server.rho, dual_step=server.dual_step, dual_in_mu=False,
        alpha=server.alpha,
    )


def bregman_admm_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Same as the Bayesian round except the dual moves along mu-differences."""
    return _distribution_round(
        server, clients, cfg, rnd, base_seed,
        kl_weight=server.rho, dual_step=server.dual_step, dual_in_mu=True,
        alpha=server.alpha,
    )


def pvi_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Site-based round: unit KL weight, damped dual, no proximal pull at the server."""
    return _distribution_round(
        server, clients, cfg, rnd, base_seed,
        kl_weight=1.0, dual_step=cfg.damping, dual_in_mu=False,
        alpha=1.0,
    )


# ---------------------------------------------------------------------------
# IVON round (diagonal family)
# ---------------------------------------------------------------------------


def ivon_admm_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Adam-like round: stochastic diagonal solver with temperature rescaling.

    Each client calls the stochastic solver on its mean per-example loss with
    loss scale N_k/(rho tau) and multipliers (tau/N_k) v_k, (tau/N_k) u_k; the
    server combine is the shared closed form, which in (m, s) coordinates is
    exactly elementwise
        s_g = (1-a) Mean(s_k) + a [delta + Sum(u_k)]
        m_g = [(1-a) Mean(s_k m_k) + a Sum(v_k)] / s_g.
    """
    if server.fam.kind != DIAG:
        raise FamilyMismatch("ivon_admm requires the diagonal-precision family")
    lam_g = server.lam_g
    rho, tau, gamma = server.rho, server.tau, server.dual_step

    def step(client: ClientState):
        seed = seed_for(base_seed, rnd, client.id)
        n = max(client.n_examples, 1)
        mean_loss = scale_loss(client.loss, n)
        lscale = n / (rho * tau)
        base = cfg.inner.ivon
        ivon_cfg = IvonConfig(
            steps=base.steps,
            lr=base.lr,
            lr_schedule=base.lr_schedule,
            beta1=base.beta1,
            beta2=base.beta2,
            h0=base.h0,
            batch_size=base.batch_size,
            seed=seed,
        )
        res = solve_ivon(
            mean_loss, lam_g, lscale, (tau / n) * client.eta.v, (tau / n) * client.eta.u, ivon_cfg
        )
        lam = NatParam(lam_g.fam, res.m, res.s)
        eta = dual_axpy(gamma, nat_sub(lam, lam_g), client.eta)
        return lam, eta, {"converged": True}

    results = _map_clients(step, clients, cfg.workers)
    for client, (lam, eta, _) in zip(clients, results):
        client.lam = lam
        client.eta = eta
    try:
        server.lam_g = server_combine(
            [c.lam for c in clients], [c.eta for c in clients], server.eta0, server.alpha
        )
    except NonPositivePrecision as exc:
        raise NonPositiveServerPrecision(
            f"server precision became nonpositive at round {rnd}: {exc}"
        ) from exc
    return {"inner_converged": True}


# ---------------------------------------------------------------------------
# point-estimate rounds
# ---------------------------------------------------------------------------


def admm_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Classical consensus round on point estimates."""
    theta_g = server.theta_g
    rho = server.rho
    inner = cfg.inner

    def step(client: ClientState):
        res = solve_admm_client(
            client.loss, client.v, theta_g, rho, steps=inner.steps, lr=inner.lr, tol=inner.tol
        )
        v = client.v + rho * (res.theta - theta_g)
        return res.theta, v, {"converged": res.converged}

    results = _map_clients(step, clients, cfg.workers)
    converged = all(r[2]["converged"] for r in results)
    for client, (theta, v, _) in zip(clients, results):
        client.theta = theta
        client.v = v
    server.theta_g = _admm_server(server, clients, inner)
    return {"inner_converged": converged}


def _admm_server(server: ServerState, clients: list[ClientState], inner: InnerConfig) -> Array:
    thetas = [c.theta for c in clients]
    vs = [c.v for c in clients]
    if server.l0 is not None:
        # Generic regularizer: solve the server objective with its own proximal step.
        res = solve_admm_client(
            server.l0,
            -np.sum(vs, axis=0),
            np.mean(thetas, axis=0),
            server.rho * server.K,
            steps=inner.steps,
            lr=inner.lr,
            tol=inner.tol,
        )
        return res.theta
    sum_v = _kahan_vec(vs)
    sum_t = _kahan_vec(thetas)
    if server.delta == 1.0:
        # Mirrors the distribution-side combine so the two recovery paths agree
        # to rounding.
        alpha = server.alpha
        return alpha * sum_v + (1.0 - alpha) * (sum_t / server.K)
    return (sum_v + server.rho * sum_t) / (server.delta + server.rho * server.K)


def _kahan_vec(arrays: list[Array]) -> Array:
    total = np.zeros_like(arrays[0])
    carry = np.zeros_like(arrays[0])
    for a in arrays:
        y = a - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total


def fedavg_round(
    server: ServerState, clients: list[ClientState], cfg: MethodConfig, rnd: int = 0, base_seed: int = 0
) -> dict:
    """Local gradient steps from the broadcast point, then an N_k-weighted average."""
    theta_g = server.theta_g

    def step(client: ClientState):
        theta = theta_g.copy()
        for _ in range(cfg.local_steps):
            theta = theta - cfg.lr * loss_grad(client.loss, theta)
        return theta, client.v, {"converged": True}

    results = _map_clients(step, clients, cfg.workers)
    for client, (theta, _, _) in zip(clients, results):
        client.theta = theta
    weights = np.array([max(c.n_examples, 1) for c in clients], dtype=float)
    weights /= weights.sum()
    server.theta_g = _kahan_vec([w * c.theta for w, c in zip(weights, clients)])
    return {"inner_converged": True}


ROUND_ENGINES = {
    "admm": admm_round,
    "bayes_admm": bayes_admm_round,
    "pvi": pvi_round,
    "bregman_admm": bregman_admm_round,
    "ivon_admm": ivon_admm_round,
    "fedavg": fedavg_round,
}


# ---------------------------------------------------------------------------
# fixed-point verification
# ---------------------------------------------------------------------------


@dataclass
class FixedPointReport:
    """Residuals of the four stationarity conditions.

    consensus:  max_k || mu_k - mu_g ||_inf
    dual:       max_k || eta_k + grad_mu E_{q_k}[l_k] ||_inf
    gather:     || lam_g - (eta_0 + sum_k eta_k) ||_inf
    dual_map:   roundtrip residual of the lam <-> mu maps at lam_g

    The Lagrangian saddle-point conditions are these same four residuals, so a
    single report serves both formulations.
    """

    consensus: float
    dual: float
    gather: float
    dual_map: float

    def as_dict(self) -> dict:
        return {
            "consensus": self.consensus,
            "dual": self.dual,
            "gather": self.gather,
            "dual_map": self.dual_map,
        }

    @property
    def max_residual(self) -> float:
        return max(self.consensus, self.dual, self.gather, self.dual_map)

    def ok(self, tol: float) -> bool:
        return self.max_residual < tol


def verify_fixed_point(
    server: ServerState,
    clients: list[ClientState],
    estimator: Estimator | str = "auto",
    inner: InnerConfig | None = None,
) -> FixedPointReport:
    """Residuals of the duality conditions at the current states."""
    inner = inner or InnerConfig()
    lam_g = server.lam_g
    mu_g = to_expectation(lam_g)
    consensus = 0.0
    dual = 0.0
    for client in clients:
        mu_k = to_expectation(client.lam)
        consensus = max(consensus, dual_inf_norm(exp_sub(mu_k, mu_g)))
        if isinstance(estimator, str):
            est = resolve_estimator(
                InnerConfig(estimator=estimator, mc_count=inner.mc_count), client.loss, 0
            )
        else:
            est = estimator
        ng = natural_gradient(scale_loss(client.loss, server.tau), client.lam, est)
        dual = max(dual, dual_inf_norm(dual_axpy(1.0, ng, client.eta)))
    gathered = dual_sum([server.eta0] + [c.eta for c in clients])
    gather = dual_inf_norm(dual_axpy(-1.0, gathered, lam_g.as_dual()))
    dual_map = dual_inf_norm(nat_sub(to_natural(mu_g), lam_g))
    return FixedPointReport(consensus, dual, gather, dual_map)


# ---------------------------------------------------------------------------
# run driver
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    records: list[dict]
    diverged: bool
    event: dict | None
    server: ServerState
    clients: list[ClientState]

    @property
    def rounds_completed(self) -> int:
        return len(self.records)


def _check_finite_states(server: ServerState, clients: list[ClientState]) -> None:
    def finite(arr) -> bool:
        return arr is None or bool(np.all(np.isfinite(arr)))

    if server.lam_g is not None and not (
        finite(server.lam_g.m) and finite(server.lam_g.prec)
    ):
        raise NonFiniteUpdate("server natural parameter is non-finite")
    if not finite(server.theta_g):
        raise NonFiniteUpdate("server point estimate is non-finite")
    for c in clients:
        if c.lam is not None and not (finite(c.lam.m) and finite(c.lam.prec)):
            raise NonFiniteUpdate(f"client {c.id} natural parameter is non-finite")
        if c.eta is not None and not (finite(c.eta.b1) and finite(c.eta.b2)):
            raise NonFiniteUpdate(f"client {c.id} dual is non-finite")
        if not (finite(c.theta) and finite(c.v)):
            raise NonFiniteUpdate(f"client {c.id} point state is non-finite")


def run_rounds(
    server: ServerState,
    clients: list[ClientState],
    cfg: MethodConfig,
    n_rounds: int,
    base_seed: int = 0,
    metrics_fn=None,
    stop_fn=None,
) -> RunResult:
    """Drive an engine for up to ``n_rounds``; divergence becomes a trace event."""
    engine = ROUND_ENGINES[cfg.method]
    records: list[dict] = []
    first_event: dict | None = None
    for rnd in range(n_rounds):
        try:
            info = engine(server, clients, cfg, rnd, base_seed)
            _check_finite_states(server, clients)
        except (ResultNotInFamily, NonPositiveServerPrecision, NonFiniteUpdate, PrecisionEscape) as exc:
            event = first_event or {
                "type": "divergence",
                "round": rnd,
                "method": cfg.method,
                "reason": type(exc).__name__,
                "detail": str(exc),
            }
            return RunResult(records, True, event, server, clients)
        record = {"round": rnd, "method": cfg.method, **info}
        if metrics_fn is not None:
            metric_values = metrics_fn(server, clients)
            bad = [
                k
                for k, val in metric_values.items()
                if isinstance(val, float) and not math.isfinite(val)
            ]
            if bad and first_event is None:
                # Non-finite metrics are a reportable divergence, but the
                # states are still valid, so the run itself continues; only
                # state-level failures above are terminal.
                first_event = {
                    "type": "divergence",
                    "round": rnd,
                    "method": cfg.method,
                    "reason": "NonFiniteMetric",
                    "detail": f"non-finite metrics: {bad}",
                }
            record.update(metric_values)
        records.append(record)
        if stop_fn is not None and stop_fn(server, clients, record):
            break
    return RunResult(records, first_event is not None, first_event, server, clients)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_jsonable(server: ServerState, clients: list[ClientState], method: str) -> dict:
    out: dict = {"method": method, "rho": server.rho, "gamma": server.gamma, "tau": server.tau,
                 "K": server.K, "delta": server.delta}
    if server.alpha_override is not None:
        out["alpha_override"] = server.alpha_override
    if server.fam is not None:
        out["family"] = family_to_jsonable(server.fam)
        out["lam_g"] = nat_to_jsonable(server.lam_g)
        out["eta0"] = dual_to_jsonable(server.eta0)
    if server.theta_g is not None:
        out["theta_g"] = server.theta_g.tolist()
    records = []
    for c in clients:
        rec: dict = {"id": c.id, "n_examples": c.n_examples, "loss": loss_to_jsonable(c.loss)}
        if c.lam is not None:
            rec["lam"] = nat_to_jsonable(c.lam)
            rec["eta"] = dual_to_jsonable(c.eta)
        if c.theta is not None:
            rec["theta"] = c.theta.tolist()
            rec["v"] = c.v.tolist()
        records.append(rec)
    out["clients"] = records
    return out


def checkpoint_from_jsonable(data: dict) -> tuple[ServerState, list[ClientState], str]:
    fam = family_from_jsonable(data["family"]) if "family" in data else None
    server = ServerState(
        rho=float(data["rho"]),
        K=int(data["K"]),
        gamma=data.get("gamma"),
        tau=float(data.get("tau", 1.0)),
        fam=fam,
        lam_g=nat_from_jsonable(fam, data["lam_g"]) if fam else None,
        eta0=dual_from_jsonable(fam, data["eta0"]) if fam else None,
        theta_g=np.asarray(data["theta_g"], dtype=float) if "theta_g" in data else None,
        delta=float(data.get("delta", 1.0)),
        alpha_override=data.get("alpha_override"),
    )
    clients = []
    for rec in data["clients"]:
        loss = loss_from_jsonable(rec["loss"])
        client = ClientState(int(rec["id"]), loss, int(rec["n_examples"]))
        if "lam" in rec:
            client.lam = nat_from_jsonable(fam, rec["lam"])
            client.eta = dual_from_jsonable(fam, rec["eta"])
        if "theta" in rec:
            client.theta = np.asarray(rec["theta"], dtype=float)
            client.v = np.asarray(rec["v"], dtype=float)
        clients.append(client)
    return server, clients, data.get("method", "bayes_admm")
