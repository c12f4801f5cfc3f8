"""Client losses: analytic calculus, expected moments under Gaussian q, natural gradients.

Expected gradients/Hessians feed the natural-gradient identity

    grad_mu E_q[l] = (g - H m, H/2),   g = E_q[grad l],  H = E_q[hess l],

with the second block dropped for the fixed-covariance families (where the
expectation coordinate is just the mean and the natural gradient is ``g``).
Temperature enters by dividing the data loss, never the linear dual terms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logsumexp, log_expit

from .errors import DimensionMismatch, EstimatorUnsupported, FamilyMismatch
from .families import (
    DIAG,
    FIXED,
    FULL,
    ISOTROPIC,
    Array,
    DualVec,
    Family,
    NatParam,
    pair_with_stat,
    sample,
)

# ---------------------------------------------------------------------------
# loss specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quadratic:
    """l(theta) = 0.5 theta^T A theta + b^T theta; A symmetric, PSD not required."""

    A: Array
    b: Array
    n_examples: int = 0

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != (b.size, b.size):
            raise DimensionMismatch(f"A shape {a.shape} incompatible with b of size {b.size}")
        if float(np.max(np.abs(a - a.T))) > 1e-10 * max(1.0, float(np.max(np.abs(a)))):
            raise DimensionMismatch("A must be symmetric")
        object.__setattr__(self, "A", 0.5 * (a + a.T))
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.size


@dataclass(frozen=True)
class LinearInT:
    """l(theta) = -<c, T(theta)>; the conjugate case with closed-form client solves."""

    c: DualVec
    n_examples: int = 0

    @property
    def dim(self) -> int:
        return self.c.fam.dim


@dataclass(frozen=True)
class Logistic:
    """Binary cross entropy over rows of X with labels in {0,1}, divided by ``scale``."""

    X: Array
    y: Array
    scale: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DimensionMismatch("X must be (n, d) with matching label vector")
        if self.scale <= 0:
            raise DimensionMismatch("scale must be > 0")
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class MulticlassLogistic:
    """Softmax cross entropy; parameter is the class-major flattening of (C, d) weights."""

    X: Array
    y: Array
    n_classes: int
    scale: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=int)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DimensionMismatch("X must be (n, d) with matching label vector")
        if self.n_classes < 2 or y.min(initial=0) < 0 or y.max(initial=0) >= self.n_classes:
            raise DimensionMismatch("labels out of range for declared class count")
        if self.scale <= 0:
            raise DimensionMismatch("scale must be > 0")
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.n_classes * self.X.shape[1]

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]


LossSpec = Quadratic | LinearInT | Logistic | MulticlassLogistic


def scale_loss(loss: LossSpec, divisor: float) -> LossSpec:
    """Divide a loss by a positive scalar (temperature / per-example rescaling)."""
    if divisor <= 0:
        raise ValueError("divisor must be > 0")
    if divisor == 1.0:
        return loss
    if isinstance(loss, Quadratic):
        return Quadratic(loss.A / divisor, loss.b / divisor, loss.n_examples)
    if isinstance(loss, LinearInT):
        c = loss.c
        b2 = None if c.b2 is None else c.b2 / divisor
        return LinearInT(DualVec(c.fam, c.b1 / divisor, b2), loss.n_examples)
    return replace(loss, scale=loss.scale * divisor)


def _check_theta(loss: LossSpec, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (loss.dim,):
        raise DimensionMismatch(f"theta shape {theta.shape} != ({loss.dim},)")
    return theta


# ---------------------------------------------------------------------------
# pointwise calculus
# ---------------------------------------------------------------------------


def loss_value(loss: LossSpec, theta: Array) -> float:
    theta = _check_theta(loss, theta)
    if isinstance(loss, Quadratic):
        return 0.5 * float(theta @ loss.A @ theta) + float(loss.b @ theta)
    if isinstance(loss, LinearInT):
        return -pair_with_stat(loss.c, theta)
    if isinstance(loss, Logistic):
        z = loss.X @ theta
        # -y log sigma(z) - (1-y) log sigma(-z), summed, stable via log_expit.
        return float(-np.sum(loss.y * log_expit(z) + (1.0 - loss.y) * log_expit(-z))) / loss.scale
    logits = _mc_logits(loss, theta)
    logz = logsumexp(logits, axis=1)
    n = np.arange(loss.n_examples)
    return float(np.sum(logz - logits[n, loss.y])) / loss.scale


def loss_grad(loss: LossSpec, theta: Array) -> Array:
    theta = _check_theta(loss, theta)
    if isinstance(loss, Quadratic):
        return loss.A @ theta + loss.b
    if isinstance(loss, LinearInT):
        c = loss.c
        grad = -c.b1.copy()
        if c.b2 is not None:
            grad -= 2.0 * (c.b2 * theta if c.fam.kind == DIAG else c.b2 @ theta)
        return grad
    if isinstance(loss, Logistic):
        p = expit(loss.X @ theta)
        return loss.X.T @ (p - loss.y) / loss.scale
    probs = _mc_probs(loss, theta)
    resid = probs.copy()
    resid[np.arange(loss.n_examples), loss.y] -= 1.0
    return (resid.T @ loss.X).ravel() / loss.scale


def loss_hess(loss: LossSpec, theta: Array, diag_only: bool = False) -> Array:
    """Hessian (exact; for the logistic losses this coincides with Gauss-Newton).

    ``diag_only`` returns the exact diagonal as a vector.
    """
    theta = _check_theta(loss, theta)
    if isinstance(loss, Quadratic):
        return np.diag(loss.A).copy() if diag_only else loss.A
    if isinstance(loss, LinearInT):
        c = loss.c
        if c.b2 is None:
            return np.zeros(loss.dim) if diag_only else np.zeros((loss.dim, loss.dim))
        hess_diag_or_full = -2.0 * c.b2
        if c.fam.kind == DIAG:
            return hess_diag_or_full if diag_only else np.diag(hess_diag_or_full)
        return np.diag(hess_diag_or_full).copy() if diag_only else hess_diag_or_full
    if isinstance(loss, Logistic):
        p = expit(loss.X @ theta)
        w = p * (1.0 - p) / loss.scale
        if diag_only:
            return (loss.X * loss.X).T @ w
        return loss.X.T @ (loss.X * w[:, None])
    probs = _mc_probs(loss, theta)
    if diag_only:
        w = probs * (1.0 - probs) / loss.scale  # (n, C)
        return ((loss.X * loss.X).T @ w).T.ravel()
    # blocks[(c,e),(c',f)] = sum_i (p_ic d_cc' - p_ic p_ic') x_ie x_if / scale
    n, d = loss.X.shape
    blocks = -np.einsum("ia,ib->iab", probs, probs)
    idx = np.arange(loss.n_classes)
    blocks[:, idx, idx] += probs
    hess = np.einsum("iab,ie,if->aebf", blocks, loss.X, loss.X) / loss.scale
    return hess.reshape(loss.dim, loss.dim)


def _mc_logits(loss: MulticlassLogistic, theta: Array) -> Array:
    weights = theta.reshape(loss.n_classes, loss.X.shape[1])
    return loss.X @ weights.T


def _mc_probs(loss: MulticlassLogistic, theta: Array) -> Array:
    logits = _mc_logits(loss, theta)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# expected moments under Gaussian q
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Analytic:
    """Closed-form moments; only the T-linear losses support it."""


@dataclass(frozen=True)
class Delta:
    """Evaluate grad/hess at the mean (the delta method)."""


@dataclass(frozen=True)
class MonteCarlo:
    """Average analytic per-sample grad/hess over draws from q.

    A fixed ``seed`` gives common random numbers across repeated calls.
    """

    count: int = 64
    seed: int | None = None


@dataclass(frozen=True)
class Reparam:
    """Gradient as Monte Carlo; Hessian diagonal via g*(theta-m)/sigma^2."""

    count: int = 64
    seed: int | None = None


Estimator = Analytic | Delta | MonteCarlo | Reparam


@dataclass(frozen=True)
class MomentEstimate:
    """Expected gradient plus expected Hessian in the family's native shape."""

    g: Array
    h: Array | None
    estimator: Estimator


def _hess_shape_is_diag(fam: Family) -> bool:
    return fam.kind == DIAG


def expected_moments(loss: LossSpec, lam: NatParam, estimator: Estimator) -> MomentEstimate:
    """E_q[grad l] and E_q[hess l] (full matrix, or its diagonal for diag families)."""
    if lam.fam.dim != loss.dim:
        raise DimensionMismatch(f"loss dim {loss.dim} != family dim {lam.fam.dim}")
    diag = _hess_shape_is_diag(lam.fam)
    if isinstance(estimator, Analytic):
        return _analytic_moments(loss, lam, diag, estimator)
    if isinstance(estimator, Delta):
        return MomentEstimate(
            loss_grad(loss, lam.m), loss_hess(loss, lam.m, diag_only=diag), estimator
        )
    if isinstance(estimator, MonteCarlo):
        if estimator.count < 1:
            raise EstimatorUnsupported("MonteCarlo needs count >= 1")
        thetas = sample(lam, estimator.count, estimator.seed)
        if isinstance(loss, (Quadratic, LinearInT)):
            # Per-sample grad is affine in theta and the Hessian is constant,
            # so the sample average collapses onto the mean draw.
            g = loss_grad(loss, thetas.mean(axis=0))
            h = loss_hess(loss, thetas[0], diag_only=diag)
            return MomentEstimate(g, h, estimator)
        g = np.mean([loss_grad(loss, t) for t in thetas], axis=0)
        h = np.mean([loss_hess(loss, t, diag_only=diag) for t in thetas], axis=0)
        return MomentEstimate(g, h, estimator)
    if isinstance(estimator, Reparam):
        return _reparam_moments(loss, lam, estimator)
    raise EstimatorUnsupported(f"unknown estimator {estimator!r}")


def _analytic_moments(loss, lam, diag, estimator) -> MomentEstimate:
    if isinstance(loss, Quadratic):
        g = loss.A @ lam.m + loss.b
        h = np.diag(loss.A).copy() if diag else loss.A
        return MomentEstimate(g, h, estimator)
    if isinstance(loss, LinearInT):
        # Moments of -<c, T>: the second block is constant, the gradient carries
        # the mean so that (g - h m, h/2) collapses to -c exactly.
        c = loss.c
        if c.fam != lam.fam:
            raise FamilyMismatch("LinearInT coefficient family differs from q's family")
        g = -c.b1.copy()
        if c.b2 is None:
            h = np.zeros(loss.dim) if diag else np.zeros((loss.dim, loss.dim))
            return MomentEstimate(g, h, estimator)
        if c.fam.kind == DIAG:
            h = -2.0 * c.b2
            g = g + h * lam.m
            return MomentEstimate(g, h if diag else np.diag(h), estimator)
        h = -2.0 * c.b2
        g = g + h @ lam.m
        return MomentEstimate(g, np.diag(h).copy() if diag else h, estimator)
    raise EstimatorUnsupported(f"Analytic moments unavailable for {type(loss).__name__}")


def _reparam_moments(loss, lam, estimator) -> MomentEstimate:
    if estimator.count < 1:
        raise EstimatorUnsupported("Reparam needs count >= 1")
    if lam.fam.kind not in (ISOTROPIC, DIAG):
        raise EstimatorUnsupported("Reparam Hessian estimate needs a diagonal covariance")
    var = np.ones(lam.fam.dim) if lam.fam.kind == ISOTROPIC else 1.0 / lam.prec
    thetas = sample(lam, estimator.count, estimator.seed)
    grads = np.stack([loss_grad(loss, t) for t in thetas])
    h = np.mean(grads * (thetas - lam.m) / var, axis=0)
    return MomentEstimate(np.mean(grads, axis=0), h, estimator)


def natural_gradient(loss: LossSpec, lam: NatParam, estimator: Estimator) -> DualVec:
    """Gradient of E_q[l] in expectation coordinates (ambient dual layout)."""
    kind = lam.fam.kind
    if kind in (ISOTROPIC, FIXED):
        mom = expected_moments(loss, lam, estimator)
        return DualVec(lam.fam, mom.g)
    mom = expected_moments(loss, lam, estimator)
    if kind == DIAG:
        h = mom.h if mom.h.ndim == 1 else np.diag(mom.h)
        return DualVec(lam.fam, mom.g - h * lam.m, 0.5 * h)
    h = np.diag(mom.h) if mom.h.ndim == 1 else mom.h
    return DualVec(lam.fam, mom.g - h @ lam.m, 0.5 * h)


def loss_to_jsonable(loss: LossSpec) -> dict:
    if isinstance(loss, Quadratic):
        return {
            "kind": "quadratic",
            "A": loss.A.tolist(),
            "b": loss.b.tolist(),
            "n_examples": loss.n_examples,
        }
    if isinstance(loss, LinearInT):
        from .families import dual_to_jsonable, family_to_jsonable

        return {
            "kind": "linear_in_t",
            "family": family_to_jsonable(loss.c.fam),
            "c": dual_to_jsonable(loss.c),
            "n_examples": loss.n_examples,
        }
    if isinstance(loss, Logistic):
        return {
            "kind": "logistic",
            "X": loss.X.tolist(),
            "y": loss.y.tolist(),
            "scale": loss.scale,
        }
    return {
        "kind": "multiclass_logistic",
        "X": loss.X.tolist(),
        "y": loss.y.tolist(),
        "n_classes": loss.n_classes,
        "scale": loss.scale,
    }


def loss_from_jsonable(data: dict) -> LossSpec:
    kind = data["kind"]
    if kind == "quadratic":
        return Quadratic(
            np.asarray(data["A"], dtype=float),
            np.asarray(data["b"], dtype=float),
            int(data.get("n_examples", 0)),
        )
    if kind == "linear_in_t":
        from .families import dual_from_jsonable, family_from_jsonable

        fam = family_from_jsonable(data["family"])
        return LinearInT(dual_from_jsonable(fam, data["c"]), int(data.get("n_examples", 0)))
    if kind == "logistic":
        return Logistic(
            np.asarray(data["X"], dtype=float),
            np.asarray(data["y"], dtype=float),
            float(data.get("scale", 1.0)),
        )
    if kind == "multiclass_logistic":
        return MulticlassLogistic(
            np.asarray(data["X"], dtype=float),
            np.asarray(data["y"], dtype=int),
            int(data["n_classes"]),
            float(data.get("scale", 1.0)),
        )
    raise DimensionMismatch(f"unknown loss kind {kind!r}")


def conjugate_coefficient(loss: Quadratic | LinearInT, fam: Family) -> DualVec:
    """Represent a T-linear loss as l = -<c, T>; raises when not representable."""
    if isinstance(loss, LinearInT):
        if loss.c.fam != fam:
            raise FamilyMismatch("LinearInT coefficient family differs from target family")
        return loss.c
    if not isinstance(loss, Quadratic):
        raise EstimatorUnsupported(f"{type(loss).__name__} is not linear in T")
    if fam.kind == FULL:
        return DualVec(fam, -loss.b, -0.5 * loss.A)
    if fam.kind == DIAG:
        off = loss.A - np.diag(np.diag(loss.A))
        if float(np.max(np.abs(off))) > 1e-12 * max(1.0, float(np.max(np.abs(loss.A)))):
            raise EstimatorUnsupported("quadratic with off-diagonal A is not T-linear for diag")
        return DualVec(fam, -loss.b, -0.5 * np.diag(loss.A))
    if float(np.max(np.abs(loss.A))) > 0.0:
        raise EstimatorUnsupported("quadratic term is not T-linear for a fixed-covariance family")
    return DualVec(fam, -loss.b)
