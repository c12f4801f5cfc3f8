"""Exponential-family algebra for four Gaussian families.

The families differ only in how the precision is constrained:

==============  ======================  =========================  ==========================
kind            natural coordinates     sufficient statistic       expectation coordinates
==============  ======================  =========================  ==========================
``isotropic``   m                       theta                      m
``fixed``       S m  (S fixed)          theta                      m
``diag``        (s*m, -s/2)             (theta, theta^2)           (m, m^2 + 1/s)
``full``        (S m, -S/2)             (theta, theta theta^T)     (m, m m^T + S^-1)
==============  ======================  =========================  ==========================

``NatParam`` stores the mean/precision pair internally and converts to the
ambient coordinate blocks above only at the boundary (``coords``/``as_dual``).
``DualVec`` holds raw ambient blocks with no positivity constraint: sums and
differences of natural parameters land there, and so do natural gradients and
prior terms.  All values are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateMoment, FamilyMismatch, NonPositivePrecision

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)

ISOTROPIC = "isotropic"
FIXED = "fixed"
DIAG = "diag"
FULL = "full"
KINDS = (ISOTROPIC, FIXED, DIAG, FULL)

# Families whose ambient layout has a second (precision-carrying) block.
TWO_BLOCK = (DIAG, FULL)


def _frozen(a, dtype=float) -> Array:
    """Copy to a read-only float array."""
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


def _symmetrize(mat: Array, tol: float = 1e-8) -> Array:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NonPositivePrecision(f"expected a square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if float(np.max(np.abs(mat - mat.T))) > tol * scale:
        raise NonPositivePrecision("matrix is not symmetric")
    return 0.5 * (mat + mat.T)


def chol_spd(mat: Array, jitter: float = 1e-10, retries: int = 3) -> Array:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    On factorization failure, adds ``jitter * trace/dim`` to the diagonal and
    retries (escalating tenfold, at most `retries` times) before raising
    :class:`NonPositivePrecision`.
    """
    mat = _symmetrize(mat)
    bump = jitter * max(float(np.trace(mat)) / mat.shape[0], 1.0)
    eye = np.eye(mat.shape[0])
    for attempt in range(retries + 1):
        try:
            return np.linalg.cholesky(mat if attempt == 0 else mat + bump * eye)
        except np.linalg.LinAlgError:
            bump *= 10.0
    raise NonPositivePrecision("Cholesky failed after jitter retries")


def spd_solve(mat: Array, rhs: Array) -> Array:
    """Solve ``mat @ x = rhs`` for symmetric positive-definite ``mat``."""
    low = chol_spd(mat)
    half = solve_triangular(low, rhs, lower=True)
    return solve_triangular(low.T, half, lower=False)


def spd_inverse(mat: Array) -> Array:
    inv = spd_solve(mat, np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def spd_logdet(mat: Array) -> float:
    low = chol_spd(mat)
    return 2.0 * float(np.sum(np.log(np.diag(low))))


# ---------------------------------------------------------------------------
# family descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """Which Gaussian family, its dimension, and any fixed hyperstructure."""

    kind: str
    dim: int
    fixed_precision: Array | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FamilyMismatch(f"unknown family kind {self.kind!r}")
        if self.dim < 1:
            raise FamilyMismatch("dim must be >= 1")
        if self.kind == FIXED:
            if self.fixed_precision is None:
                raise FamilyMismatch("fixed family requires fixed_precision")
            prec = _symmetrize(self.fixed_precision)
            chol_spd(prec)  # must be SPD
            object.__setattr__(self, "fixed_precision", _frozen(prec))
        elif self.fixed_precision is not None:
            raise FamilyMismatch(f"{self.kind} family takes no fixed_precision")

    # -- constructors ------------------------------------------------------

    @classmethod
    def isotropic(cls, dim: int) -> "Family":
        """Unit-precision Gaussian N(m, I); recovers plain gradient methods."""
        return cls(ISOTROPIC, dim)

    @classmethod
    def fixed(cls, precision: Array) -> "Family":
        precision = np.asarray(precision, dtype=float)
        return cls(FIXED, precision.shape[0], precision)

    @classmethod
    def diag(cls, dim: int) -> "Family":
        return cls(DIAG, dim)

    @classmethod
    def full(cls, dim: int) -> "Family":
        return cls(FULL, dim)

    # -- helpers -----------------------------------------------------------

    @property
    def two_block(self) -> bool:
        return self.kind in TWO_BLOCK

    def __eq__(self, other):
        if not isinstance(other, Family):
            return NotImplemented
        if self.kind != other.kind or self.dim != other.dim:
            return False
        if self.kind == FIXED:
            return bool(np.array_equal(self.fixed_precision, other.fixed_precision))
        return True

    def __hash__(self):
        return hash((self.kind, self.dim))


def check_same_family(a, b):
    if a.fam != b.fam:
        raise FamilyMismatch(f"family mismatch: {a.fam.kind}/{a.fam.dim} vs {b.fam.kind}/{b.fam.dim}")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NatParam:
    """Natural parameter, stored as mean plus precision (where the family has one).

    ``prec`` is the precision vector (``diag``) or matrix (``full``); it is
    ``None`` for the fixed-covariance families.  The constructor enforces
    strict positivity of the encoded precision.
    """

    fam: Family
    m: Array
    prec: Array | None = None

    def __post_init__(self):
        m = _frozen(self.m)
        if m.shape != (self.fam.dim,):
            raise FamilyMismatch(f"mean shape {m.shape} != ({self.fam.dim},)")
        object.__setattr__(self, "m", m)
        if self.fam.kind in (ISOTROPIC, FIXED):
            if self.prec is not None:
                raise FamilyMismatch(f"{self.fam.kind} family carries no free precision")
            return
        if self.prec is None:
            raise FamilyMismatch(f"{self.fam.kind} family requires a precision block")
        if self.fam.kind == DIAG:
            prec = _frozen(self.prec)
            if prec.shape != (self.fam.dim,):
                raise FamilyMismatch("diag precision must be a vector of length dim")
            if not np.all(prec > 0.0):
                raise NonPositivePrecision("diag precision has entries <= 0")
        else:  # FULL
            prec = _symmetrize(self.prec)
            chol_spd(prec)
            prec = _frozen(prec)
        object.__setattr__(self, "prec", prec)

    # -- ambient coordinates -----------------------------------------------

    def coords(self) -> tuple[Array, Array | None]:
        """Ambient coordinate blocks per the family table."""
        kind = self.fam.kind
        if kind == ISOTROPIC:
            return self.m, None
        if kind == FIXED:
            return self.fam.fixed_precision @ self.m, None
        if kind == DIAG:
            return self.prec * self.m, -0.5 * self.prec
        return self.prec @ self.m, -0.5 * self.prec

    def as_dual(self) -> "DualVec":
        b1, b2 = self.coords()
        return DualVec(self.fam, b1, b2)

    @classmethod
    def from_dual(cls, dual: "DualVec") -> "NatParam":
        """Reinterpret ambient coordinates as a natural parameter.

        Raises :class:`NonPositivePrecision` when the encoded precision fails
        positivity; callers decide whether that is an error or a reportable
        divergence.
        """
        fam = dual.fam
        if fam.kind == ISOTROPIC:
            return cls(fam, dual.b1)
        if fam.kind == FIXED:
            return cls(fam, spd_solve(fam.fixed_precision, dual.b1))
        prec = -2.0 * dual.b2
        if fam.kind == DIAG:
            if not np.all(prec > 0.0):
                raise NonPositivePrecision("coordinate block encodes nonpositive precision")
            return cls(fam, dual.b1 / prec, prec)
        return cls(fam, spd_solve(prec, dual.b1), prec)

    # -- family views --------------------------------------------------------

    def precision_matrix(self) -> Array:
        """Dense precision, whatever the family."""
        kind = self.fam.kind
        if kind == ISOTROPIC:
            return np.eye(self.fam.dim)
        if kind == FIXED:
            return np.asarray(self.fam.fixed_precision)
        if kind == DIAG:
            return np.diag(self.prec)
        return np.asarray(self.prec)


@dataclass(frozen=True)
class ExpParam:
    """Expectation parameter: first moment plus raw second moment where present."""

    fam: Family
    m: Array
    m2: Array | None = None

    def __post_init__(self):
        m = _frozen(self.m)
        if m.shape != (self.fam.dim,):
            raise FamilyMismatch(f"mean shape {m.shape} != ({self.fam.dim},)")
        object.__setattr__(self, "m", m)
        if not self.fam.two_block:
            if self.m2 is not None:
                raise FamilyMismatch(f"{self.fam.kind} family has no second-moment block")
            return
        if self.m2 is None:
            raise FamilyMismatch(f"{self.fam.kind} family requires a second-moment block")
        m2 = _frozen(self.m2)
        if self.fam.kind == DIAG:
            if m2.shape != (self.fam.dim,):
                raise FamilyMismatch("diag second moment must be a vector")
            if not np.all(m2 - m * m > 0.0):
                raise DegenerateMoment("implied variance has entries <= 0")
        else:
            m2 = _frozen(_symmetrize(m2))
            try:
                chol_spd(m2 - np.outer(m, m))
            except NonPositivePrecision as exc:
                raise DegenerateMoment("implied covariance is not positive definite") from exc
        object.__setattr__(self, "m2", m2)

    def coords(self) -> tuple[Array, Array | None]:
        return self.m, self.m2


@dataclass(frozen=True)
class DualVec:
    """Raw ambient-layout vector: unconstrained, unlike ``NatParam``.

    Differences of natural parameters, natural gradients, prior terms and
    Lagrange multipliers all live here.  The second block stores the ambient
    value directly, i.e. ``-u/2`` (diag) or ``-V/2`` (full).
    """

    fam: Family
    b1: Array
    b2: Array | None = None

    def __post_init__(self):
        b1 = _frozen(self.b1)
        if b1.shape != (self.fam.dim,):
            raise FamilyMismatch(f"first block shape {b1.shape} != ({self.fam.dim},)")
        object.__setattr__(self, "b1", b1)
        if not self.fam.two_block:
            if self.b2 is not None:
                raise FamilyMismatch(f"{self.fam.kind} family has a single-block layout")
            return
        if self.b2 is None:
            raise FamilyMismatch(f"{self.fam.kind} family requires a second block")
        b2 = _frozen(self.b2)
        want = (self.fam.dim,) if self.fam.kind == DIAG else (self.fam.dim, self.fam.dim)
        if b2.shape != want:
            raise FamilyMismatch(f"second block shape {b2.shape} != {want}")
        if self.fam.kind == FULL:
            b2 = _frozen(0.5 * (b2 + b2.T))
        object.__setattr__(self, "b2", b2)

    # Named views matching how round updates are written.
    @property
    def v(self) -> Array:
        return self.b1

    @property
    def u(self) -> Array:
        """-2 times the second block (the precision-like payload)."""
        if self.b2 is None:
            raise FamilyMismatch(f"{self.fam.kind} family has no second block")
        return -2.0 * self.b2


def dual_zero(fam: Family) -> DualVec:
    if fam.two_block:
        shape = (fam.dim,) if fam.kind == DIAG else (fam.dim, fam.dim)
        return DualVec(fam, np.zeros(fam.dim), np.zeros(shape))
    return DualVec(fam, np.zeros(fam.dim))


def dual_axpy(a: float, x: DualVec, y: DualVec) -> DualVec:
    """``a * x + y`` componentwise in the ambient layout."""
    check_same_family(x, y)
    if x.fam.two_block:
        return DualVec(x.fam, a * x.b1 + y.b1, a * x.b2 + y.b2)
    return DualVec(x.fam, a * x.b1 + y.b1)


def dual_scale(a: float, x: DualVec) -> DualVec:
    return dual_axpy(a, x, dual_zero(x.fam))


def dual_sum(vecs: list[DualVec]) -> DualVec:
    """Sum in the given (client-id) order with compensated summation."""
    if not vecs:
        raise ValueError("dual_sum of an empty list")
    fam = vecs[0].fam
    for v in vecs[1:]:
        check_same_family(vecs[0], v)
    b1 = _kahan([v.b1 for v in vecs])
    if fam.two_block:
        return DualVec(fam, b1, _kahan([v.b2 for v in vecs]))
    return DualVec(fam, b1)


def _kahan(arrays: list[Array]) -> Array:
    total = np.zeros_like(arrays[0])
    carry = np.zeros_like(arrays[0])
    for a in arrays:
        y = a - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total


def dual_inf_norm(x: DualVec) -> float:
    out = float(np.max(np.abs(x.b1))) if x.b1.size else 0.0
    if x.b2 is not None:
        out = max(out, float(np.max(np.abs(x.b2))))
    return out


def nat_sub(lam_a: NatParam, lam_b: NatParam) -> DualVec:
    """Ambient difference of natural parameters (lands in dual space)."""
    check_same_family(lam_a, lam_b)
    a1, a2 = lam_a.coords()
    b1, b2 = lam_b.coords()
    if lam_a.fam.two_block:
        return DualVec(lam_a.fam, a1 - b1, a2 - b2)
    return DualVec(lam_a.fam, a1 - b1)


def exp_sub(mu_a: ExpParam, mu_b: ExpParam) -> DualVec:
    """Ambient difference of expectation parameters, in the same container."""
    check_same_family(mu_a, mu_b)
    if mu_a.fam.two_block:
        return DualVec(mu_a.fam, mu_a.m - mu_b.m, mu_a.m2 - mu_b.m2)
    return DualVec(mu_a.fam, mu_a.m - mu_b.m)


def pair_with_stat(dual: DualVec, theta: Array) -> float:
    """Inner product of an ambient vector with the sufficient statistic at theta.

    This is the log of the site factor parameterized by ``dual``.
    """
    theta = np.asarray(theta, dtype=float)
    out = float(dual.b1 @ theta)
    if dual.b2 is None:
        return out
    if dual.fam.kind == DIAG:
        return out + float(dual.b2 @ (theta * theta))
    return out + float(theta @ dual.b2 @ theta)


# ---------------------------------------------------------------------------
# dual maps, log partition, divergence
# ---------------------------------------------------------------------------


def to_expectation(lam: NatParam) -> ExpParam:
    """Forward dual map: expectation parameter of ``lam``."""
    kind = lam.fam.kind
    if kind in (ISOTROPIC, FIXED):
        return ExpParam(lam.fam, lam.m)
    if kind == DIAG:
        return ExpParam(lam.fam, lam.m, lam.m * lam.m + 1.0 / lam.prec)
    cov = spd_inverse(lam.prec)
    return ExpParam(lam.fam, lam.m, np.outer(lam.m, lam.m) + cov)


def to_natural(mu: ExpParam) -> NatParam:
    """Inverse dual map; raises :class:`DegenerateMoment` off the moment cone."""
    kind = mu.fam.kind
    if kind in (ISOTROPIC, FIXED):
        return NatParam(mu.fam, mu.m)
    if kind == DIAG:
        var = mu.m2 - mu.m * mu.m
        if not np.all(var > 0.0):
            raise DegenerateMoment("implied variance has entries <= 0")
        return NatParam(mu.fam, mu.m, 1.0 / var)
    cov = mu.m2 - np.outer(mu.m, mu.m)
    try:
        prec = spd_inverse(cov)
    except NonPositivePrecision as exc:
        raise DegenerateMoment("implied covariance is not positive definite") from exc
    return NatParam(mu.fam, mu.m, prec)


def log_partition(lam: NatParam) -> float:
    """Log-partition; convex in the ambient coordinates, gradient = expectation."""
    kind = lam.fam.kind
    d = lam.fam.dim
    if kind == ISOTROPIC:
        return 0.5 * float(lam.m @ lam.m) + 0.5 * d * LOG_2PI
    if kind == FIXED:
        s = lam.fam.fixed_precision
        return 0.5 * float(lam.m @ s @ lam.m) - 0.5 * spd_logdet(s) + 0.5 * d * LOG_2PI
    if kind == DIAG:
        return (
            0.5 * float(lam.prec @ (lam.m * lam.m))
            - 0.5 * float(np.sum(np.log(lam.prec)))
            + 0.5 * d * LOG_2PI
        )
    return (
        0.5 * float(lam.m @ lam.prec @ lam.m)
        - 0.5 * spd_logdet(lam.prec)
        + 0.5 * d * LOG_2PI
    )


def log_density(lam: NatParam, theta: Array) -> float:
    """Log density at theta (Gaussian base measure is the constant 1)."""
    return pair_with_stat(lam.as_dual(), theta) - log_partition(lam)


def kl(lam_a: NatParam, lam_b: NatParam) -> float:
    """KL(q_a || q_b) for same-family Gaussians, in closed form."""
    check_same_family(lam_a, lam_b)
    kind = lam_a.fam.kind
    d = lam_a.fam.dim
    dm = lam_a.m - lam_b.m
    if kind == ISOTROPIC:
        return 0.5 * float(dm @ dm)
    if kind == FIXED:
        return 0.5 * float(dm @ lam_a.fam.fixed_precision @ dm)
    if kind == DIAG:
        ratio = lam_b.prec / lam_a.prec
        return 0.5 * float(
            np.sum(ratio - np.log(ratio) - 1.0) + (lam_b.prec * dm) @ dm
        )
    cov_a = spd_inverse(lam_a.prec)
    trace = float(np.sum(lam_b.prec * cov_a))
    return 0.5 * (
        trace
        + float(dm @ lam_b.prec @ dm)
        - d
        + spd_logdet(lam_a.prec)
        - spd_logdet(lam_b.prec)
    )


def kl_grad_mu(lam_a: NatParam, lam_b: NatParam) -> DualVec:
    """Gradient of KL(q_a || q_b) in the expectation coordinates of ``q_a``.

    Equals the natural-parameter difference exactly, so this shares its
    arithmetic with :func:`nat_sub`.
    """
    return nat_sub(lam_a, lam_b)


def sample(lam: NatParam, count: int, seed=None) -> Array:
    """Draw ``count`` samples; deterministic given ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, lam.fam.dim))
    kind = lam.fam.kind
    if kind == ISOTROPIC:
        return lam.m + z
    if kind == DIAG:
        return lam.m + z / np.sqrt(lam.prec)
    prec = lam.fam.fixed_precision if kind == FIXED else lam.prec
    low = chol_spd(prec)
    # theta = m + L^-T z  gives covariance (L L^T)^-1 = S^-1.
    return lam.m + solve_triangular(low.T, z.T, lower=False).T


# ---------------------------------------------------------------------------
# JSON serialization (named fields; matrices row-major)
# ---------------------------------------------------------------------------


def family_to_jsonable(fam: Family) -> dict:
    out = {"kind": fam.kind, "dim": fam.dim}
    if fam.kind == FIXED:
        out["fixed_precision"] = fam.fixed_precision.tolist()
    return out


def family_from_jsonable(data: dict) -> Family:
    kind = data["kind"]
    if kind == FIXED:
        return Family.fixed(np.asarray(data["fixed_precision"], dtype=float))
    return Family(kind, int(data["dim"]))


def nat_to_jsonable(lam: NatParam) -> dict:
    out = {"m": lam.m.tolist()}
    if lam.fam.kind == DIAG:
        out["s"] = lam.prec.tolist()
    elif lam.fam.kind == FULL:
        out["S"] = lam.prec.tolist()
    return out


def nat_from_jsonable(fam: Family, data: dict) -> NatParam:
    m = np.asarray(data["m"], dtype=float)
    if fam.kind == DIAG:
        return NatParam(fam, m, np.asarray(data["s"], dtype=float))
    if fam.kind == FULL:
        return NatParam(fam, m, np.asarray(data["S"], dtype=float))
    return NatParam(fam, m)


def dual_to_jsonable(dual: DualVec) -> dict:
    out = {"v": dual.b1.tolist()}
    if dual.fam.kind == DIAG:
        out["u"] = dual.u.tolist()
    elif dual.fam.kind == FULL:
        out["V"] = dual.u.tolist()
    return out


def dual_from_jsonable(fam: Family, data: dict) -> DualVec:
    v = np.asarray(data["v"], dtype=float)
    if fam.kind == DIAG:
        return DualVec(fam, v, -0.5 * np.asarray(data["u"], dtype=float))
    if fam.kind == FULL:
        return DualVec(fam, v, -0.5 * np.asarray(data["V"], dtype=float))
    return DualVec(fam, v)


def exp_to_jsonable(mu: ExpParam) -> dict:
    out = {"m": mu.m.tolist()}
    if mu.fam.two_block:
        out["m2"] = mu.m2.tolist()
    return out


def exp_from_jsonable(fam: Family, data: dict) -> ExpParam:
    m = np.asarray(data["m"], dtype=float)
    if fam.two_block:
        return ExpParam(fam, m, np.asarray(data["m2"], dtype=float))
    return ExpParam(fam, m)
