import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from bayesadmm.errors import (
    DegenerateMoment,
    FamilyMismatch,
    NonPositivePrecision,
)
from bayesadmm.families import (
    DualVec,
    ExpParam,
    Family,
    NatParam,
    dual_axpy,
    dual_from_jsonable,
    dual_inf_norm,
    dual_sum,
    dual_to_jsonable,
    dual_zero,
    exp_sub,
    kl,
    kl_grad_mu,
    log_density,
    log_partition,
    nat_from_jsonable,
    nat_sub,
    nat_to_jsonable,
    pair_with_stat,
    sample,
    to_expectation,
    to_natural,
)

LOG_2PI = np.log(2.0 * np.pi)


def random_spd(rng, d, lo=0.3, hi=4.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q @ np.diag(rng.uniform(lo, hi, d)) @ q.T


def random_nat(rng, fam):
    if fam.kind == "full":
        return NatParam(fam, rng.standard_normal(fam.dim), random_spd(rng, fam.dim))
    if fam.kind == "diag":
        return NatParam(fam, rng.standard_normal(fam.dim), rng.uniform(0.3, 4.0, fam.dim))
    return NatParam(fam, rng.standard_normal(fam.dim))


def all_families(d=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Family.isotropic(d),
        Family.fixed(random_spd(rng, d)),
        Family.diag(d),
        Family.full(d),
    ]


# ---------------------------------------------------------------------------
# dual maps
# ---------------------------------------------------------------------------


def test_full_expectation_matches_table():
    fam = Family.full(2)
    lam = NatParam(fam, np.array([1.0, 0.0]), np.eye(2))
    mu = to_expectation(lam)
    assert np.allclose(mu.m, [1.0, 0.0])
    assert np.allclose(mu.m2, [[2.0, 0.0], [0.0, 1.0]])


def test_isotropic_expectation_is_identity():
    fam = Family.isotropic(2)
    lam = NatParam(fam, np.zeros(2))
    assert np.allclose(to_expectation(lam).m, 0.0)


def test_diag_coordinates_and_moments():
    fam = Family.diag(1)
    lam = NatParam(fam, np.array([2.0]), np.array([4.0]))
    b1, b2 = lam.coords()
    assert np.allclose(b1, [8.0]) and np.allclose(b2, [-2.0])
    mu = to_expectation(lam)
    assert np.allclose(mu.m, [2.0]) and np.allclose(mu.m2, [4.25])
    # Monte-Carlo oracle for the moment map, 3 significant digits.
    draws = sample(lam, 1_000_000, seed=3)
    assert np.mean(draws) == pytest.approx(2.0, abs=2e-3)
    assert np.mean(draws**2) == pytest.approx(4.25, rel=1e-3)


def test_to_natural_standard_normal_diag():
    fam = Family.diag(1)
    lam = to_natural(ExpParam(fam, np.array([0.0]), np.array([1.0])))
    b1, b2 = lam.coords()
    assert np.allclose(b1, [0.0]) and np.allclose(b2, [-0.5])


def test_roundtrip_100_random_spd():
    rng = np.random.default_rng(12)
    fam = Family.full(2)
    for _ in range(100):
        lam = random_nat(rng, fam)
        back = to_natural(to_expectation(lam))
        assert np.allclose(back.m, lam.m, rtol=1e-10, atol=1e-12)
        assert np.allclose(back.prec, lam.prec, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("fam", all_families())
def test_roundtrip_all_families(fam):
    rng = np.random.default_rng(hash(fam.kind) % 2**32)
    for _ in range(20):
        lam = random_nat(rng, fam)
        back = to_natural(to_expectation(lam))
        assert dual_inf_norm(nat_sub(back, lam)) < 1e-10 * max(1.0, dual_inf_norm(lam.as_dual()))


def test_to_natural_rejects_degenerate_moments():
    fam = Family.diag(2)
    with pytest.raises(DegenerateMoment):
        ExpParam(fam, np.array([1.0, 0.0]), np.array([1.0, 0.5]))
    full = Family.full(2)
    with pytest.raises(DegenerateMoment):
        ExpParam(full, np.array([1.0, 0.0]), np.array([[0.5, 0.0], [0.0, 1.0]]))


def test_natparam_rejects_bad_precision():
    with pytest.raises(NonPositivePrecision):
        NatParam(Family.diag(2), np.zeros(2), np.array([1.0, -0.5]))
    with pytest.raises(NonPositivePrecision):
        NatParam(Family.full(2), np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


# ---------------------------------------------------------------------------
# log partition
# ---------------------------------------------------------------------------


def test_log_partition_standard_normal_full():
    fam = Family.full(2)
    lam = NatParam(fam, np.zeros(2), np.eye(2))
    assert log_partition(lam) == pytest.approx(LOG_2PI)


def test_log_partition_isotropic_quadratic_in_mean():
    lam = NatParam(Family.isotropic(1), np.array([3.0]))
    assert log_partition(lam) == pytest.approx(4.5 + 0.5 * LOG_2PI)


@pytest.mark.parametrize("fam", all_families())
def test_log_partition_gradient_matches_expectation(fam):
    # central differences along random directions, step 1e-5, tolerance 1e-6
    rng = np.random.default_rng(7)
    lam = random_nat(rng, fam)
    mu = to_expectation(lam)
    b1, b2 = lam.coords()
    for _ in range(5):
        d1 = rng.standard_normal(fam.dim)
        if fam.two_block:
            if fam.kind == "full":
                raw = rng.standard_normal((fam.dim, fam.dim))
                d2 = 0.1 * (raw + raw.T)
            else:
                d2 = 0.1 * rng.standard_normal(fam.dim)
        else:
            d2 = None
        eps = 1e-5

        def shifted(sign):
            nb1 = b1 + sign * eps * d1
            nb2 = None if d2 is None else b2 + sign * eps * d2
            return NatParam.from_dual(DualVec(fam, nb1, nb2))

        fd = (log_partition(shifted(+1)) - log_partition(shifted(-1))) / (2 * eps)
        exact = float(mu.m @ d1)
        if d2 is not None:
            exact += float(np.sum(mu.m2 * d2))
        assert fd == pytest.approx(exact, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("fam", all_families())
def test_log_partition_strictly_convex(fam):
    rng = np.random.default_rng(21)
    lam_a = random_nat(rng, fam)
    lam_b = random_nat(rng, fam)
    mid = NatParam.from_dual(
        dual_axpy(0.5, lam_a.as_dual(), dual_axpy(0.5, lam_b.as_dual(), dual_zero(fam)))
    )
    lhs = log_partition(mid)
    rhs = 0.5 * log_partition(lam_a) + 0.5 * log_partition(lam_b)
    assert lhs < rhs


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("fam", all_families())
def test_kl_zero_iff_equal(fam):
    rng = np.random.default_rng(3)
    lam = random_nat(rng, fam)
    assert kl(lam, lam) == pytest.approx(0.0, abs=1e-12)
    other = random_nat(rng, fam)
    assert kl(lam, other) > 0.0


def test_kl_isotropic_is_half_squared_distance():
    fam = Family.isotropic(2)
    a = NatParam(fam, np.array([1.0, 1.0]))
    b = NatParam(fam, np.array([0.0, 0.0]))
    assert kl(a, b) == pytest.approx(1.0)


def test_kl_diag_against_monte_carlo():
    # independent oracle: scipy log-pdfs averaged over 10^6 draws
    fam = Family.diag(2)
    a = NatParam(fam, np.array([0.5, -0.2]), np.array([2.0, 0.7]))
    b = NatParam(fam, np.array([-0.3, 0.4]), np.array([1.1, 1.8]))
    draws = sample(a, 1_000_000, seed=9)
    sd_a = 1.0 / np.sqrt(a.prec)
    sd_b = 1.0 / np.sqrt(b.prec)
    per_draw = (
        norm.logpdf(draws, loc=a.m, scale=sd_a) - norm.logpdf(draws, loc=b.m, scale=sd_b)
    ).sum(axis=1)
    est = per_draw.mean()
    sigma = per_draw.std(ddof=1) / np.sqrt(per_draw.size)
    assert abs(kl(a, b) - est) < 3.0 * sigma


@pytest.mark.parametrize("fam", all_families())
def test_kl_matches_bregman_identity(fam):
    # KL(a||b) = A(b) - A(a) - <b - a, mu_a> ties A, the dual map and KL together
    rng = np.random.default_rng(17)
    a = random_nat(rng, fam)
    b = random_nat(rng, fam)
    mu_a = to_expectation(a)
    diff = nat_sub(b, a)
    pairing = float(diff.b1 @ mu_a.m)
    if fam.two_block:
        pairing += float(np.sum(diff.b2 * mu_a.m2))
    bregman = log_partition(b) - log_partition(a) - pairing
    assert kl(a, b) == pytest.approx(bregman, rel=1e-9, abs=1e-9)


def test_kl_grad_is_nat_sub_bitwise():
    rng = np.random.default_rng(5)
    fam = Family.full(3)
    a, b = random_nat(rng, fam), random_nat(rng, fam)
    g = kl_grad_mu(a, b)
    s = nat_sub(a, b)
    assert np.array_equal(g.b1, s.b1) and np.array_equal(g.b2, s.b2)


def test_kl_grad_isotropic_example():
    fam = Family.isotropic(1)
    g = kl_grad_mu(NatParam(fam, np.array([2.0])), NatParam(fam, np.array([1.0])))
    assert np.allclose(g.b1, [1.0])


def test_kl_grad_matches_finite_differences_in_mu():
    # perturb mu_a, map back through to_natural, difference-quotient the KL
    fam = Family.diag(2)
    rng = np.random.default_rng(11)
    a = random_nat(rng, fam)
    b = random_nat(rng, fam)
    grad = kl_grad_mu(a, b)
    mu = to_expectation(a)
    eps = 1e-6
    for block, gblock in ((0, grad.b1), (1, grad.b2)):
        for i in range(fam.dim):
            bump = np.zeros(fam.dim)
            bump[i] = eps
            if block == 0:
                hi = ExpParam(fam, mu.m + bump, mu.m2)
                lo = ExpParam(fam, mu.m - bump, mu.m2)
            else:
                hi = ExpParam(fam, mu.m, mu.m2 + bump)
                lo = ExpParam(fam, mu.m, mu.m2 - bump)
            fd = (kl(to_natural(hi), b) - kl(to_natural(lo), b)) / (2 * eps)
            assert fd == pytest.approx(gblock[i], rel=1e-5, abs=1e-5)


def test_kl_family_mismatch():
    with pytest.raises(FamilyMismatch):
        kl(NatParam(Family.isotropic(2), np.zeros(2)), NatParam(Family.isotropic(3), np.zeros(3)))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sampling_standard_normal_clt_bound():
    fam = Family.full(2)
    lam = NatParam(fam, np.zeros(2), np.eye(2))
    draws = sample(lam, 1_000_000, seed=1)
    assert np.all(np.abs(draws.mean(axis=0)) < 4.0 / np.sqrt(1_000_000))


def test_sampling_deterministic_given_seed():
    fam = Family.diag(3)
    lam = NatParam(fam, np.arange(3.0), np.array([1.0, 2.0, 3.0]))
    a = sample(lam, 100, seed=42)
    b = sample(lam, 100, seed=42)
    assert np.array_equal(a, b)


def test_sampling_diag_variance():
    fam = Family.diag(1)
    lam = NatParam(fam, np.zeros(1), np.array([4.0]))
    draws = sample(lam, 1_000_000, seed=2)
    assert draws.var() == pytest.approx(0.25, abs=2e-3)


def test_sampling_fixed_family_covariance():
    rng = np.random.default_rng(8)
    prec = random_spd(rng, 2)
    fam = Family.fixed(prec)
    lam = NatParam(fam, np.array([1.0, -1.0]))
    draws = sample(lam, 200_000, seed=4)
    cov = np.cov(draws.T)
    assert np.allclose(cov, np.linalg.inv(prec), atol=0.02)


# ---------------------------------------------------------------------------
# dual arithmetic
# ---------------------------------------------------------------------------


def test_nat_sub_of_self_is_zero():
    rng = np.random.default_rng(6)
    lam = random_nat(rng, Family.full(2))
    z = nat_sub(lam, lam)
    assert dual_inf_norm(z) == 0.0


def test_dual_axpy_zero_coefficient_returns_y():
    fam = Family.diag(2)
    x = DualVec(fam, np.array([1.0, 2.0]), np.array([0.5, -0.5]))
    y = DualVec(fam, np.array([-1.0, 0.0]), np.array([0.25, 0.75]))
    out = dual_axpy(0.0, x, y)
    assert np.allclose(out.b1, y.b1) and np.allclose(out.b2, y.b2)


def test_dual_axpy_reproduces_dual_update_step():
    rng = np.random.default_rng(13)
    fam = Family.full(2)
    lam_k, lam_g = random_nat(rng, fam), random_nat(rng, fam)
    eta = dual_zero(fam)
    new = dual_axpy(0.5, nat_sub(lam_k, lam_g), eta)
    ka, kg = lam_k.coords(), lam_g.coords()
    assert np.allclose(new.b1, 0.5 * (ka[0] - kg[0]))
    assert np.allclose(new.b2, 0.5 * (ka[1] - kg[1]))


def test_dual_unconstrained_allows_indefinite_blocks():
    fam = Family.full(2)
    # a dual second block that no NatParam could carry
    d = DualVec(fam, np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
    assert d.u.shape == (2, 2)


def test_exp_sub_isotropic_equals_nat_sub():
    fam = Family.isotropic(2)
    a, b = NatParam(fam, np.array([1.0, 2.0])), NatParam(fam, np.array([0.5, -1.0]))
    assert np.allclose(
        exp_sub(to_expectation(a), to_expectation(b)).b1, nat_sub(a, b).b1
    )


def test_pair_with_stat_and_log_density():
    fam = Family.diag(1)
    lam = NatParam(fam, np.array([0.0]), np.array([1.0]))
    theta = np.array([0.7])
    # standard normal log density
    assert log_density(lam, theta) == pytest.approx(norm.logpdf(0.7))
    d = DualVec(fam, np.array([2.0]), np.array([-0.5]))
    assert pair_with_stat(d, theta) == pytest.approx(2.0 * 0.7 - 0.5 * 0.49)


# ---------------------------------------------------------------------------
# hypothesis properties
# ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_property_roundtrip_and_kl_nonneg(seed):
    rng = np.random.default_rng(seed)
    fam = Family.full(2)
    a, b = random_nat(rng, fam), random_nat(rng, fam)
    back = to_natural(to_expectation(a))
    assert dual_inf_norm(nat_sub(back, a)) < 1e-9 * max(1.0, dual_inf_norm(a.as_dual()))
    assert kl(a, b) >= 0.0


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("fam", all_families())
def test_json_roundtrip(fam):
    rng = np.random.default_rng(1)
    lam = random_nat(rng, fam)
    back = nat_from_jsonable(fam, nat_to_jsonable(lam))
    assert dual_inf_norm(nat_sub(back, lam)) == 0.0
    dual = nat_sub(lam, random_nat(rng, fam))
    dual_back = dual_from_jsonable(fam, dual_to_jsonable(dual))
    assert np.allclose(dual_back.b1, dual.b1)
    if fam.two_block:
        assert np.allclose(dual_back.b2, dual.b2)


def test_exp_param_json_roundtrip():
    from bayesadmm.families import exp_from_jsonable, exp_to_jsonable

    fam = Family.full(2)
    rng = np.random.default_rng(19)
    mu = to_expectation(random_nat(rng, fam))
    back = exp_from_jsonable(fam, exp_to_jsonable(mu))
    assert np.allclose(back.m, mu.m) and np.allclose(back.m2, mu.m2)


def test_dual_sum_kahan_order():
    # naive left-to-right summation loses the small terms here
    fam = Family.isotropic(1)
    vals = [DualVec(fam, np.array([x])) for x in (1e16, 1.0, 1.0, -1e16)]
    assert dual_sum(vals).b1[0] == pytest.approx(2.0)
