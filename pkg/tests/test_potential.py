import numpy as np
import pytest

from gradsurf.potential import (FlatBottomPotential, compute_r_v, evaluate,
                                make_potential, validate_assumption)

FAMILIES = [
    make_potential("gaussian"),
    make_potential("power", r=4),
    make_potential("power", r=3),
    make_potential("flat_bottom", b=1.0),
    make_potential("flat_bottom", b=2.5, eps=0.3),
]


def test_evaluate_examples():
    assert evaluate(make_potential("gaussian"), 2.0) == pytest.approx((2.0, 2.0, 1.0))
    assert evaluate(make_potential("power", r=4), 1.0) == pytest.approx((0.25, 1.0, 3.0))
    flat = make_potential("flat_bottom", b=1.0)
    assert evaluate(flat, 0.5) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        evaluate(flat, np.inf)


@pytest.mark.parametrize("V", FAMILIES, ids=lambda v: repr(v))
def test_derivatives_match_finite_differences(V):
    rng = np.random.default_rng(101)
    xs = rng.uniform(-20, 20, 1000)
    h = 1e-5
    fd1 = (V.v(xs + h) - V.v(xs - h)) / (2 * h)
    d1 = V.dv(xs)
    assert np.all(np.abs(d1 - fd1) <= 1e-5 * np.maximum(np.abs(d1), 1e-3))
    # the second difference at step 1e-5 sits below float64 cancellation
    # noise (|V| eps / h^2), so the curvature check uses a wider step
    h2 = 5e-4
    fd2 = (V.v(xs + h2) - 2 * V.v(xs) + V.v(xs - h2)) / h2**2
    d2 = V.d2v(xs)
    assert np.all(np.abs(d2 - fd2) <= 1e-5 * np.maximum(np.abs(d2), 1.0))


def test_compute_r_v_examples():
    assert compute_r_v(make_potential("power", r=4)) == pytest.approx(2.0, abs=1e-7)
    flat = make_potential("flat_bottom", b=1.0)
    assert compute_r_v(flat) == pytest.approx(2.0 * (1.0 + 12**-0.5), abs=1e-7)
    assert compute_r_v(make_potential("gaussian")) == pytest.approx(2.0)


def test_r_v_tightness():
    # curvature certified above 1 outside [-R/2, R/2], and R is not slack
    for V in (make_potential("power", r=4), make_potential("flat_bottom", b=1.0),
              make_potential("flat_bottom", b=2.0)):
        R = compute_r_v(V)
        xs = np.linspace(R / 2, 50, 20000)
        assert np.min(V.d2v(xs)) >= 1.0 - 1e-9
        assert np.min(V.d2v(-xs)) >= 1.0 - 1e-9
        if R > 2.0:  # the R >= 1 constraint is not binding, so R must be sharp
            shrunk = 0.98 * R / 2
            probe = np.linspace(shrunk, R / 2, 200)
            assert np.min(V.d2v(probe)) < 1.0


def test_r_v_rejects_bounded_curvature():
    flat = FlatBottomPotential(b=1.0)
    flat.d2v = lambda x: np.minimum(12.0 * flat._excess(x) ** 2, 0.5)  # cap below 1
    with pytest.raises(ValueError, match="not eventually"):
        compute_r_v(flat, search_bound=100.0)


def test_flat_bottom_is_c2_at_seam():
    V = make_potential("flat_bottom", b=1.0)
    eps = np.geomspace(1e-10, 1e-6, 20)
    inside = V.d2v(1.0 - eps)
    outside = V.d2v(1.0 + eps)
    assert np.all(np.abs(inside - outside) < 1e-8)
    assert V.d2v(1.0) == 0.0


def test_validate_assumption_quartic():
    rep = validate_assumption(make_potential("power", r=4))
    assert rep.passed
    assert rep.r_estimate == 4.0
    assert rep.c_minus == pytest.approx(3.0, rel=1e-6)
    assert rep.c_plus == pytest.approx(3.0, rel=1e-6)


def test_validate_assumption_gaussian_flagged():
    rep = validate_assumption(make_potential("gaussian"))
    assert not rep.passed
    assert not rep.growth
    assert any("gaussian-special" in f for f in rep.flags)


def test_validate_assumption_flat_bottom():
    rep = validate_assumption(make_potential("flat_bottom", b=1.0))
    assert rep.passed
    assert rep.c_minus > 0
    # curvature ratio approaches 12 from below on a finite window
    assert rep.c_plus <= 12.0 + 1e-9


def test_validate_assumption_abs_table_fails(tmp_path):
    xs = np.linspace(-10, 10, 2001)
    path = tmp_path / "abs.txt"
    np.savetxt(path, np.column_stack([xs, np.abs(xs)]))
    V = make_potential("user_table", path=str(path))
    rep = validate_assumption(V, x_max=8.0)
    assert not rep.passed
    assert not (rep.convex and rep.smooth)


def test_user_table_roundtrip(tmp_path):
    xs = np.linspace(-15, 15, 4001)
    path = tmp_path / "quartic.txt"
    np.savetxt(path, np.column_stack([xs, xs**4 / 4]))
    V = make_potential("user_table", path=str(path))
    probe = np.linspace(-10, 10, 100)
    assert np.allclose(V.v(probe), probe**4 / 4, rtol=1e-6, atol=1e-8)
    assert np.allclose(V.dv(probe), probe**3, rtol=1e-4, atol=1e-4)


def test_asymmetric_flat_bottom():
    V = make_potential("flat_bottom", b=1.0, eps=0.5)
    assert V.v(2.0) == pytest.approx(1.0 + 0.5)
    assert V.v(-2.0) == pytest.approx(1.0)
    rep = validate_assumption(V)
    assert rep.convex


def test_make_potential_errors():
    with pytest.raises(ValueError, match="unknown potential family"):
        make_potential("cosine")
    with pytest.raises(ValueError):
        make_potential("power", r=2.0)
    with pytest.raises(ValueError):
        make_potential("flat_bottom", b=-1.0)
