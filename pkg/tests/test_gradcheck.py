import numpy as np

from ngdenoise.gradcheck import CHECKS, CheckResult, corrupted_backward, numeric_grad, rel_error, run_suite
from ngdenoise.nncore import functional as F


def test_suite_enumerates_at_least_12_checks():
    names = [name for name, _, _ in CHECKS]
    assert len(names) >= 12 and len(set(names)) == len(names)
    assert {"nen.end_to_end", "rn.end_to_end"} <= set(names)


def test_rel_error_floor_and_zero():
    assert rel_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    # second entry is judged against the floor (1e-3 of the largest), not its own tiny size
    assert np.isclose(rel_error([1.0, 1e-9], [1.0, 2e-9]), 1e-9 / 1e-3)


def test_numeric_grad_of_quadratic():
    x = np.array([0.3, -1.2, 2.0])
    got = numeric_grad(lambda: float(np.sum(x ** 3)), x, [(0,), (1,), (2,)])
    assert np.allclose(got, 3 * x ** 2, rtol=1e-8)


def test_passed_requires_finite_error_and_few_kinks():
    assert CheckResult("a", 1e-8, 1e-6, 10, 5).passed
    assert not CheckResult("a", 1e-8, 1e-6, 10, 6).passed
    assert not CheckResult("a", float("nan"), 1e-6, 10).passed
    assert not CheckResult("a", 2e-6, 1e-6, 10).passed


def test_selected_checks_pass_and_repeat():
    subset = ("conv2d.input", "leaky_relu", "rdb")
    a = run_suite(3, only=subset)
    assert [r.name for r in a] == [n for n, _, _ in CHECKS if n in subset]
    assert all(r.passed for r in a)
    assert run_suite(3, only=subset) == a


def test_corruption_hook_is_detected_and_undone():
    original = F.conv2d_backward
    with corrupted_backward():
        assert F.conv2d_backward is not original
    assert F.conv2d_backward is original
    bad = run_suite(0, corrupt=True, only=("conv2d.weight", "rdb"))
    assert not any(r.passed for r in bad)
