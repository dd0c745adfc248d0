import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from concave_lottery.numerics import finite_diff_grad, relative_error
from concave_lottery.regularizers import (
    DEFAULT_LAMBDA,
    RegularizerSpec,
    phi_gap,
    reg_grad,
    reg_scalar,
    reg_value,
)

L1 = RegularizerSpec("l1", 1.0)
LOG = RegularizerSpec("log", 1.0, 0.1)
unit = st.floats(0.0, 1.0)


class TestScalar:
    @pytest.mark.parametrize("spec", [L1, LOG])
    def test_endpoints(self, spec):
        assert reg_scalar(spec, 0.0) == 0.0
        assert reg_scalar(spec, 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_log_midpoint(self):
        assert reg_scalar(LOG, 0.5) == pytest.approx(math.log(6) / math.log(11), rel=1e-14)
        assert reg_scalar(LOG, 0.5) == pytest.approx(0.7472, abs=5e-5)

    def test_out_of_box_rejected(self):
        with pytest.raises(ValueError, match="clamp"):
            reg_scalar(LOG, 1.2)
        with pytest.raises(ValueError):
            reg_value(L1, [0.5, -0.1])


class TestValueAndGrad:
    def test_zeros(self):
        assert reg_value(LOG, np.zeros(4)) == 0.0

    def test_ones(self):
        assert reg_value(LOG, np.ones(5)) == pytest.approx(5.0)
        assert reg_value(L1, np.ones(5)) == 5.0

    def test_log_pair(self):
        assert reg_value(LOG, [0.5, 0.5]) == pytest.approx(2 * math.log(6) / math.log(11))
        assert reg_value(LOG, [0.5, 0.5]) == pytest.approx(1.4944, abs=5e-5)

    def test_l1_gradient(self):
        assert np.array_equal(reg_grad(L1, [0.1, 0.9, 0.4]), [1.0, 1.0, 1.0])

    def test_log_gradient_at_zero(self):
        assert reg_grad(LOG, [0.0])[0] == pytest.approx(1 / (0.1 * math.log(11)))
        assert reg_grad(LOG, [0.0])[0] == pytest.approx(4.1703, abs=5e-5)

    @pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
    def test_log_gradient_matches_differences(self, eps, rng):
        spec = RegularizerSpec("log", 1.0, eps)
        m = rng.uniform(0.05, 0.95, 7)
        fd = finite_diff_grad(lambda x: reg_value(spec, x), m, 1e-6)
        assert relative_error(reg_grad(spec, m), fd) < 1e-7


class TestPhi:
    @given(st.lists(st.booleans(), min_size=1, max_size=12))
    def test_binary_is_zero(self, bits):
        assert phi_gap(LOG, np.array(bits, float)) == pytest.approx(0.0, abs=1e-12)

    @given(st.lists(unit, min_size=1, max_size=12))
    def test_l1_is_zero(self, vals):
        assert phi_gap(L1, np.array(vals)) == 0.0

    def test_log_half(self):
        assert phi_gap(LOG, [0.5]) == pytest.approx(math.log(6) / math.log(11) - 0.5)
        assert phi_gap(LOG, [0.5]) == pytest.approx(0.2472, abs=5e-5)

    @given(st.lists(st.floats(1e-3, 1 - 1e-3), min_size=1, max_size=8))
    def test_positive_off_the_corners(self, vals):
        assert phi_gap(LOG, np.array(vals)) > 0


class TestSpec:
    def test_defaults(self):
        assert RegularizerSpec.default("l1").lam == DEFAULT_LAMBDA["l1"] == 3e-6
        assert RegularizerSpec.default("log").lam == 1e-6
        assert RegularizerSpec().epsilon == 0.1

    def test_validation(self):
        with pytest.raises(ValueError):
            RegularizerSpec("lq")
        with pytest.raises(ValueError):
            RegularizerSpec("log", -1.0)
        with pytest.raises(ValueError):
            RegularizerSpec("log", 1.0, 0.0)

    def test_concavity_flag(self):
        assert LOG.strictly_concave and not L1.strictly_concave
        assert LOG.with_lambda(0.3) == RegularizerSpec("log", 0.3, 0.1)
