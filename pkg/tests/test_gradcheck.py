import numpy as np
import pytest

from adaptvig import gradcheck as GC


@pytest.fixture(scope="module")
def primitive_errors():
    rng = np.random.default_rng(GC.DEFAULT_SEED)
    return {name: fn() for name, fn in GC.primitive_checks(rng).items()}


def test_every_primitive_within_tolerance(primitive_errors):
    bad = {k: v for k, v in primitive_errors.items() if v > GC.TOL}
    assert not bad


def test_closed_form_temperature_gradient():
    assert GC.gate_closed_form_error(np.random.default_rng(0)) <= GC.CLOSED_FORM_TOL


@pytest.mark.parametrize("gate,dist", [("exp_decay", "L1"), ("sigmoid", "L1"), ("exp_decay", "L2")])
def test_aggregate_variants(gate, dist):
    assert GC.agc_variant_error(np.random.default_rng(1), gate, dist) <= GC.TOL


def test_gate_map_fd():
    assert GC.gate_fd_error(np.random.default_rng(2)) <= GC.TOL


def test_check_function_ignores_untouched_outputs():
    from adaptvig import tensor as T
    from adaptvig.tensor import Tensor

    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    assert GC.check_function(lambda: T.roll(x, 1, "width"), [x], rng) < 1e-9


def test_report_format():
    rows = [GC.CheckResult("a", 1e-9, 1e-6), GC.CheckResult("bb", 2e-5, 1e-5)]
    text = GC.format_report(rows)
    assert "PASS" in text.splitlines()[1] and "FAIL" in text.splitlines()[2]
    assert rows[0].passed and not rows[1].passed
