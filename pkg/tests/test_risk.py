import numpy as np
import pytest

from app.exceptions import CoefficientError
from app.services.risk import RiskSpec, axiom_suite, convexity_probe, rho
from app.services.solver import Driver
from app.services.terminal import TerminalProcess

AXIOMS = {"convexity", "monotonicity", "translation_invariance", "past_independence"}


def test_zero_driver_passes_every_axiom(bundle, basis):
    spec = RiskSpec(Driver.zero(), TerminalProcess.markov("x"))
    report = axiom_suite(spec, 1.0, [0.25, 0.5, 0.75], bundle, basis)
    assert report.passed
    assert {v.name for v in report.verdicts} == AXIOMS | {"normalization"}
    assert report.normalization == 0.0
    assert report["past_independence"].worst_margin == 0.0


def test_risk_of_position_is_minus_expectation(bundle, basis):
    spec = RiskSpec(Driver.zero(), TerminalProcess.markov("x"))
    est = rho(spec, 0, bundle, basis)
    assert est.mean == pytest.approx(-float(bundle.X[-1].mean()), abs=1e-10)
    assert est.stderr > 0


def test_penalized_driver_on_jumps(jump_bundle, basis):
    driver = Driver.from_expressions("0.5 * abs(z) + 0.2 * abs(u1)", ["zeta"])
    spec = RiskSpec(driver, TerminalProcess.markov("x"))
    assert spec.validate().passed
    report = axiom_suite(spec, 1.0, [0.5], jump_bundle, basis, t_index=3)
    assert report["translation_invariance"].passed
    assert report["translation_invariance"].worst_margin <= 1e-8
    assert report["past_independence"].passed
    assert report["normalization"].passed
    assert report["monotonicity"].passed
    # the penalty makes the risk larger than -E[psi]
    assert report.values[0] > -float(jump_bundle.X[-1].mean())


def test_normalization_is_skipped_when_driver_does_not_vanish(bundle, basis):
    spec = RiskSpec(Driver.from_expressions("0.1 + 0.5 * abs(z)"), TerminalProcess.markov("x"))
    report = axiom_suite(spec, 1.0, [0.5], bundle, basis)
    assert "normalization" not in {v.name for v in report.verdicts}
    assert report.normalization > 0


def test_rows_cover_every_verdict(bundle, basis):
    spec = RiskSpec(Driver.zero(), TerminalProcess.markov("x"))
    report = axiom_suite(spec, 0.5, [0.5], bundle, basis)
    rows = report.rows()
    assert [r["axiom"] for r in rows] == [v.name for v in report.verdicts]
    assert all(r["verdict"] in ("pass", "fail") for r in rows)


def test_y_dependent_driver_is_rejected():
    with pytest.raises(CoefficientError):
        RiskSpec(Driver.from_expressions("0.5 * y"), TerminalProcess.markov("x"))


def test_non_convex_driver_is_rejected():
    spec = RiskSpec(Driver.from_expressions("-abs(z)"), TerminalProcess.markov("x"))
    with pytest.raises(CoefficientError):
        spec.validate()
    assert RiskSpec(Driver.from_expressions("-abs(z)"), TerminalProcess.markov("x"), convex=False).validate() is None


def test_convexity_probe():
    assert convexity_probe(Driver.from_expressions("z ^ 2 + abs(u1)", ["zeta"])).passed
    probe = convexity_probe(Driver.from_expressions("-(z ^ 2)"))
    assert not probe.passed
    assert probe.worst_gap > 0
    assert "z_a" in probe.point


def test_argument_validation(bundle, basis):
    spec = RiskSpec(Driver.zero(), TerminalProcess.markov("x"))
    with pytest.raises(ValueError):
        rho(spec, bundle.grid.N + 1, bundle, basis)
    with pytest.raises(ValueError):
        axiom_suite(spec, 1.0, [1.5], bundle, basis)
    with pytest.raises(ValueError):
        axiom_suite(spec, 1.0, [0.5], bundle, basis, t_index=0)


def test_custom_pair(bundle, basis):
    spec = RiskSpec(Driver.from_expressions("0.5 * abs(z)"), TerminalProcess.markov("x"))
    pair = (TerminalProcess.markov("x"), TerminalProcess.markov("max(x, 0)"))
    report = axiom_suite(spec, 1.0, [0.3, 0.7], bundle, basis, pair=pair)
    assert report["monotonicity"].passed
    assert np.isfinite(report["convexity"].worst_margin)
