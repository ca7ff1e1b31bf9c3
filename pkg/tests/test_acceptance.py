"""Acceptance criteria at their stated tolerances; one result line per criterion."""

import pytest

from sigprop.acceptance import CRITERIA, run_criterion

RESULTS = []


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    res = run_criterion(number)
    RESULTS.append(res)
    print(res.line())
    assert res.passed, res.detail
