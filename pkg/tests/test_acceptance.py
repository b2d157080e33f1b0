"""The ten acceptance criteria at their stated tolerances and time budgets.

Each test prints its PASS/FAIL line; the lines are repeated together in the
terminal summary.
"""

import pytest

from sup_kit import acceptance


@pytest.mark.parametrize("number", range(1, 11))
def test_criterion(number, accept_ctx, record_result):
    result = acceptance.CRITERIA[number - 1](accept_ctx)
    record_result(result)
    print(result.line())
    assert result.passed, result.line()
