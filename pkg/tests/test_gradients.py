import pytest

import gradsuite


@pytest.mark.parametrize("name", sorted(gradsuite.CASES))
def test_matches_central_differences(name):
    tol = gradsuite.CASES[name][1]
    assert gradsuite.run_case(name, trials=5, seed=99) < tol
