"""The numbered acceptance battery at full budget, one test per criterion.

Each test prints its ``PASS``/``FAIL`` line (measured values next to the
thresholds) and asserts the outcome.  ``holderflow suite`` runs the same
functions from the command line.
"""

from __future__ import annotations

import pytest

from holderflow.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("number", [c[0] for c in CRITERIA], ids=[f"acc{c[0]:02d}" for c in CRITERIA])
def test_acceptance(number, capsys):
    result = run_criterion(number, seed=0, fast=False)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()
