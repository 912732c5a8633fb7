"""Run the acceptance suite and print one pass/fail line per criterion.

Extra arguments are passed to pytest, e.g. ``-k "1_ or 2_"``.
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", "-rN", *sys.argv[1:]]))
