"""Run the acceptance suite and print one verdict per criterion."""

import sys

import pytest

if __name__ == "__main__":
    sys.exit(pytest.main(["tests/test_acceptance.py", "-q", "-s", *sys.argv[1:]]))
