# This file makes the tests/posterior directory a Python package
