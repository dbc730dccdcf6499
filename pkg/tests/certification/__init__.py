# This file makes the tests/certification directory a Python package
