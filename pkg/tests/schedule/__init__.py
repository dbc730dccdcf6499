# This file makes the tests/schedule directory a Python package
