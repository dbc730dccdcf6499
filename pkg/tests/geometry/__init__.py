# This file makes the tests/geometry directory a Python package
