# This file makes the tests/distributions directory a Python package
