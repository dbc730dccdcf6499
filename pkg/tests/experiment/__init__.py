# This file makes the tests/experiment directory a Python package
