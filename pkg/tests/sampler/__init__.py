# This file makes the tests/sampler directory a Python package
