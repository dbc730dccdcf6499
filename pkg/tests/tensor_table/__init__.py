# This file makes the tests/tensor_table directory a Python package
