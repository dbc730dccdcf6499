# This file makes the tests/score_gap directory a Python package
