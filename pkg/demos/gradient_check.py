"""Finite-difference check of every registered adjoint, every block and the tiny model.

Run: python3 demos/gradient_check.py [seed]
"""
import sys

from edgenext import checks

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
for scope in checks.SCOPES:
    for line in checks.iter_report(scope, checks.run_suite(scope, seed=seed)):
        print(line)
