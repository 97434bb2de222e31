#!/usr/bin/env python3
"""Run the finite-difference gradient suite from the command line.

Usage: python scripts/run_gradcheck.py [--seeds 5]
"""

import sys

from sevx.cli import main as sevx_main

if __name__ == "__main__":
    sys.exit(sevx_main(["gradcheck"] + sys.argv[1:]))
