#!/usr/bin/env python3
"""
This file is part of eigensplat, eigenvalue-feature regularized Gaussian splatting.
"""
import sys

from . import cli

if __name__ == "__main__":
    sys.exit(cli.main())
