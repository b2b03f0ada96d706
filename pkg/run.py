#!/usr/bin/env python
"""Command-line entry point for the batchless normalization experiments."""
import os
import sys


def main():
    """Run one BatchlessNorm command."""
    sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "libs"))
    from BatchlessNorm.cli import main as batchless_main

    sys.exit(batchless_main())


if __name__ == '__main__':
    main()
