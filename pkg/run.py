#!/usr/bin/env python3
"""
Simple script to run the SmoothGuard CLI directly.
"""
from smoothguard.cli import main

if __name__ == "__main__":
    main()
