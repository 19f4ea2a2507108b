#!/usr/bin/env python3
"""
Setup script for the branchsim package.

Metadata lives in pyproject.toml; this shim keeps legacy editable installs working.
"""

from setuptools import setup

if __name__ == "__main__":
    setup()
