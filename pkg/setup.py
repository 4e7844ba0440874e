#!/usr/bin/env python
"""Setup script for ageatlas."""

from setuptools import setup

setup()
