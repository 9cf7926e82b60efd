#!/usr/bin/env python3
"""
Setup script for leafxai
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as f:
    long_description = f.read()

setup(
    name="leafxai",
    version="0.3.0",
    description="Pixel attribution maps for leaf-disease image classifiers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "attribution",
        "autodiff",
        "errors",
        "evalkit",
        "netgraph",
        "oracles",
        "tensorcore",
        "trainer",
    ],
    scripts=["leafxai"],
    install_requires=[
        "numpy>=1.24.0",
        "PyYAML>=6.0",
        "pydantic>=2.0.0",
        "Pillow>=10.0.0",  # PNG heatmaps, panels and dataset images
        "scipy>=1.10.0",  # Connected components, mask erosion, rank statistics
    ],
    extras_require={
        "test": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "hypothesis>=6.0.0",
        ],
    },
    python_requires=">=3.10",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Programming Language :: Python :: 3.13",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
)
