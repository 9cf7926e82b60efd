"""Pytest configuration and fixtures"""

import os
import sys
from importlib.machinery import SourceFileLoader
from importlib.util import module_from_spec, spec_from_loader
from pathlib import Path

_original_cwd = os.getcwd()

# Get the project root directory
project_root = Path(__file__).parent.parent

# Add project root to sys.path
sys.path.insert(0, str(project_root))

# Import the leafxai script using SourceFileLoader (works with files without .py extension)
leafxai_path = project_root / "leafxai"
loader = SourceFileLoader("leafxai_module", str(leafxai_path))
spec = spec_from_loader(loader.name, loader)
leafxai_module = module_from_spec(spec)
sys.modules["leafxai_module"] = leafxai_module
spec.loader.exec_module(leafxai_module)

pytest_plugins = []


def pytest_runtest_setup(item):
    """Restore the working directory if a previous test deleted it"""
    try:
        os.getcwd()
    except (FileNotFoundError, OSError):
        os.chdir(_original_cwd)
