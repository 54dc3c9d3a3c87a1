"""
pytest configuration for expertsim tests.

Shared configs and traces live in expertsim/tests/factories.py.
"""
import os

import django

# Configure Django settings
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'edgemoe_lab.settings')
django.setup()
