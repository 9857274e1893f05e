"""Workflow orchestration engine for medical-imaging analysis."""

__version__ = "0.1.0"
