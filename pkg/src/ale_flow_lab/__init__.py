# src/ale_flow_lab/__init__.py
"""Ricci-DeTurck flow and Lichnerowicz stability experiments on ALE backgrounds."""

__version__ = "0.1.0"
