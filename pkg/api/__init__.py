"""Hydra results API."""
