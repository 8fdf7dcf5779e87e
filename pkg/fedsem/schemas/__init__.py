"""Configuration and record models (pydantic)."""
