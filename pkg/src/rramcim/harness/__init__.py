"""CLI, file formats, and reference workloads."""
