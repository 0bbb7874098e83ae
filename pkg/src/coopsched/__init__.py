"""Budgeted per-cell feature scheduling for multi-agent BEV perception."""
