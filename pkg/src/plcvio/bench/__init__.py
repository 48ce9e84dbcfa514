"""Benchmark campaign, metrics, reports and CLI."""
