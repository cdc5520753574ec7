"""Batch experiment harness: datasets, file formats, reports and the CLI."""
