"""Command-line surface and file formats."""
