"""CLI module for bdcomp."""
