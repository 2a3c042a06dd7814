"""Test suite for bdcomp."""
