"""Report rendering for bdcomp."""
