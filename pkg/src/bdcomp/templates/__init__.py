"""Jinja2 templates shipped with bdcomp."""
