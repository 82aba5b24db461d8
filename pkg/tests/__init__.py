"""Tests package for mpm-flow."""
