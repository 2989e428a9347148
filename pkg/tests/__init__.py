"""Test package for matrix-ad."""
