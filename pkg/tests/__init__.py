"""Test package for the MDT toolkit."""
