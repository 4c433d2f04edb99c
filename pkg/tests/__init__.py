"""Test suite for the kpconvx package."""
