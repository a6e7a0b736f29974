"""Tests for the SmoothGuard package."""
