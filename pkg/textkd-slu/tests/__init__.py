"""Tests for the kdslu package."""
