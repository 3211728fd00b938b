"""Integration tests for textkd-slu.

These tests run the stage commands end to end on a tiny corpus.
"""
