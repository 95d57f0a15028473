"""Anchors the test directory on sys.path so shared helpers import."""
