"""Robust worst-case WSR beamforming via bilevel cutting planes."""
