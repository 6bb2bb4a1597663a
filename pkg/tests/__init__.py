"""Tests for pairedinv."""
