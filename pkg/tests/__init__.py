"""Tests for dsva."""
