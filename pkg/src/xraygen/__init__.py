"""Desk-scale visual-to-language alignment for report generation."""
