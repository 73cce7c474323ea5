"""Tests package for the speaker-inventory separation toolkit."""
