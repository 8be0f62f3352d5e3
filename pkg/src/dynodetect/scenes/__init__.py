"""Bundled scene descriptions used by the test suite and CLI examples."""
