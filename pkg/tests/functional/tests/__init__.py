"""Package containing desk-scale end-to-end tests."""
