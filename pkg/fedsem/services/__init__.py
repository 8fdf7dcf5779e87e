"""Service layer: one module per pipeline concern."""
