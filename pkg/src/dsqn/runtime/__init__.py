"""Configuration, checkpoints, metrics sinks and seeding."""
