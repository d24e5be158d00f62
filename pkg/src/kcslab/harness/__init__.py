"""Configuration, experiment drivers and command-line interface."""
