"""Experiment harness: config, runner, comparison grid, plots and CLI."""
