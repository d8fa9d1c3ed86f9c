"""CLI experiment harness: configs, orchestration, persistence, plots."""
