"""Command-line harness, configuration, persistence and the stub backend server."""
