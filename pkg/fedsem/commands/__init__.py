"""Command line subcommands, one per pipeline stage."""
