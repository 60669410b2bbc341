"""Training, evaluation, routing analysis, ablations and the command line."""
