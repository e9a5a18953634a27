"""
Core pipeline stages for gtforge.

Each module covers one stage: reading binaries (binfmt), parsing assembler
listings (listing), building and checking ground truth (groundtruth,
reconcile, discovery, checker), scoring tools (evaluator, report) and
capturing build output (capture).
"""
