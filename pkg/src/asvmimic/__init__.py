"""Speaker-verification mimicry experiments: i-vector/PLDA systems, target
ranking with a public system, attack scoring against a second system, and
prosodic analysis of mimicked speech."""

__version__ = "0.1.0"
