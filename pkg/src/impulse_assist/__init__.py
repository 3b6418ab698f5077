"""Momentum-space assistive impulse toolkit."""
