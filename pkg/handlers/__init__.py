"""Subcommand handlers for the speaker-inventory separation CLI."""
from . import simulate
from . import experiments
from . import analysis

__all__ = ['simulate', 'experiments', 'analysis']
