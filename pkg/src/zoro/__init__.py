"""Active rule support for coding agents.

Three moves, one loop: enrich plans with the rules that apply to each step,
enforce strict rules by refusing step completion until evidence is verified,
and evolve the ruleset from the notes humans leave during review.
"""

__version__ = "0.1.0"
