"""Entropy-selective human-in-the-loop RL.

Actor-critic training on 2-D manipulation tasks where each replay sample is
scored by its estimated influence on policy entropy, and only samples inside
a percentile band of that influence contribute to actor updates.
"""

__version__ = "0.1.0"
