"""Cross-dynamics policy transfer lab.

Exact value-difference bound verification on finite MDPs, plus a
context-conditioned action-translator training pipeline (TD3 + self-imitation
with episode-level policy-transfer selection) on toy control task families.
"""

__version__ = "0.1.0"
