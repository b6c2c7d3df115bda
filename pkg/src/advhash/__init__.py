"""Adversarial semi-supervised hashing for image retrieval.

Two networks trained in alternation: a hard-sample generator that rotates
and masks inputs, and a hashing encoder that maps images to compact binary
codes. Includes a Hamming-ranking evaluator (mAP, P@N, PR) and an ablation
harness.
"""

__version__ = "0.1.0"
