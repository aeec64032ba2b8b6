"""Desk-scale toolkit for language-agnostic speech translation experiments
on synthetic bilingual pseudo-speech, with concatenation-based
code-switching augmentation and a WER/BLEU evaluation harness."""

__version__ = "0.1.0"
