"""Fingerprint-to-SMILES sequence modeling toolkit.

Translate extended-connectivity fingerprints into ranked streams of SMILES
strings with an encoder/decoder recurrent network and exact best-first
enumeration, then specialize the model on matched molecular pairs to propose
property-improved neighbor molecules.
"""

__version__ = "0.1.0"
