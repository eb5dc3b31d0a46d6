"""End-to-end encrypted dossier sharing through an untrusted synchronizer.

Clients keep their own rows in plain text and everyone else's shared rows as
ciphertext; the relay in the middle stores only ciphertext and wrapped keys.
"""

__version__ = "0.1.0"
