"""Master-key recovery for Hive v5 style ransomware from known plaintext.

Modules: layout (spans, keystream offsets, filenames), simulator (corpora and
infection), extraction (equations), solver (union-find key graph), decryptor
and harness/cli (experiments and the command line).
"""

__version__ = "0.1.0"
