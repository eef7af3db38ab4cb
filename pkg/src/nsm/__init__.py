"""Neural symbolic machine: a seq2seq programmer with key-variable memory, a
Lisp-style interpreter over a triple store, and iterative-ML plus augmented
REINFORCE training."""

__version__ = "0.1.0"
