"""Self-supervised writing-action planning for a small language model.

Pipeline: segment articles into sentences, embed them with a deterministic
hashed n-gram encoder, cluster embeddings into a discrete action vocabulary,
train a planner to predict the next action, condition a from-scratch
decoder-only LM on actions through per-layer adapters, and evaluate surface
and structural generation quality.
"""

__version__ = "0.1.0"
