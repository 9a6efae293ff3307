"""Training-data influence estimation for diffusion models.

Caches sketch-compressed, L2-normalized per-timestep loss gradients of
every training sample, then scores a query (a generated or held-out point)
against the cache by summed inner products -- exactly via a streaming scan,
or approximately via an HNSW index over concatenated sketches.
"""

__version__ = "0.1.0"
