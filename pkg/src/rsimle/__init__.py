"""Single-pass multimodal imitation policies.

A latent-conditioned linear-attention generator trained with a batch-global
rejection-sampling IMLE objective, driven at evaluation time by a
receding-horizon loop with observation-only candidate selection. Includes a
synthetic bimodal benchmark, baselines, and statistical property studies.
"""

__version__ = "0.1.0"
