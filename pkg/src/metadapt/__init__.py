"""Open-compound domain adaptation for semantic segmentation at desk scale.

Pipeline stages: style clustering of an unlabeled compound target domain,
branch-normalized adversarial training, hypernetwork fusion of branch
predictions, meta-training for one-step online updates on unseen domains.
"""

__version__ = "0.1.0"
