"""Robust classifier training with synthesized adversarial perturbations.

A perturbation generator maps Gaussian noise to bounded image perturbations
and is trained to maximize the entropic optimal-transport distance between
the latent representations of natural and perturbed batches; the classifier
descends cross-entropy on the perturbed batch plus the same OT distance.
"""

__version__ = "0.1.0"
