"""attrcloak: k-attribute anonymization of face-like images by adversarial perturbation."""

__version__ = "0.1.0"
