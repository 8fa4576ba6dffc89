"""Suction pick success prediction with multimodal masked-autoencoder pretraining.

Synthetic cluttered-tote scenes with an analytic success oracle stand in for
warehouse data; the learning stack (MultiMAE-style pretraining, cross-attention
pick fusion, finetuned prediction head) runs at desk scale on CPU.
"""

__version__ = "0.1.0"
