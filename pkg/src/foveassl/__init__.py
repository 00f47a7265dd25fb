"""Self-supervised learning from egocentric video with gaze-centred crops.

Frames are cropped around where the wearer looks, paired with a random
temporal neighbour, and trained with an InfoNCE objective against an EMA
target encoder. Frozen features are then scored with linear probes.
"""

__version__ = "0.1.0"
