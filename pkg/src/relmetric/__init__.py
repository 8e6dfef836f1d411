"""Learned spatial-relation metric over depth projections of two-object scenes.

The package trains a triplet network on orthographic depth images of posed
point-cloud pairs and uses the learned distance to optimize object poses so a
test scene imitates a reference arrangement.
"""

__version__ = "0.1.0"
