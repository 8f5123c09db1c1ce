"""Self-supervised dynamic 3D Gaussian reconstruction at desk scale.

Feed-forward prediction of per-frame 3D Gaussians and their velocities from
sparse posed images, aggregated across time into an amodal representation and
trained purely with reconstruction losses on procedurally generated scenes.
"""

__version__ = "0.1.0"
