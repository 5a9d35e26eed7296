"""Point-cloud convolution with epsilon-ball neighborhoods, Sobolev-regularized
cubic weight functions and viewpoint-invariant descriptors."""

__version__ = "0.1.0"
