"""Event-driven robot steering at desk scale.

Constant-event-count DVS histograms and normalized APS frames feed a tiny
convolutional network; its low-pass filtered LCRN decisions drive a pursuit
behavior state machine over a 2-byte UDP control protocol, all closed around
a deterministic 2-D arena simulator.
"""

from evsteer.nnet import Decision, Network, runtime_network

__version__ = "0.1.0"

__all__ = ["Decision", "Network", "runtime_network", "__version__"]
