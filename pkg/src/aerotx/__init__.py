"""aerotx: task-oriented aerial image transmission simulator.

A channel-aware block-selection policy trained by policy gradient picks
which semantic blocks of an aerial image to compress with learned
block-wise compressive sensing and send over a simulated Rayleigh uplink;
a reconstruction network and a frozen classifier at the receiver provide
the task signal that trades uplink latency against accuracy.
"""

__version__ = "0.1.0"
