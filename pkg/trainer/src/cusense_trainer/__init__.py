"""Offline trainer for the grid-localization network.

Consumes the labeled feature CSV plus normalization stats emitted by the
dataset builder, trains with Adam on the KL objective against Gaussian-
smoothed grid targets, and exports weights in the CUSW0001 tensor-record
format the inference engine loads.
"""

__version__ = "0.1.0"
