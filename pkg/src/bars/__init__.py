"""Binary architecture search: relaxed joint search of cell topology, width and
depth for fully binarized networks, plus a bit-packed XNOR inference path."""

__version__ = "0.1.0"
