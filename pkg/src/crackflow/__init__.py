"""Crack edge measurement from image pairs via stacked optical-flow networks.

Subpackage map:

- tensor, ops: minimal deterministic autodiff engine (tape based)
- model: the three-network cascade and its weight file format
- dic: subset-matching displacement fields and crack edge labeling
- synth, dataio: synthetic speckle sequences, image and manifest formats
- training: class-balanced edge loss, AdamW, the training loop
- metrics: pixel-exact confusion counts, ODS/OIS, PR curves
- speed: crack front extraction and propagation speed reports
- cli: batch subcommands gluing the above together
"""

__version__ = "0.1.0"
