"""Point-cloud neural rendering toolkit.

Pipeline stages: rasterize a point cloud against pixel rays, rectify the
winning points onto their rays at the recorded depth, positionally encode
and map through a small MLP to a latent feature map, then refine with a
gated-convolution encoder-decoder. Training, metrics and file formats are
included; see the CLI (``pcrender --help``) for the human entry points.
"""

__version__ = "0.1.0"
