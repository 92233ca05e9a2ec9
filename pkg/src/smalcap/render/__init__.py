"""Differentiable silhouette rasterization, textured rendering and uv-flow."""

from .backend import BACKEND, available_backends, get_kernels
from .raster import (DEFAULT_CUTOFF, Fragments, SoftSilhouette, face_normals, rasterize_hard,
                     rasterize_silhouette, soft_silhouette_2d)
from .texture import (ATLAS_SIZE, RenderOutput, TextelMap, TextureAtlas, UVFlow, apply_uvflow,
                      bilinear_sample, bilinear_scatter, bilinear_weights, check_layout, composite,
                      compute_uvflow, estimate_background, quadrant_layout, render_textured, split_atlas, stitch_subimages,
                      textel_map, textel_points, visible_pixels)
