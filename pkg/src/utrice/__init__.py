"""Differentiable triangle ray tracing: triangles as direct, optimizable
ray-tracing primitives with analytic gradients, pruning/densification, and
a training CLI."""

from .appearance import sh_basis, sh_eval
from .autograd import (GradientAccumulator, backward_ray, backward_rays,
                       backward_window, fd_oracle)
from .bvh import Bvh, bvh_build
from .camera import Camera, RayBatch, generate_rays, look_at
from .config import TrainConfig, build_config
from .densify import IntervalStats, occlusion_footprint, prune_and_densify
from .geometry import (EdgeFrame, Ray, Triangle, TriangleSoup, edge_normals,
                       intersect_plane, window_response)
from .losses import dssim, l1_loss, loss_normal, loss_opacity, loss_size, loss_total
from .metrics import psnr
from .losses import ssim
from .optim import Adam
from .tracer import (CompositeState, HitBuffer, Image, RenderOutputs,
                     TracerScene, render_image)
from .training import Dataset, train

__version__ = "0.1.0"
