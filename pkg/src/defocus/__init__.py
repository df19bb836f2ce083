"""Differentiable aperture rendering and aperture-supervised depth recovery."""

from .comprender import (DepthPlanes, blur_stack, disk_kernel, pmf_to_depth, render_compositional,
                         render_compositional_grad, render_pmf, shift_pmf, softmax_pmf)
from .core import ApertureMask, make_aperture, sample_bilinear, sample_bilinear_grad
from .lfrender import (LfRenderConfig, expand_depth, integrate_aperture, ray_depth_loss, render_light_field,
                       render_light_field_grad, warp_to_views)
from .metrics import psnr, ssim
from .optim import OptimConfig, SupervisionSet, Target, adam_step, optimize_depth_comp, optimize_depth_lf
from .scenesim import SceneSpec, make_test_scene, oracle_lightfield, oracle_sdof, oracle_view
from .smooth import SmoothConfig, confidence_from_image, solve_edge_aware, solve_edge_aware_grad, tv_loss

__all__ = [
    "ApertureMask", "DepthPlanes", "LfRenderConfig", "OptimConfig", "SceneSpec", "SmoothConfig",
    "SupervisionSet", "Target", "adam_step", "blur_stack", "confidence_from_image", "disk_kernel",
    "expand_depth", "integrate_aperture", "make_aperture", "make_test_scene", "optimize_depth_comp",
    "optimize_depth_lf", "oracle_lightfield", "oracle_sdof", "oracle_view", "pmf_to_depth", "psnr",
    "ray_depth_loss", "render_compositional", "render_compositional_grad", "render_light_field",
    "render_light_field_grad", "render_pmf", "sample_bilinear", "sample_bilinear_grad", "shift_pmf",
    "softmax_pmf", "solve_edge_aware", "solve_edge_aware_grad", "ssim", "tv_loss", "warp_to_views",
]
