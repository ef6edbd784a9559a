"""attsurf: differentiable X-ray attenuation-surface reconstruction.

A small research codebase that trains an implicit signed-distance surface with
a bounded attenuation field from 2-D X-ray projections, plus the analytic
phantom projector used to generate and verify desk-scale datasets.
"""

from attsurf.autodiff import AdamState, Tensor, adam_step, backward, gradient_check
from attsurf.cameras import Camera, RefineSchedule, pose_step, tau_at
from attsurf.encoding import FrequencyConfig, HashGridConfig
from attsurf.fields import (
    AttenuationBand,
    FieldConfig,
    MaterialRanges,
    SurfaceAttenuationField,
    geometric_init,
    material_ranges,
    sbf,
)
from attsurf.meshing import (
    TriMesh,
    extract_surface,
    load_ply,
    marching_cubes,
    save_ply,
    surface_points,
)
from attsurf.metrics import (
    chamfer_distance,
    icp_align,
    psnr,
    ssim,
    umeyama_align,
)
from attsurf.phantoms import (
    AnalyticPhantom,
    make_trajectory,
    nested_spheres_phantom,
    project,
    sphere_phantom,
    write_dataset,
)
from attsurf.rendering import (
    Ray,
    render_intensity,
    render_rays,
    sphere_bounds,
    stratified_sample,
)
from attsurf.training import (
    ProjectionDataset,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    nested_preset,
    perturb_camera_translations,
    render_view,
    run_two_stage,
    save_checkpoint,
    sphere_preset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Tensor", "adam_step", "backward", "gradient_check",
    "Camera", "RefineSchedule", "pose_step", "tau_at",
    "FrequencyConfig", "HashGridConfig",
    "AttenuationBand", "FieldConfig", "MaterialRanges",
    "SurfaceAttenuationField", "geometric_init", "material_ranges", "sbf",
    "TriMesh", "extract_surface", "load_ply", "marching_cubes", "save_ply",
    "surface_points",
    "chamfer_distance", "icp_align", "psnr", "ssim", "umeyama_align",
    "AnalyticPhantom", "make_trajectory", "nested_spheres_phantom", "project",
    "sphere_phantom", "write_dataset",
    "Ray", "render_intensity", "render_rays", "sphere_bounds",
    "stratified_sample",
    "ProjectionDataset", "TrainConfig", "TrainResult", "load_checkpoint",
    "nested_preset", "perturb_camera_translations", "render_view",
    "run_two_stage", "save_checkpoint", "sphere_preset", "train",
    "__version__",
]
