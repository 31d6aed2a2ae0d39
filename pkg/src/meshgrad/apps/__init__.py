from .cloth import ClothConfig, ClothSim
from .param import ParamConfig, parameterize, planar_project, tutte_embedding, uv_jacobians
from .smooth import SmoothReport, bench_gradient, edge_length_energy, manual_gradient, smooth
from .sphere import SphereConfig, face_determinants, spherical_parameterize, tangent_bases

__all__ = [
    "ClothConfig",
    "ClothSim",
    "ParamConfig",
    "SmoothReport",
    "SphereConfig",
    "bench_gradient",
    "edge_length_energy",
    "face_determinants",
    "manual_gradient",
    "parameterize",
    "planar_project",
    "smooth",
    "spherical_parameterize",
    "tangent_bases",
    "tutte_embedding",
    "uv_jacobians",
]
