"""Fan-beam CT acquisition and filtered back-projection."""

from .geometry import ScannerConfig, Sinogram, builtin_scanner, load_sinogram, save_sinogram
from .noise import apply_quantum_noise, estimate_scatter
from .projector import backproject_adjoint, forward_project, line_integral, project_image
from .recon import fbp_reconstruct, hann_ramp_filter, hu_to_mu_volume, mu_to_hu
from .simulate import ReconVolume, acquire, default_slices, reconstruct, simulate_scan

__all__ = [
    "ReconVolume",
    "ScannerConfig",
    "Sinogram",
    "acquire",
    "apply_quantum_noise",
    "backproject_adjoint",
    "builtin_scanner",
    "default_slices",
    "estimate_scatter",
    "fbp_reconstruct",
    "forward_project",
    "hann_ramp_filter",
    "hu_to_mu_volume",
    "line_integral",
    "load_sinogram",
    "mu_to_hu",
    "project_image",
    "reconstruct",
    "save_sinogram",
    "simulate_scan",
]
