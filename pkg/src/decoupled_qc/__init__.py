"""Simulated MRI artefacts, decoupled uncertainty losses and task-specific QC metrics."""

from .artefacts import ArtefactKind, ArtefactSpec, corrupt, sample_pipeline
from .nifti import load_nifti, save_nifti
from .qcmetrics import QCReport, build_report
from .spectral import KSpace, center_shift, fft3, ifft3
from .uncmath import UncertaintyBundle
from .volume import Affine3D, LabelVolume, Volume, normalize, resample_affine

__version__ = "0.1.0"

__all__ = [
    "Affine3D", "ArtefactKind", "ArtefactSpec", "KSpace", "LabelVolume", "QCReport",
    "UncertaintyBundle", "Volume", "build_report", "center_shift", "corrupt", "fft3",
    "ifft3", "load_nifti", "normalize", "resample_affine", "sample_pipeline", "save_nifti",
]
