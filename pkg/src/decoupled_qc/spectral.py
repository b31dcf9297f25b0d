"""3D discrete Fourier transforms and k-space grid helpers.

Convention: the forward transform is unnormalised and the inverse carries the
1/N factor, with the DC sample at index (0, 0, 0). The k-space noise
calibration in :mod:`decoupled_qc.artefacts` relies on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


@dataclass(frozen=True)
class KSpace:
    """Complex 3D spectrum of a volume; ``spacing`` is carried through from it."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise ValueError(f"k-space must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("k-space contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "KSpace":
        return KSpace(data, self.spacing)


def fft3(vol: Volume) -> KSpace:
    return KSpace(np.fft.fftn(np.asarray(vol.data, dtype=np.float64)), vol.spacing)


def ifft3_complex(k: KSpace) -> np.ndarray:
    """Complex image behind ``k`` (inverse DFT with 1/N)."""
    return np.fft.ifftn(k.data)


def ifft3(k: KSpace) -> Volume:
    """Magnitude image of the inverse transform."""
    return Volume(np.abs(ifft3_complex(k)), k.spacing)


def center_shift(k: KSpace, inverse: bool = False) -> KSpace:
    """Move DC to the grid centre (or back, with ``inverse=True``)."""
    shift = np.fft.ifftshift if inverse else np.fft.fftshift
    return k.with_data(shift(k.data))


def centered_frequencies(n: int) -> np.ndarray:
    """Signed integer frequency of every FFT-ordered index along an axis of length n."""
    return np.fft.fftfreq(n, d=1.0 / n).round().astype(np.int64)
