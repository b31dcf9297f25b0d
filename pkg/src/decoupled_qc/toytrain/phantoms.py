"""Procedural head phantoms with an exact gray-matter ribbon.

Each phantom is a wobbly ellipse (ellipsoid when the volume has depth) with
concentric layers: scalp, CSF, a gray-matter ribbon and a white-matter core.
Tissue intensities follow T1 ordering and are jittered per image; a smooth
intensity drift and native acquisition noise of random strength make
classical metrics such as SNR vary between perfectly usable scans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..volume import LabelVolume, Volume

AIR, GM, WM, SCALP, CSF = 0, 1, 2, 3, 4
N_TISSUES = 5

DEFAULT_SHAPE = (32, 32, 1)
# a 32-voxel field of view spans roughly a head at 6 mm resolution
DEFAULT_SPACING = (6.0, 6.0, 6.0)

_BASE_INTENSITY = {AIR: 0.0, SCALP: 0.7, CSF: 0.15, GM: 0.45, WM: 0.8}


@dataclass
class PhantomDataset:
    images: list
    labels: list
    tissues: list
    seed: int

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "PhantomDataset":
        return PhantomDataset([self.images[i] for i in idx], [self.labels[i] for i in idx],
                              [self.tissues[i] for i in idx], self.seed)


def _wobble(theta, phi, rng, amp, orders):
    r = np.ones_like(theta)
    for k in orders:
        a = rng.uniform(0.0, amp)
        r = r + a * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    if phi is not None:
        r = r + rng.uniform(0.0, amp) * np.cos(2 * phi + rng.uniform(0, 2 * np.pi))
    return r


def phantom_tissues(shape, rng) -> np.ndarray:
    """Integer tissue map for one random head."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    ax = rng.uniform(0.72, 0.9)
    ay = rng.uniform(0.62, 0.85)
    az = rng.uniform(0.6, 0.85) if shape[2] > 1 else 1.0
    cx, cy = rng.uniform(-0.06, 0.06, 2)
    u, v, w = (x - cx) / ax, (y - cy) / ay, z / az
    rho = np.sqrt(u**2 + v**2 + w**2)
    theta = np.arctan2(v, u)
    phi = np.arctan2(w, np.hypot(u, v)) if shape[2] > 1 else None
    outer = rho / _wobble(theta, phi, rng, 0.03, (2, 3))
    # gyral folding moves the pial and white surfaces independently
    pial = 0.8 * _wobble(theta, phi, rng, 0.05, (5, 7))
    white = rng.uniform(0.52, 0.6) * _wobble(theta, phi, rng, 0.07, (4, 6, 9))
    tissues = np.full(shape, AIR, dtype=np.int64)
    tissues[outer <= 1.0] = SCALP
    tissues[outer <= 0.88] = CSF
    tissues[rho <= pial] = GM
    tissues[rho <= white] = WM
    return tissues


def render(tissues: np.ndarray, rng) -> np.ndarray:
    """Intensity image for a tissue map with jittered contrast, drift and noise."""
    img = np.zeros(tissues.shape)
    for t, base in _BASE_INTENSITY.items():
        if t != AIR:
            img[tissues == t] = base + rng.uniform(-0.04, 0.04)
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in tissues.shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    gx, gy, gz = rng.uniform(-0.08, 0.08, 3)
    drift = 1.0 + gx * x + gy * y + gz * z
    img = img * drift
    noise_sd = rng.uniform(0.005, 0.035)
    img = img + rng.normal(0.0, noise_sd, img.shape) * (tissues != AIR)
    return np.clip(img, 0.0, None)


def generate_phantoms(n: int, seed: int, shape=DEFAULT_SHAPE, spacing=DEFAULT_SPACING) -> PhantomDataset:
    if n < 1:
        raise ValueError("need at least one phantom")
    images, labels, tissues = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        t = phantom_tissues(tuple(shape), rng)
        img = render(t, rng)
        if img.max() <= 0:
            raise ValueError(f"shape {tuple(shape)} leaves no head inside the grid")
        images.append(Volume(img / img.max(), spacing))
        labels.append(LabelVolume((t == GM).astype(np.int64), 2))
        tissues.append(LabelVolume(t, N_TISSUES))
    return PhantomDataset(images, labels, tissues, seed)
