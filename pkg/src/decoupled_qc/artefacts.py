"""k-space artefact simulators, image-domain augmentation and the sampling pipeline.

All k-space operations take and return :class:`~decoupled_qc.spectral.KSpace`
values. A corruption is described by an ordered list of :class:`ArtefactSpec`
records that can be serialised to JSON and replayed bit-for-bit.

Application order inside :func:`corrupt` is fixed::

    geometric -> bias field            (image domain)
    motion                             (composite k-space)
    rf spike -> noise -> blur -> wrap  (k-space)
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Iterable, Sequence

import numpy as np

from .spectral import KSpace, fft3, ifft3, centered_frequencies
from .volume import (
    Affine3D,
    LabelVolume,
    Volume,
    normalize,
    resample_affine,
    resample_labels,
)


class ArtefactKind(str, enum.Enum):
    RF_SPIKE = "rf_spike"
    K_NOISE = "k_noise"
    BLUR = "blur"
    WRAP = "wrap"
    MOTION = "motion"
    BIAS_FIELD = "bias_field"
    GEOMETRIC = "geometric"


# the five k-space artefacts a network learns an uncertainty channel for
ARTEFACT_KINDS = (
    ArtefactKind.RF_SPIKE,
    ArtefactKind.K_NOISE,
    ArtefactKind.BLUR,
    ArtefactKind.WRAP,
    ArtefactKind.MOTION,
)

STAGE = {
    ArtefactKind.GEOMETRIC: 0,
    ArtefactKind.BIAS_FIELD: 1,
    ArtefactKind.MOTION: 2,
    ArtefactKind.RF_SPIKE: 3,
    ArtefactKind.K_NOISE: 4,
    ArtefactKind.BLUR: 5,
    ArtefactKind.WRAP: 6,
}
_IMAGE_KINDS = (ArtefactKind.GEOMETRIC, ArtefactKind.BIAS_FIELD)
_KSPACE_KINDS = (ArtefactKind.RF_SPIKE, ArtefactKind.K_NOISE, ArtefactKind.BLUR, ArtefactKind.WRAP)

SNR_DB_RANGE = (-10.0, 20.0)
SPIKE_MAGNITUDE_RANGE = (1.0, 10.0)
BLUR_RATIO_RANGE = (2.0, 12.0)
WRAP_FRACTION_RANGE = (0.25, 0.75)
WRAP_PATTERNS = ("random", "regular")
MOTION_SEGMENTS = (2, 8)
MOTION_MAX_ROTATION_DEG = 10.0
MOTION_MAX_TRANSLATION_MM = 10.0
BIAS_ORDER = 3
BIAS_COEFF_RANGE = 0.3


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _new_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


@dataclass(frozen=True)
class ArtefactSpec:
    """One artefact instance: kind, sampled parameters and RNG seed."""

    kind: ArtefactKind
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ArtefactKind(self.kind))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        _validate(self.kind, self.params)

    @property
    def stage(self) -> int:
        return STAGE[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": self.params, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArtefactSpec":
        return cls(ArtefactKind(d["kind"]), dict(d["params"]), int(d["seed"]))


def _validate(kind: ArtefactKind, p: dict) -> None:
    def need(*keys):
        missing = [k for k in keys if k not in p]
        if missing:
            raise ValueError(f"{kind.value} spec missing parameters {missing}")

    if kind is ArtefactKind.RF_SPIKE:
        need("magnitude", "location", "phase")
        lo, hi = SPIKE_MAGNITUDE_RANGE
        if not lo <= p["magnitude"] <= hi:
            raise ValueError(f"spike magnitude must lie in [{lo}, {hi}]")
        if tuple(p["location"]) == (0, 0, 0):
            raise ValueError("spike location must not be the DC sample")
    elif kind is ArtefactKind.K_NOISE:
        need("snr_db")
        lo, hi = SNR_DB_RANGE
        if not lo <= p["snr_db"] <= hi:
            raise ValueError(f"noise SNR must lie in [{lo}, {hi}] dB")
    elif kind is ArtefactKind.BLUR:
        need("ratio", "axes")
        if not 1.0 <= p["ratio"] <= BLUR_RATIO_RANGE[1]:
            raise ValueError("blur ratio must lie in [1, 12]")
        if not p["axes"] or not set(p["axes"]) <= {0, 1, 2}:
            raise ValueError("blur axes must be a nonempty subset of {0, 1, 2}")
    elif kind is ArtefactKind.WRAP:
        need("fraction", "pattern", "axis")
        if not 0.0 < p["fraction"] < 1.0:
            raise ValueError("wrap fraction must lie in (0, 1)")
        if p["pattern"] not in WRAP_PATTERNS:
            raise ValueError(f"wrap pattern must be one of {WRAP_PATTERNS}")
        if p["axis"] not in (0, 1, 2):
            raise ValueError("wrap axis must be 0, 1 or 2")
    elif kind is ArtefactKind.MOTION:
        need("transforms", "boundaries", "axis")
        n = len(p["transforms"])
        if not 1 <= n <= MOTION_SEGMENTS[1]:
            raise ValueError("motion needs between 1 and 8 segments")
        if len(p["boundaries"]) != n + 1:
            raise ValueError("motion boundaries must have one more entry than transforms")
    elif kind is ArtefactKind.BIAS_FIELD:
        need("coefficients", "order")
        if p["order"] < 1:
            raise ValueError("bias field order must be >= 1")
        if len(p["coefficients"]) != n_bias_terms(p["order"]):
            raise ValueError("wrong number of bias field coefficients")
    elif kind is ArtefactKind.GEOMETRIC:
        need("matrix")
        Affine3D(np.asarray(p["matrix"]))


def specs_to_json(specs: Sequence[ArtefactSpec], **extra) -> str:
    payload = dict(extra)
    payload["specs"] = [s.to_dict() for s in specs]
    return json.dumps(payload, indent=2, sort_keys=True)


def specs_from_json(text: str) -> list[ArtefactSpec]:
    payload = json.loads(text)
    items = payload["specs"] if isinstance(payload, dict) else payload
    return [ArtefactSpec.from_dict(d) for d in items]


# --------------------------------------------------------------------------
# k-space artefacts

def apply_rf_spike(k: KSpace, magnitude: float, loc: Sequence[int], phase: float) -> KSpace:
    """Overwrite one k-space sample with ``magnitude * max|k| * exp(i*phase)``."""
    loc = tuple(int(i) for i in loc)
    if len(loc) != 3 or any(not 0 <= i < n for i, n in zip(loc, k.shape)):
        raise IndexError(f"spike location {loc} outside k-space of shape {k.shape}")
    if loc == (0, 0, 0):
        raise ValueError("spike location must not be the DC sample")
    if magnitude < 0:
        raise ValueError("spike magnitude must be nonnegative")
    data = np.array(k.data)
    data[loc] = magnitude * np.abs(k.data).max() * np.exp(1j * phase)
    return k.with_data(data)


def noise_sigma(k: KSpace, target_snr_db: float) -> float:
    """Per-sample complex noise std giving the target image-domain SNR.

    With an unnormalised forward transform the image mean-square signal is
    ``sum|k|^2 / N^2`` and complex k-space noise of variance ``s^2`` per sample
    becomes image noise of variance ``s^2 / N``.
    """
    if math.isnan(target_snr_db) or target_snr_db == -math.inf:
        raise ValueError(f"target SNR must be finite or +inf, got {target_snr_db}")
    if target_snr_db == math.inf:
        return 0.0
    n = k.size
    energy = float(np.sum(np.abs(k.data) ** 2))
    if energy == 0.0:
        raise ValueError("cannot calibrate noise against an all-zero signal")
    signal_power = energy / n**2
    snr = 10.0 ** (target_snr_db / 10.0)
    return math.sqrt(n * signal_power / snr)


def apply_k_noise(k: KSpace, target_snr_db: float, rng=None) -> KSpace:
    """Add zero-mean complex Gaussian noise calibrated to ``target_snr_db``."""
    sigma = noise_sigma(k, target_snr_db)
    if sigma == 0.0:
        return k
    gen = _rng(rng)
    scale = sigma / math.sqrt(2.0)
    noise = gen.normal(0.0, scale, k.shape) + 1j * gen.normal(0.0, scale, k.shape)
    return k.with_data(k.data + noise)


def blur_band(n: int, ratio: float) -> np.ndarray:
    """Boolean mask over FFT-ordered indices kept by a low-pass of ``ratio``."""
    width = min(n, math.ceil(n / ratio))
    centred = np.zeros(n, dtype=bool)
    start = n // 2 - width // 2
    centred[start:start + width] = True
    return np.fft.ifftshift(centred)


def apply_blur(k: KSpace, ratio: float, axes: Iterable[int]) -> KSpace:
    """Zero-fill truncation of k-space outside the central ``ceil(N/ratio)`` band."""
    axes = sorted(set(int(a) for a in axes))
    if not axes:
        raise ValueError("blur needs at least one axis")
    if ratio < 1:
        raise ValueError("blur ratio must be >= 1")
    mask = np.ones(k.shape, dtype=bool)
    for a in axes:
        keep = blur_band(k.shape[a], ratio)
        view = [1, 1, 1]
        view[a] = -1
        mask &= keep.reshape(view)
    if mask.all():
        return k
    return k.with_data(np.where(mask, k.data, 0))


def wrap_keep_mask(n: int, fraction: float, pattern: str, rng=None) -> np.ndarray:
    """Planes kept along one axis (FFT order); the DC plane is always kept."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("wrap fraction must lie in (0, 1)")
    keep = np.ones(n, dtype=bool)
    if pattern == "regular":
        step = max(1, round(1.0 / (1.0 - fraction)))
        keep = np.arange(n) % step == 0
    elif pattern == "random":
        n_remove = min(n - 1, round(fraction * n))
        if n_remove:
            drop = _rng(rng).choice(np.arange(1, n), size=n_remove, replace=False)
            keep[drop] = False
    else:
        raise ValueError(f"unknown wrap pattern {pattern!r}")
    return keep


def apply_wrap(k: KSpace, fraction: float, pattern: str, axis: int, rng=None) -> KSpace:
    """Mask out k-space planes perpendicular to ``axis`` to produce wraparound ghosts."""
    keep = wrap_keep_mask(k.shape[axis], fraction, pattern, rng)
    if keep.all():
        return k
    view = [1, 1, 1]
    view[axis] = -1
    return k.with_data(np.where(keep.reshape(view), k.data, 0))


# --------------------------------------------------------------------------
# motion

def demean_transforms(transforms: Sequence[Affine3D], weights: Sequence[float]) -> list[Affine3D]:
    """Remove the weighted mean rigid motion (rotation vector and translation)."""
    w = np.asarray(weights, dtype=np.float64)
    params = [t.rigid_params() for t in transforms]
    rot = np.array([p[0] for p in params])
    trans = np.array([p[1] for p in params])
    mean_rot = (w[:, None] * rot).sum(axis=0) / w.sum()
    mean_trans = (w[:, None] * trans).sum(axis=0) / w.sum()
    return [Affine3D.from_rigid(r - mean_rot, t - mean_trans) for r, t in zip(rot, trans)]


def _segment_planes(n: int, boundaries: Sequence[int]) -> list[np.ndarray]:
    b = [int(x) for x in boundaries]
    if b[0] != 0 or b[-1] != n or any(lo >= hi for lo, hi in zip(b, b[1:])):
        raise ValueError(f"boundaries {b} do not partition {n} planes into nonempty blocks")
    # acquisition order runs from the most negative to the most positive frequency
    order = np.fft.fftshift(np.arange(n))
    return [order[lo:hi] for lo, hi in zip(b, b[1:])]


def motion_kspace(
    vol: Volume,
    transforms: Sequence[Affine3D],
    boundaries: Sequence[int],
    axis: int,
    demean: bool = True,
) -> KSpace:
    """Composite k-space of a moving object.

    Block ``i`` of phase-encode planes along ``axis`` (``boundaries`` index the
    planes in acquisition order, most negative frequency first) is taken from
    the spectrum of the volume resampled under transform ``i``.
    """
    if not transforms:
        raise ValueError("motion needs at least one transform")
    if len(boundaries) != len(transforms) + 1:
        raise ValueError("need exactly one block per transform")
    for t in transforms:
        if abs(np.linalg.det(t.matrix[:3, :3])) < 1e-12:
            raise np.linalg.LinAlgError("singular motion transform")
    blocks = _segment_planes(vol.shape[axis], boundaries)
    if demean:
        transforms = demean_transforms(transforms, [len(b) for b in blocks])
    composite = np.zeros(vol.shape, dtype=np.complex128)
    cache: dict[bytes, np.ndarray] = {}
    for t, planes in zip(transforms, blocks):
        key = t.matrix.tobytes()
        if key not in cache:
            cache[key] = fft3(resample_affine(vol, t)).data
        idx = [slice(None)] * 3
        idx[axis] = planes
        composite[tuple(idx)] = cache[key][tuple(idx)]
    return KSpace(composite, vol.spacing)


def apply_motion(
    vol: Volume,
    transforms: Sequence[Affine3D],
    boundaries: Sequence[int],
    axis: int,
) -> Volume:
    """Motion-corrupted magnitude image from demeaned per-segment transforms."""
    return ifft3(motion_kspace(vol, transforms, boundaries, axis))


# --------------------------------------------------------------------------
# image-domain augmentation

def n_bias_terms(order: int) -> int:
    return math.comb(order + 3, 3)


def _monomials(order: int) -> list[tuple[int, int, int]]:
    terms = []
    for degree in range(order + 1):
        for combo in combinations_with_replacement(range(3), degree):
            terms.append(tuple(combo.count(a) for a in range(3)))
    return terms


def bias_field(shape: Sequence[int], coeffs: Sequence[float], order: int) -> np.ndarray:
    """``exp(P)`` for a polynomial ``P`` over coordinates scaled to [-1, 1]."""
    if order < 1:
        raise ValueError("bias field order must be >= 1")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size != n_bias_terms(order):
        raise ValueError(f"order {order} needs {n_bias_terms(order)} coefficients")
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(tuple(shape))
    for c, (a, b, d) in zip(coeffs, _monomials(order)):
        if c != 0.0:
            poly += c * x**a * y**b * z**d
    return np.exp(poly)


def apply_bias_field(vol: Volume, coeffs: Sequence[float], order: int) -> Volume:
    field_ = bias_field(vol.shape, coeffs, order)
    return vol.with_data(np.asarray(vol.data, dtype=np.float64) * field_)


# --------------------------------------------------------------------------
# sampling

@dataclass
class ArtefactPipelineConfig:
    """Which artefacts may fire and how often.

    ``rate`` is the probability that an image receives any k-space artefact at
    all; given that it does, each enabled kind fires with its own probability
    (at least one always fires). Geometric and bias-field augmentation are
    drawn independently with their own probabilities.
    """

    rate: float = 0.5
    kinds: tuple = ARTEFACT_KINDS
    probabilities: dict = field(default_factory=lambda: {k: 0.35 for k in ARTEFACT_KINDS})
    geometric: float = 0.0
    bias_field: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(ArtefactKind(k) for k in self.kinds)
        bad = [k for k in self.kinds if k not in ARTEFACT_KINDS]
        if bad:
            raise ValueError(f"not k-space artefact kinds: {bad}")
        self.probabilities = {ArtefactKind(k): float(v) for k, v in self.probabilities.items()}
        for name, p in [("rate", self.rate), ("geometric", self.geometric),
                        ("bias_field", self.bias_field), *self.probabilities.items()]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {name}={p} outside [0, 1]")


def _free_axes(shape: Sequence[int]) -> list[int]:
    axes = [a for a, n in enumerate(shape) if n > 1]
    if not axes:
        raise ValueError("volume has no axis longer than one voxel")
    return axes


def _rigid_draw(rng, shape, spacing, max_rot_deg, max_trans_mm):
    free = set(_free_axes(shape))
    rotvec = np.zeros(3)
    for a in range(3):
        # rotating about axis a moves the other two; only allowed if both are extended
        if all(b in free for b in range(3) if b != a):
            rotvec[a] = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    offset = np.zeros(3)
    for a in free:
        offset[a] = rng.uniform(-max_trans_mm, max_trans_mm) / spacing[a]
    return rotvec, offset


def sample_spec(kind, shape, spacing=(1.0, 1.0, 1.0), rng=None) -> ArtefactSpec:
    """Draw one artefact of ``kind`` with parameters from the default ranges."""
    kind = ArtefactKind(kind)
    rng = _rng(rng)
    shape = tuple(int(s) for s in shape)
    free = _free_axes(shape)
    if kind is ArtefactKind.RF_SPIKE:
        while True:
            loc = [int(rng.integers(0, n)) for n in shape]
            if loc != [0, 0, 0]:
                break
        params = {
            "magnitude": float(rng.uniform(*SPIKE_MAGNITUDE_RANGE)),
            "location": loc,
            "phase": float(rng.uniform(0.0, 2 * math.pi)),
        }
    elif kind is ArtefactKind.K_NOISE:
        params = {"snr_db": float(rng.uniform(*SNR_DB_RANGE))}
    elif kind is ArtefactKind.BLUR:
        n_axes = int(rng.integers(1, len(free) + 1))
        axes = sorted(int(a) for a in rng.choice(free, size=n_axes, replace=False))
        params = {"ratio": float(rng.uniform(*BLUR_RATIO_RANGE)), "axes": axes}
    elif kind is ArtefactKind.WRAP:
        params = {
            "fraction": float(rng.uniform(*WRAP_FRACTION_RANGE)),
            "pattern": WRAP_PATTERNS[int(rng.integers(0, 2))],
            "axis": int(rng.choice(free)),
        }
    elif kind is ArtefactKind.MOTION:
        axis = int(rng.choice(free))
        n = shape[axis]
        segments = int(rng.integers(MOTION_SEGMENTS[0], MOTION_SEGMENTS[1] + 1))
        segments = min(segments, n)
        cuts = sorted(int(c) for c in rng.choice(np.arange(1, n), size=segments - 1, replace=False))
        transforms = []
        for _ in range(segments):
            rotvec, offset = _rigid_draw(rng, shape, spacing, MOTION_MAX_ROTATION_DEG,
                                         MOTION_MAX_TRANSLATION_MM)
            transforms.append(Affine3D.from_rigid(rotvec, offset).tolist())
        params = {"transforms": transforms, "boundaries": [0, *cuts, n], "axis": axis}
    elif kind is ArtefactKind.BIAS_FIELD:
        coeffs = rng.uniform(-BIAS_COEFF_RANGE, BIAS_COEFF_RANGE, n_bias_terms(BIAS_ORDER))
        params = {"coefficients": [float(c) for c in coeffs], "order": BIAS_ORDER}
    else:
        rotvec, _ = _rigid_draw(rng, shape, spacing, 10.0, 0.0)
        scale = np.ones(3)
        for a in free:
            scale[a] = rng.uniform(0.9, 1.1)
            if rng.random() < 0.5:
                scale[a] = -scale[a]
        m = Affine3D.from_rigid(rotvec, np.zeros(3)).matrix.copy()
        m[:3, :3] = m[:3, :3] @ np.diag(scale)
        params = {"matrix": m.tolist()}
    return ArtefactSpec(kind, params, _new_seed(rng))


def sample_pipeline(cfg: ArtefactPipelineConfig, rng, shape, spacing=(1.0, 1.0, 1.0)) -> list[ArtefactSpec]:
    """Draw the artefacts for one image, returned in application order."""
    rng = _rng(rng)
    specs = []
    if cfg.geometric > 0 and rng.random() < cfg.geometric:
        specs.append(sample_spec(ArtefactKind.GEOMETRIC, shape, spacing, rng))
    if cfg.bias_field > 0 and rng.random() < cfg.bias_field:
        specs.append(sample_spec(ArtefactKind.BIAS_FIELD, shape, spacing, rng))
    if cfg.kinds and rng.random() < cfg.rate:
        probs = np.array([cfg.probabilities.get(k, 0.0) for k in cfg.kinds])
        fired = [k for k, p in zip(cfg.kinds, probs) if rng.random() < p]
        if not fired:
            weights = probs / probs.sum() if probs.sum() > 0 else None
            fired = [cfg.kinds[int(rng.choice(len(cfg.kinds), p=weights))]]
        for k in fired:
            specs.append(sample_spec(k, shape, spacing, rng))
    specs.sort(key=lambda s: s.stage)
    return specs


# --------------------------------------------------------------------------
# application

def check_order(specs: Sequence[ArtefactSpec]) -> None:
    stages = [s.stage for s in specs]
    if stages != sorted(stages):
        raise ValueError("artefact specs are not in application order")
    if sum(s.kind is ArtefactKind.MOTION for s in specs) > 1:
        raise ValueError("at most one motion stage per corruption")


def _apply_kspace(k: KSpace, spec: ArtefactSpec) -> KSpace:
    p = spec.params
    if spec.kind is ArtefactKind.RF_SPIKE:
        return apply_rf_spike(k, p["magnitude"], p["location"], p["phase"])
    if spec.kind is ArtefactKind.K_NOISE:
        return apply_k_noise(k, p["snr_db"], np.random.default_rng(spec.seed))
    if spec.kind is ArtefactKind.BLUR:
        return apply_blur(k, p["ratio"], p["axes"])
    if spec.kind is ArtefactKind.WRAP:
        return apply_wrap(k, p["fraction"], p["pattern"], p["axis"], np.random.default_rng(spec.seed))
    raise ValueError(f"{spec.kind.value} is not a k-space artefact")


def corrupt(vol: Volume, specs: Sequence[ArtefactSpec]) -> tuple[Volume, list[ArtefactSpec]]:
    """Apply ``specs`` to ``vol`` and rescale the magnitude result to [0, 1]."""
    specs = list(specs)
    check_order(specs)
    current = vol
    for spec in specs:
        if spec.kind is ArtefactKind.GEOMETRIC:
            current = resample_affine(current, Affine3D(np.asarray(spec.params["matrix"])))
        elif spec.kind is ArtefactKind.BIAS_FIELD:
            current = apply_bias_field(current, spec.params["coefficients"], spec.params["order"])
    motion = [s for s in specs if s.kind is ArtefactKind.MOTION]
    kspace_specs = [s for s in specs if s.kind in _KSPACE_KINDS]
    if motion or kspace_specs:
        if motion:
            p = motion[0].params
            transforms = [Affine3D(np.asarray(m)) for m in p["transforms"]]
            k = motion_kspace(current, transforms, p["boundaries"], p["axis"])
        else:
            k = fft3(current)
        for spec in kspace_specs:
            k = _apply_kspace(k, spec)
        current = ifft3(k)
    return normalize(current), specs


def augment_labels(labels: LabelVolume, specs: Sequence[ArtefactSpec]) -> LabelVolume:
    """Carry geometric augmentation over to a label map; artefacts leave labels alone."""
    for spec in specs:
        if spec.kind is ArtefactKind.GEOMETRIC:
            labels = resample_labels(labels, Affine3D(np.asarray(spec.params["matrix"])))
    return labels


def kinds_present(specs: Sequence[ArtefactSpec]) -> list[ArtefactKind]:
    return [s.kind for s in specs if s.kind in ARTEFACT_KINDS]
