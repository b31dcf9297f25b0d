"""Two-head encoder-decoder segmentation network.

Two resolution levels of 3x3(x1) convolutions with leaky ReLU and a skip
connection; a segmentation head emits class logits and an uncertainty head
emits ``1 + n_aug`` log-variance channels (task first). Volumes are processed
slice by slice along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..uncmath import UncertaintyBundle
from ..volume import Volume
from . import autograd as ag

DTYPE = np.float32


@dataclass
class ToyModel:
    width: int = 8
    num_classes: int = 2
    n_aug: int = 0
    aug_kinds: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.aug_kinds and len(self.aug_kinds) != self.n_aug:
            raise ValueError("aug_kinds must name every augmentation channel")

    @property
    def n_unc(self) -> int:
        return 1 + self.n_aug

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel(self.width, self.num_classes, self.n_aug, tuple(self.aug_kinds),
                        {k: v.copy() for k, v in self.params.items()})


def layer_shapes(width: int, num_classes: int, n_unc: int) -> dict[str, tuple]:
    f = width
    return {
        "enc1a.w": (f, 1, 3, 3), "enc1a.b": (f,),
        "enc1b.w": (f, f, 3, 3), "enc1b.b": (f,),
        "enc2a.w": (2 * f, f, 3, 3), "enc2a.b": (2 * f,),
        "enc2b.w": (2 * f, 2 * f, 3, 3), "enc2b.b": (2 * f,),
        "dec1.w": (f, 3 * f, 3, 3), "dec1.b": (f,),
        "dec2.w": (f, f, 3, 3), "dec2.b": (f,),
        "seg.w": (num_classes, f), "seg.b": (num_classes,),
        "unc.w": (n_unc, f), "unc.b": (n_unc,),
    }


def init_model(width: int = 8, num_classes: int = 2, aug_kinds=(), seed: int = 0) -> ToyModel:
    """He-initialised trunk; both heads start at zero (uniform logits, unit variance)."""
    rng = np.random.default_rng(seed)
    aug_kinds = tuple(str(getattr(k, "value", k)) for k in aug_kinds)
    n_unc = 1 + len(aug_kinds)
    params = {}
    for name, shape in layer_shapes(width, num_classes, n_unc).items():
        if name.startswith(("seg.", "unc.")) or name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
    return ToyModel(width, num_classes, len(aug_kinds), aug_kinds, params)


def forward_tensors(params: dict, x: np.ndarray, trainable: bool = False):
    """Run the network on an NCHW batch; returns (logits, log-variance) tensors."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"in-plane shape {x.shape[2:]} must be even")
    wrap = ag.parameter if trainable else ag.constant
    p = {k: wrap(v) for k, v in params.items()}
    h = ag.constant(np.asarray(x, dtype=params["enc1a.w"].dtype))
    e1 = ag.leaky_relu(ag.conv3x3(h, p["enc1a.w"], p["enc1a.b"]))
    e1 = ag.leaky_relu(ag.conv3x3(e1, p["enc1b.w"], p["enc1b.b"]))
    e2 = ag.avg_pool2(e1)
    e2 = ag.leaky_relu(ag.conv3x3(e2, p["enc2a.w"], p["enc2a.b"]))
    e2 = ag.leaky_relu(ag.conv3x3(e2, p["enc2b.w"], p["enc2b.b"]))
    d = ag.concat([e1, ag.upsample2(e2)])
    d = ag.leaky_relu(ag.conv3x3(d, p["dec1.w"], p["dec1.b"]))
    d = ag.leaky_relu(ag.conv3x3(d, p["dec2.w"], p["dec2.b"]))
    logits = ag.conv1x1(d, p["seg.w"], p["seg.b"])
    logvar = ag.conv1x1(d, p["unc.w"], p["unc.b"])
    return logits, logvar, p


def volumes_to_batch(volumes) -> np.ndarray:
    """Stack (X, Y, Z) volumes into an NCHW batch of Z-slices."""
    slices = []
    for v in volumes:
        data = np.asarray(getattr(v, "data", v), dtype=DTYPE)
        slices.extend(data[:, :, z] for z in range(data.shape[2]))
    return np.stack(slices)[:, None]


def batch_to_volumes(arr: np.ndarray, n_volumes: int) -> list[np.ndarray]:
    """Inverse of :func:`volumes_to_batch` for a (B*Z, C, X, Y) array -> (C, X, Y, Z) each."""
    depth = arr.shape[0] // n_volumes
    out = []
    for i in range(n_volumes):
        chunk = arr[i * depth:(i + 1) * depth]  # Z, C, X, Y
        out.append(np.moveaxis(chunk, 0, -1))
    return out


def forward(model: ToyModel, x: Volume) -> tuple[np.ndarray, UncertaintyBundle]:
    """Logits ``(C, X, Y, Z)`` and the uncertainty bundle for one volume."""
    logits, logvar = predict_batch(model, [x])
    return logits[0], logvar[0]


def predict_batch(model: ToyModel, volumes) -> tuple[list[np.ndarray], list[UncertaintyBundle]]:
    batch = volumes_to_batch(volumes)
    logits, logvar, _ = forward_tensors(model.params, batch)
    lg = batch_to_volumes(logits.data, len(volumes))
    lv = batch_to_volumes(logvar.data, len(volumes))
    bundles = [UncertaintyBundle(v[0], v[1:]) for v in lv]
    return lg, bundles
