"""Correlation experiment: does predicted artefact variance track segmentation quality?"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..artefacts import ARTEFACT_KINDS, ArtefactKind, ArtefactSpec, corrupt, sample_spec
from ..qcmetrics import QCReport, build_report, spearman
from ..uncmath import scaled_softmax, total_entropy_variance
from ..volume import Volume
from .model import ToyModel, forward, predict_batch
from .phantoms import GM, WM, PhantomDataset

# the three quality metrics compared against Dice
SUMMARY_METRICS = ("mean_artefact_variance", "snr", "cnr")


@dataclass
class EvalRow:
    ident: str
    kind: str  # artefact kind value or "none" for controls
    report: QCReport
    specs: list = field(default_factory=list)


def stratified_kinds(n: int, rng: np.random.Generator) -> list[ArtefactKind]:
    """``n`` artefact kinds cycling through all five, in shuffled order."""
    kinds = [ARTEFACT_KINDS[i % len(ARTEFACT_KINDS)] for i in range(n)]
    order = rng.permutation(n)
    return [kinds[i] for i in order]


def clean_reference(model: ToyModel, images) -> float:
    """Cohort mean of the entropy-derived total variance on clean inputs."""
    logits, bundles = predict_batch(model, images)
    totals = [total_entropy_variance(scaled_softmax(lg, b.total_variance()))
              for lg, b in zip(logits, bundles)]
    return float(np.mean(totals))


def evaluate_cascade(model: ToyModel, test: PhantomDataset, seed: int = 0,
                     n_control: int = 0) -> tuple[list[EvalRow], float]:
    """Corrupt each test phantom with one artefact and report its metrics.

    The first ``n_control`` phantoms stay clean. The others receive exactly
    one artefact, with every kind used equally often (up to one). Dice is
    measured against the clean-image labels.
    """
    n = len(test)
    if not 0 <= n_control <= n:
        raise ValueError("n_control must lie in [0, len(test)]")
    rng = np.random.default_rng([seed, 0xE7A1])
    kinds = [None] * n_control + stratified_kinds(n - n_control, rng)
    reference = clean_reference(model, test.images)
    inputs, specs_all = [], []
    for i, (img, kind) in enumerate(zip(test.images, kinds)):
        if kind is None:
            specs = []
        else:
            specs = [sample_spec(kind, img.shape, img.spacing, np.random.default_rng([seed, i]))]
        x, _ = corrupt(img, specs)
        inputs.append(x)
        specs_all.append(specs)
    logits, bundles = predict_batch(model, inputs)
    rows = []
    for i, x in enumerate(inputs):
        report = build_report(
            x, logits[i], bundles[i], reference, mask=test.tissues[i], truth=test.labels[i],
            gm=GM, wm=WM,
            provenance={"phantom": i, "dataset_seed": test.seed,
                        "specs": [s.to_dict() for s in specs_all[i]]},
        )
        kind = "none" if kinds[i] is None else kinds[i].value
        rows.append(EvalRow(f"phantom_{i:04d}", kind, report, specs_all[i]))
    return rows, reference


def correlation_summary(rows: list[EvalRow], include_controls: bool = False) -> dict:
    """Spearman rho and p of each quality metric against Dice (None where undefined)."""
    use = [r for r in rows if include_controls or r.kind != "none"]
    dices = [r.report.dice for r in use]
    out = {}
    for name in SUMMARY_METRICS:
        try:
            c = spearman([getattr(r.report, name) for r in use], dices)
        except ValueError:  # constant series, e.g. an untrained model
            out[name] = {"rho": None, "p_value": None, "n": len(use)}
            continue
        out[name] = {"rho": c.rho, "p_value": c.p_value, "n": c.n}
    return out


def clean_vs_artefact_medians(rows: list[EvalRow]) -> tuple[float, float]:
    clean = [r.report.mean_artefact_variance for r in rows if r.kind == "none"]
    dirty = [r.report.mean_artefact_variance for r in rows if r.kind != "none"]
    if not clean or not dirty:
        raise ValueError("need both control and artefacted rows")
    return float(np.median(clean)), float(np.median(dirty))


def _sigma(model: ToyModel, x: Volume, reference: float) -> float:
    logits, bundle = forward(model, x)
    return build_report(x, logits, bundle, reference).sigma


def error_bar_sweep(model: ToyModel, image: Volume, snrs_db=(20, 10, 5, 0, -5, -10),
                    blur_ratios=(1, 2, 4, 8, 12), seed: int = 0) -> dict:
    """Volume error bar of one phantom under increasing noise and blur.

    The clean image itself is the reference, so a clean input has sigma 0.
    """
    logits, bundle = forward(model, image)
    reference = total_entropy_variance(scaled_softmax(logits, bundle.total_variance()))
    noise = []
    for snr_db in snrs_db:
        spec = ArtefactSpec(ArtefactKind.K_NOISE, {"snr_db": float(snr_db)}, seed)
        noise.append(_sigma(model, corrupt(image, [spec])[0], reference))
    free = [a for a, n in enumerate(image.shape) if n > 1]
    blur = []
    for ratio in blur_ratios:
        spec = ArtefactSpec(ArtefactKind.BLUR, {"ratio": float(ratio), "axes": free}, seed)
        blur.append(_sigma(model, corrupt(image, [spec])[0], reference))
    return {"snr_db": list(snrs_db), "noise_sigma": noise,
            "blur_ratio": list(blur_ratios), "blur_sigma": blur}


def nearly_monotone(values, rel_tol: float = 0.05) -> bool:
    """Non-decreasing, allowing one drop no larger than ``rel_tol`` of the max."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    if not drops:
        return True
    return len(drops) == 1 and drops[0] <= rel_tol * max(values)
