"""Shared oracles for the test suite."""

import numpy as np

FD_STEP = 1e-4


def central_difference(f, x: np.ndarray, idx, h: float = FD_STEP) -> float:
    """d f / d x[idx] by a central difference; ``x`` is restored afterwards."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def probe(f, arrays: dict, grads: dict, rng, n_probe: int = 12) -> dict:
    """Relative error between analytic grads and finite differences on random entries."""
    errors = {}
    for name, arr in arrays.items():
        flat = rng.choice(arr.size, size=min(n_probe, arr.size), replace=False)
        idxs = [np.unravel_index(i, arr.shape) for i in flat]
        numeric = [central_difference(f, arr, idx) for idx in idxs]
        analytic = [grads[name][idx] for idx in idxs]
        errors[name] = relative_error(analytic, numeric)
    return errors


def near_l1_kink(pred: np.ndarray, target: np.ndarray, margin: float) -> bool:
    """True if an L1 or gradient-L1 term of the consistency loss is within ``margin`` of 0.

    Central differences straddling |.| at 0 are meaningless, so such draws are
    replaced rather than compared.
    """
    d = pred - target
    if np.abs(d).min() < margin:
        return True
    for axis in range(d.ndim):
        if d.shape[axis] > 1:
            g = np.abs(np.diff(d, axis=axis))
            if g.min() < margin:
                return True
    return False


def brute_dice(pred, truth, c=1) -> float:
    p = [i for i, v in enumerate(np.ravel(pred)) if v == c]
    t = [i for i, v in enumerate(np.ravel(truth)) if v == c]
    if not p and not t:
        return 1.0
    both = len(set(p) & set(t))
    return 2 * both / (len(p) + len(t))


def rank_formula_rho(xs, ys) -> float:
    """1 - 6 sum d^2 / (n (n^2 - 1)) for tie-free data."""
    n = len(xs)
    rx = {v: r for r, v in enumerate(sorted(xs), start=1)}
    ry = {v: r for r, v in enumerate(sorted(ys), start=1)}
    d2 = sum((rx[x] - ry[y]) ** 2 for x, y in zip(xs, ys))
    return 1 - 6 * d2 / (n * (n * n - 1))


LOSS_KINDS = ("weighted_ce", "combined", "aug", "student", "consistency")


def draw_loss_instance(rng, kind: str, shape=(6, 6, 3), n_classes=2, n_aug=2) -> dict:
    """Random loss inputs, redrawn until no consistency term sits on an L1 kink."""
    while True:
        inst = {
            "logits": rng.normal(0.0, 2.0, (n_classes, *shape)),
            "target": rng.integers(0, n_classes, shape),
            "s_task": rng.normal(-1.0, 0.7, shape),
            "s_aug": rng.normal(-1.0, 0.7, (n_aug, *shape)),
            "pseudo_t": rng.normal(-1.0, 0.7, shape),
            "pseudo_aug": rng.normal(-1.0, 0.7, (n_aug, *shape)),
            "sigma2": np.exp(rng.normal(0.0, 0.7, shape)),
            "eps": float(rng.uniform(0.0, 0.1)),
            "pred": rng.normal(0.0, 1.0, shape),
            "ref": rng.normal(0.0, 1.0, shape),
        }
        pairs = []
        if kind == "aug":
            pairs = [(inst["s_task"], inst["pseudo_t"])]
        elif kind == "student":
            pairs = [(inst["s_task"], inst["pseudo_t"])]
            pairs += list(zip(inst["s_aug"], inst["pseudo_aug"]))
        if kind == "consistency":
            margin = 2 * FD_STEP
            if not near_l1_kink(inst["pred"], inst["ref"], margin):
                return inst
            continue
        if not any(near_l1_kink(np.exp(s), np.exp(p), 2 * FD_STEP * np.exp(s).max())
                   for s, p in pairs):
            return inst


def loss_gradient_errors(kind: str, rng, n_probe: int = 12) -> dict:
    """Relative errors of analytic loss gradients against central differences."""
    from decoupled_qc.uncmath import (
        UncertaintyBundle,
        aug_loss,
        combined_loss,
        consistency_loss,
        student_loss,
        weighted_ce,
    )

    inst = draw_loss_instance(rng, kind)
    lg, y, eps = inst["logits"], inst["target"], inst["eps"]
    st, sa = inst["s_task"], inst["s_aug"]
    if kind == "weighted_ce":
        s2 = inst["sigma2"]

        def f():
            return weighted_ce(lg, y, s2, eps).value

        grads = weighted_ce(lg, y, s2, eps).grads
        arrays = {"logits": lg, "sigma2": s2}
    elif kind == "combined":
        def f():
            return combined_loss(lg, y, UncertaintyBundle(st, sa), eps).value

        grads = combined_loss(lg, y, UncertaintyBundle(st, sa), eps).grads
        arrays = {"logits": lg, "s_task": st, "s_aug": sa}
    elif kind == "aug":
        s1, pt = sa[0], inst["pseudo_t"]

        def f():
            return aug_loss(lg, y, st, s1, pt, eps, 0.1).value

        grads = aug_loss(lg, y, st, s1, pt, eps, 0.1).grads
        arrays = {"logits": lg, "s_task": st, "s_aug": s1}
    elif kind == "student":
        pt, pa = inst["pseudo_t"], list(inst["pseudo_aug"])

        def f():
            return student_loss(lg, y, UncertaintyBundle(st, sa), pt, pa, eps, 0.1).value

        grads = student_loss(lg, y, UncertaintyBundle(st, sa), pt, pa, eps, 0.1).grads
        arrays = {"logits": lg, "s_task": st, "s_aug": sa}
    else:
        x, ref = inst["pred"], inst["ref"]

        def f():
            return consistency_loss(x, ref, 0.1).value

        grads = consistency_loss(x, ref, 0.1).grads
        arrays = {"pred": x}
    return probe(f, arrays, grads, rng, n_probe)
