"""Cascaded task -> teacher -> student training of the toy network."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..artefacts import (
    ARTEFACT_KINDS,
    ArtefactKind,
    ArtefactPipelineConfig,
    augment_labels,
    corrupt,
    sample_pipeline,
)
from ..uncmath import (
    EpsilonSchedule,
    NonFiniteError,
    UncertaintyBundle,
    aug_loss,
    combined_loss,
    student_loss,
)
from . import autograd as ag
from . import checkpoint
from .model import ToyModel, batch_to_volumes, forward_tensors, init_model, volumes_to_batch
from .phantoms import PhantomDataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "likelihood", "consistency", "epsilon", "learning_rate")


class TrainingError(RuntimeError):
    """Raised when training diverges."""


class MissingPrerequisite(RuntimeError):
    """Raised when a stage needs frozen models that are not available."""


def parse_stage(stage: str) -> tuple[str, ArtefactKind | None]:
    if stage in ("task", "student"):
        return stage, None
    if stage.startswith("teacher:"):
        kind = ArtefactKind(stage.split(":", 1)[1])
        if kind not in ARTEFACT_KINDS:
            raise ValueError(f"{kind.value} is not a k-space artefact")
        return "teacher", kind
    raise ValueError(f"unknown stage {stage!r}; use task, teacher:<kind> or student")


@dataclass
class TrainConfig:
    stage: str = "task"
    iterations: int = 2000
    learning_rate: float = 3e-3
    batch_size: int = 4
    width: int = 8
    epsilon: float = 0.05
    epsilon_floor: float = 1e-3
    plateau_window: int = 200
    plateau_threshold: float = 0.01
    artefact_rate: float = 0.5
    geometric: float = 0.5
    bias_field: float = 0.5
    consistency_lambda: float = 0.1
    seed: int = 0

    def __post_init__(self):
        parse_stage(self.stage)
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def augmentation(self) -> ArtefactPipelineConfig:
        """Task: no artefacts; teacher(i): exactly artefact i; student: all of them."""
        kind, which = parse_stage(self.stage)
        if kind == "task":
            kinds, rate = (), 0.0
        elif kind == "teacher":
            kinds, rate = (which,), self.artefact_rate
        else:
            kinds, rate = ARTEFACT_KINDS, self.artefact_rate
        probs = {k: (1.0 if kind == "teacher" else 0.35) for k in kinds}
        return ArtefactPipelineConfig(rate=rate, kinds=kinds, probabilities=probs,
                                      geometric=self.geometric, bias_field=self.bias_field,
                                      seed=self.seed)

    def aug_kinds(self) -> tuple:
        kind, which = parse_stage(self.stage)
        if kind == "task":
            return ()
        if kind == "teacher":
            return (which.value,)
        return tuple(k.value for k in ARTEFACT_KINDS)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (lr * corr) * m / (np.sqrt(v) + self.eps)

    def state(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, tensors: dict, t: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()
        self.t = t


@dataclass
class Frozen:
    """Previously trained networks a stage may depend on."""

    task: ToyModel | None = None
    teachers: dict = field(default_factory=dict)  # kind value -> ToyModel

    def require(self, stage: str) -> None:
        kind, _ = parse_stage(stage)
        if kind in ("teacher", "student") and self.task is None:
            raise MissingPrerequisite("stage needs a trained task model")
        if kind == "student":
            missing = [k.value for k in ARTEFACT_KINDS if k.value not in self.teachers]
            if missing:
                raise MissingPrerequisite(
                    "student stage needs teacher models for: " + ", ".join(missing))


@dataclass
class TrainState:
    model: ToyModel
    optimizer: Adam
    schedule: EpsilonSchedule
    iteration: int = 0
    log: list = field(default_factory=list)


def new_state(cfg: TrainConfig) -> TrainState:
    model = init_model(cfg.width, 2, cfg.aug_kinds(), seed=cfg.seed)
    schedule = EpsilonSchedule(cfg.epsilon, cfg.epsilon_floor, cfg.plateau_window,
                               cfg.plateau_threshold)
    return TrainState(model, Adam(model.params), schedule)


def _draw_batch(cfg: TrainConfig, data: PhantomDataset, rng: np.random.Generator):
    aug = cfg.augmentation()
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(len(data)))
        img, lab = data.images[i], data.labels[i]
        specs = sample_pipeline(aug, rng, img.shape, img.spacing)
        x, _ = corrupt(img, specs)
        xs.append(x)
        ys.append(augment_labels(lab, specs).labels)
    return xs, ys


def _frozen_logvar(model: ToyModel, batch: np.ndarray, n_items: int) -> list[np.ndarray]:
    _, logvar, _ = forward_tensors(model.params, batch)
    return batch_to_volumes(logvar.data.astype(np.float64), n_items)


def _stage_loss(kind, cfg, lg, lv, ys, batch, frozen: Frozen, eps):
    """Mean per-item loss plus gradients w.r.t. the batched logits/log-variances."""
    n = len(ys)
    g_lg = np.zeros((n, *lg[0].shape))
    g_lv = np.zeros((n, *lv[0].shape))
    total = like = cons = 0.0
    if kind != "task":
        pseudo_t = _frozen_logvar(frozen.task, batch, n)
    if kind == "student":
        pseudo_aug = {k: _frozen_logvar(frozen.teachers[k], batch, n) for k in cfg.aug_kinds()}
    for i in range(n):
        logits, s = lg[i], lv[i]
        if kind == "task":
            res = combined_loss(logits, ys[i], UncertaintyBundle(s[0]), eps)
            g_lv[i, 0] = res.grads["s_task"]
            base = res.value
        elif kind == "teacher":
            res = aug_loss(logits, ys[i], s[0], s[1], pseudo_t[i][0], eps, cfg.consistency_lambda)
            g_lv[i, 0] = res.grads["s_task"]
            g_lv[i, 1] = res.grads["s_aug"]
            base = combined_loss(logits, ys[i], UncertaintyBundle(s[0], s[1:]), eps).value
        else:
            teachers = [pseudo_aug[k][i][1] for k in cfg.aug_kinds()]
            res = student_loss(logits, ys[i], UncertaintyBundle(s[0], s[1:]), pseudo_t[i][0],
                               teachers, eps, cfg.consistency_lambda)
            g_lv[i, 0] = res.grads["s_task"]
            g_lv[i, 1:] = res.grads["s_aug"]
            base = combined_loss(logits, ys[i], UncertaintyBundle(s[0], s[1:]), eps).value
        g_lg[i] = res.grads["logits"]
        total += res.value / n
        like += base / n
        cons += (res.value - base) / n
    return total, like, cons, g_lg / n, g_lv / n


def _to_batch_layout(g: np.ndarray) -> np.ndarray:
    # (items, C, X, Y, Z) -> (items*Z, C, X, Y)
    return np.concatenate([np.moveaxis(item, -1, 0) for item in g], axis=0)


def train_stage(
    cfg: TrainConfig,
    data: PhantomDataset,
    frozen: Frozen | None = None,
    state: TrainState | None = None,
    progress=None,
) -> TrainState:
    """Train (or resume) one cascade stage until ``cfg.iterations``.

    Iteration ``t`` draws its batch from an RNG seeded with ``(seed, t)`` so a
    resumed run replays exactly what an uninterrupted run would have done.
    """
    frozen = frozen or Frozen()
    frozen.require(cfg.stage)
    kind, _ = parse_stage(cfg.stage)
    state = state or new_state(cfg)
    model = state.model
    while state.iteration < cfg.iterations:
        it = state.iteration
        rng = np.random.default_rng([cfg.seed, it])
        xs, ys = _draw_batch(cfg, data, rng)
        batch = volumes_to_batch(xs)
        logits_t, logvar_t, p = forward_tensors(model.params, batch, trainable=True)
        lg = batch_to_volumes(logits_t.data.astype(np.float64), len(xs))
        lv = batch_to_volumes(logvar_t.data.astype(np.float64), len(xs))
        eps = state.schedule.epsilon
        try:
            with np.errstate(over="ignore"):
                total, like, cons, g_lg, g_lv = _stage_loss(kind, cfg, lg, lv, ys, batch,
                                                            frozen, eps)
        except NonFiniteError:
            total = math.nan
        if not math.isfinite(total):
            raise TrainingError(
                f"{cfg.stage}: non-finite loss at iteration {it} (epsilon={eps:g}); "
                "lower the learning rate or raise the initial epsilon")
        ag.backward([logits_t, logvar_t], [_to_batch_layout(g_lg), _to_batch_layout(g_lv)])
        grads = {k: t.grad for k, t in p.items() if t.grad is not None}
        lr = cfg.learning_rate * state.schedule.lr_scale
        state.optimizer.step(model.params, grads, lr)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingError(f"{cfg.stage}: parameters became non-finite at iteration {it}")
        state.log.append({"iteration": it, "loss": total, "likelihood": like,
                          "consistency": cons, "epsilon": eps, "learning_rate": lr})
        if state.schedule.update(total):
            log.info("%s it %d: plateau, epsilon -> %g", cfg.stage, it, state.schedule.epsilon)
        state.iteration += 1
        if progress is not None:
            progress(state)
    return state


def save_state(path, state: TrainState, cfg: TrainConfig, provenance: dict | None = None) -> None:
    m = state.model
    meta = {
        "format": "decoupled_qc toy model",
        "model": {"width": m.width, "num_classes": m.num_classes, "aug_kinds": list(m.aug_kinds)},
        "config": asdict(cfg),
        "iteration": state.iteration,
        "adam_t": state.optimizer.t,
        "schedule": state.schedule.state(),
        "provenance": provenance or {},
    }
    tensors = dict(m.params)
    tensors.update(state.optimizer.state())
    checkpoint.save(path, tensors, meta)


def load_state(path) -> tuple[TrainState, dict]:
    tensors, meta = checkpoint.load(path)
    spec = meta["model"]
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model = ToyModel(spec["width"], spec["num_classes"], len(spec["aug_kinds"]),
                     tuple(spec["aug_kinds"]), params)
    opt = Adam(model.params)
    if any(k.startswith("adam.") for k in tensors):
        opt.load(tensors, meta.get("adam_t", 0))
    schedule = EpsilonSchedule.from_state(meta["schedule"])
    return TrainState(model, opt, schedule, meta["iteration"]), meta


def load_model(path) -> ToyModel:
    return load_state(path)[0].model


def train_cascade(base: TrainConfig, data: PhantomDataset, progress=None) -> tuple[Frozen, ToyModel, dict]:
    """Task stage, one teacher per artefact kind, then the student."""
    logs = {}
    cfg = TrainConfig(**{**asdict(base), "stage": "task"})
    task = train_stage(cfg, data, progress=progress)
    logs["task"] = task.log
    frozen = Frozen(task=task.model)
    for k in ARTEFACT_KINDS:
        cfg = TrainConfig(**{**asdict(base), "stage": f"teacher:{k.value}"})
        st = train_stage(cfg, data, frozen, progress=progress)
        frozen.teachers[k.value] = st.model
        logs[cfg.stage] = st.log
    cfg = TrainConfig(**{**asdict(base), "stage": "student"})
    student = train_stage(cfg, data, frozen, progress=progress)
    logs["student"] = student.log
    return frozen, student.model, logs
