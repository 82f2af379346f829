"""Multi-run protocols: repeated training, system ablations, model gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import SynthSpec, synth_dialogs
from .seqmodel import CLASSIFIER_LABELS, FUSION_LABELS, SYSTEMS, Batch, Model, ModelConfig
from .trainer import TrainConfig, TrainResult, evaluate, train


@dataclass
class RepeatSummary:
    uas: list[float]
    results: list[TrainResult]

    @property
    def mean(self) -> float:
        return float(np.mean(self.uas))

    @property
    def std(self) -> float:
        return float(np.std(self.uas))


def run_repeats(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_dialogs,
    eval_dialogs,
    repeats: int = 1,
    val_dialogs=None,
    track_train_ua: bool = False,
) -> RepeatSummary:
    """Train ``repeats`` models with seeds ``seed, seed+1, ...``; UA on ``eval_dialogs``."""
    uas, results = [], []
    for k in range(repeats):
        cfg = replace(train_cfg, seed=train_cfg.seed + k)
        model = Model.create(model_cfg, cfg.seed)
        res = train(model, train_dialogs, cfg, val_dialogs=val_dialogs, track_train_ua=track_train_ua)
        results.append(res)
        uas.append(evaluate(model, eval_dialogs).unweighted_accuracy)
    return RepeatSummary(uas, results)


def run_ablation(
    systems,
    base_cfg: dict,
    train_cfg: TrainConfig,
    train_dialogs,
    test_dialogs,
    repeats: int = 1,
    on_row=None,
) -> list[dict]:
    """Train every named system with shared seeds; one report row per system.

    ``base_cfg`` carries the ModelConfig fields other than the two modes.
    """
    rows = []
    for name in systems:
        modalities, fusion, classifier = SYSTEMS[name]
        cfg = ModelConfig.for_system(name, **base_cfg)
        summary = run_repeats(cfg, train_cfg, train_dialogs, test_dialogs, repeats)
        row = {
            "system": name,
            "modalities": modalities,
            "fusion": FUSION_LABELS[fusion],
            "classifier": CLASSIFIER_LABELS[classifier],
            "ua_mean": summary.mean,
            "ua_std": summary.std,
            "repeats": repeats,
            "uas": summary.uas,
        }
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def ablation_markdown(rows: list[dict]) -> str:
    lines = ["|    | Modalities | Fusion | Classifier | UA(%) |", "|----|----|----|----|----|"]
    for r in rows:
        lines.append(
            f"| {r['system']} | {r['modalities']} | {r['fusion']} | {r['classifier']} | "
            f"{100 * r['ua_mean']:.2f} ± {100 * r['ua_std']:.2f} |"
        )
    return "\n".join(lines)


def check_model_gradients(
    system: str = "S5",
    d: int = 8,
    h: int = 2,
    length: int = 4,
    n_classes: int = 3,
    n_dialogs: int = 2,
    seed: int = 0,
    tol: float = 1e-4,
    dropout_p: float = 0.2,
    dims: tuple[int, int, int] = (5, 4, 3),
) -> T.GradCheckReport:
    """Central-difference check of the mean cross-entropy over a micro-batch.

    Dropout stays on with a mask regenerated from a fixed seed at every
    evaluation, so its backward rule is covered too.
    """
    d_a, d_t, d_s = dims
    spec = SynthSpec(
        n_classes=n_classes, d_a=d_a, d_t=d_t, d_s=d_s, n_dialogs=n_dialogs,
        min_len=length, max_len=length, n_speakers=2, sigma=0.5, regime="contextual",
    )
    _, dialogs = synth_dialogs(spec, seed)
    batch = Batch.of(dialogs)
    cfg = ModelConfig.for_system(system, d_a=d_a, d_t=d_t, d_s=d_s, n_classes=n_classes, d=d, h=h,
                                 dropout_p=dropout_p)
    model = Model.create(cfg, seed)
    names = list(model.params)

    def loss(vs):
        pv = dict(zip(names, vs))
        rng = np.random.default_rng(seed + 1)
        logits, _ = model.logits(pv, batch, train_mode=dropout_p > 0, rng=rng)
        return T.softmax_cross_entropy(logits, batch.labels)

    return T.grad_check(loss, [model.params[k] for k in names], tol=tol, names=names)
