"""Dialog-level classifier: bi-directional GRU, multi-head self-attention, softmax head.

Row t of every L x k matrix belongs to utterance t. Weight matrices keep the
column-vector convention (``W_z`` is hidden x input), so row-form code
multiplies by their transposes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .fusion import FusionMode, fuse_sequence, fusion_param_shapes
from .tensor import ShapeError, Var

GATES = ("z", "r", "h")
DIRECTIONS = ("fwd", "bwd")


class ConfigError(ValueError):
    """Invalid model configuration."""


class ClassifierMode(str, Enum):
    SA_GRU = "SA_GRU"
    ATTN_ONLY = "ATTN_ONLY"
    GRU_ONLY = "GRU_ONLY"


# system presets: (modalities, fusion, classifier)
SYSTEMS: dict[str, tuple[str, FusionMode, ClassifierMode]] = {
    "S1": ("A+T", FusionMode.AT, ClassifierMode.SA_GRU),
    "S2": ("A+T+S", FusionMode.ADD, ClassifierMode.SA_GRU),
    "S3": ("A+T+S", FusionMode.ATS, ClassifierMode.ATTN_ONLY),
    "S4": ("A+T+S", FusionMode.ATS, ClassifierMode.GRU_ONLY),
    "S5": ("A+T+S", FusionMode.ATS, ClassifierMode.SA_GRU),
}

FUSION_LABELS = {FusionMode.ATS: "ATS-Fusion", FusionMode.AT: "AT-Fusion", FusionMode.ADD: "ADD"}
CLASSIFIER_LABELS = {
    ClassifierMode.SA_GRU: "SA-GRU",
    ClassifierMode.ATTN_ONLY: "Attention",
    ClassifierMode.GRU_ONLY: "Bi-GRU",
}


@dataclass
class ModelConfig:
    d_a: int
    d_t: int
    d_s: int
    n_classes: int
    d: int = 100
    h: int = 4
    classifier_mode: ClassifierMode = ClassifierMode.SA_GRU
    fusion_mode: FusionMode = FusionMode.ATS
    dropout_p: float = 0.2
    scaled_attention: bool = False

    def __post_init__(self):
        self.classifier_mode = ClassifierMode(self.classifier_mode)
        self.fusion_mode = FusionMode(self.fusion_mode)
        if self.d < 2 or self.h < 1:
            raise ConfigError(f"need d >= 2 and h >= 1, got d={self.d}, h={self.h}")
        if self.d % self.h:
            raise ConfigError(f"model dim d={self.d} is not divisible by h={self.h} heads")
        if self.d % 2:
            raise ConfigError(f"model dim d={self.d} must be even to split across GRU directions")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")

    @classmethod
    def for_system(cls, system: str, **kw) -> ModelConfig:
        try:
            _, fusion, classifier = SYSTEMS[system]
        except KeyError:
            raise ConfigError(f"unknown system {system!r}; choose from {sorted(SYSTEMS)}") from None
        return cls(fusion_mode=fusion, classifier_mode=classifier, **kw)

    @property
    def uses_gru(self) -> bool:
        return self.classifier_mode is not ClassifierMode.ATTN_ONLY

    @property
    def uses_attention(self) -> bool:
        return self.classifier_mode is not ClassifierMode.GRU_ONLY

    def to_json(self) -> dict:
        out = asdict(self)
        out["classifier_mode"] = self.classifier_mode.value
        out["fusion_mode"] = self.fusion_mode.value
        return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Every trainable tensor of the model, in a fixed order."""
    shapes = dict(fusion_param_shapes(cfg.fusion_mode, cfg.d, cfg.d_a, cfg.d_t, cfg.d_s))
    if cfg.uses_gru:
        hd = cfg.d // 2
        for direction in DIRECTIONS:
            for g in GATES:
                shapes[f"gru_{direction}.W_{g}"] = (hd, cfg.d)
            for g in GATES:
                shapes[f"gru_{direction}.U_{g}"] = (hd, hd)
            for g in GATES:
                shapes[f"gru_{direction}.b_{g}"] = (hd, 1)
    else:
        shapes["W_in"] = (cfg.d, cfg.d)
    if cfg.uses_attention:
        dk = cfg.d // cfg.h
        for i in range(cfg.h):
            for kind in ("Q", "K", "V"):
                shapes[f"attn.{i}.W_{kind}"] = (cfg.d, dk)
    shapes["W_out"] = (cfg.n_classes, cfg.d)
    shapes["b_out"] = (cfg.n_classes, 1)
    return shapes


def _is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b_")


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (r, c) in param_shapes(cfg).items():
        if _is_bias(name):
            params[name] = np.zeros((r, c))
        else:
            a = math.sqrt(6.0 / (r + c))
            params[name] = rng.uniform(-a, a, (r, c))
    return params


# --- GRU -------------------------------------------------------------------


def _gru_cell(xz: Var, xr: Var, xh: Var, h_prev: Var, uz_t: Var, ur_t: Var, uh_t: Var) -> Var:
    z = T.sigmoid_ew(T.add(xz, T.matmul(h_prev, uz_t)))
    r = T.sigmoid_ew(T.add(xr, T.matmul(h_prev, ur_t)))
    cand = T.tanh_ew(T.add(xh, T.matmul(T.hadamard(r, h_prev), uh_t)))
    # z gates the candidate, (1 - z) keeps the previous state
    return T.add(T.hadamard(T.complement(z), h_prev), T.hadamard(z, cand))


def gru_step(p: Mapping[str, Var], f_t: Var, h_prev: Var) -> Var:
    """One GRU update for row vectors ``f_t`` (1 x d) and ``h_prev`` (1 x hd).

    ``p`` holds ``W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h`` of one direction.
    """
    hd = p["U_z"].shape[0]
    if f_t.shape != (1, p["W_z"].shape[1]):
        raise ShapeError(f"gru_step: input {f_t.shape} does not match W_z {p['W_z'].shape}")
    if h_prev.shape != (1, hd):
        raise ShapeError(f"gru_step: state {h_prev.shape}, expected (1, {hd})")
    x = {g: T.add(T.matmul(f_t, T.transpose(p[f"W_{g}"])), T.transpose(p[f"b_{g}"])) for g in GATES}
    u = {g: T.transpose(p[f"U_{g}"]) for g in GATES}
    return _gru_cell(x["z"], x["r"], x["h"], h_prev, u["z"], u["r"], u["h"])


def _offsets(lengths: list[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)


def _check_lengths(n_rows: int, lengths: list[int] | None) -> list[int]:
    if lengths is None:
        lengths = [n_rows]
    lengths = [int(x) for x in lengths]
    if any(x < 1 for x in lengths) or sum(lengths) != n_rows:
        raise ShapeError(f"segment lengths {lengths} do not partition {n_rows} rows")
    return lengths


def gru_scan(p: Mapping[str, Var], F: Var, reverse: bool = False, lengths: list[int] | None = None) -> Var:
    """Run one GRU direction over packed sequences, each from a zero state.

    ``F`` stacks B sequences (``lengths``) row-wise; the output keeps that
    packing. Sequences advance in lockstep, one B-row block per time step.
    """
    n = F.shape[0]
    lengths = _check_lengths(n, lengths)
    hd = p["U_z"].shape[0]
    if F.shape[1] != p["W_z"].shape[1]:
        raise ShapeError(f"gru_scan: input width {F.shape[1]} does not match W_z {p['W_z'].shape}")
    b = len(lengths)
    steps = max(lengths)
    offs = _offsets(lengths)
    lens = np.asarray(lengths)
    # time-major gather: block t holds row t of every sequence; row n is padding
    tm_index = np.array([[offs[j] + t if t < lens[j] else n for j in range(b)] for t in range(steps)]).ravel()
    pad = Var(np.zeros((1, 3 * hd)))
    w_all = T.concat_rows([p[f"W_{g}"] for g in GATES])
    b_all = T.concat_rows([p[f"b_{g}"] for g in GATES])
    x_all = T.add(T.matmul(F, T.transpose(w_all)), T.transpose(b_all))
    x_tm = T.take_rows(T.concat_rows([x_all, pad]), tm_index)
    u = {g: T.transpose(p[f"U_{g}"]) for g in GATES}
    h = Var(np.zeros((b, hd)))
    states: list[Var] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        xz, xr, xh = T.split_cols(T.rows(x_tm, t * b, (t + 1) * b), [hd, hd, hd])
        # padding rows carry no bias, so a zero state stays exactly zero
        # until a reversed sequence reaches its last real row
        h = _gru_cell(xz, xr, xh, h, u["z"], u["r"], u["h"])
        states[t] = h
    packed_index = np.concatenate([np.arange(lens[j]) * b + j for j in range(b)])
    return T.take_rows(T.concat_rows(states), packed_index)


def _direction(p: Mapping[str, Var], direction: str) -> dict[str, Var]:
    prefix = f"gru_{direction}."
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def bi_gru(p: Mapping[str, Var], F: Var, lengths: list[int] | None = None) -> Var:
    """H (L x d): row t is ``[h_fwd_t ; h_bwd_t]``."""
    if F.shape[0] < 1:
        raise ShapeError("bi_gru: empty sequence")
    fwd = gru_scan(_direction(p, "fwd"), F, lengths=lengths)
    bwd = gru_scan(_direction(p, "bwd"), F, reverse=True, lengths=lengths)
    return T.concat_cols([fwd, bwd])


# --- self-attention --------------------------------------------------------


def _block_mask(lengths: list[int]) -> np.ndarray:
    n = sum(lengths)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    mask = np.full((n, n), -np.inf)
    mask[seg[:, None] == seg[None, :]] = 0.0
    return mask


def self_attention(
    p: Mapping[str, Var], H: Var, h: int, scaled: bool = False, lengths: list[int] | None = None
) -> tuple[Var, list[Var]]:
    """Multi-head dot-product self-attention; returns R (L x d) and the heads.

    With several packed sequences, attention stays inside each sequence.
    """
    d = H.shape[1]
    if d % h:
        raise ConfigError(f"d={d} is not divisible by h={h}")
    lengths = _check_lengths(H.shape[0], lengths)
    mask = Var(_block_mask(lengths)) if len(lengths) > 1 else None
    heads = []
    for i in range(h):
        wq, wk, wv = (p[f"attn.{i}.W_{k}"] for k in ("Q", "K", "V"))
        if wq.shape != (d, d // h):
            raise ShapeError(f"attn.{i}.W_Q has shape {wq.shape}, expected {(d, d // h)}")
        q = T.matmul(H, wq)
        k = T.matmul(H, wk)
        v = T.matmul(H, wv)
        scores = T.matmul(q, T.transpose(k))
        if scaled:
            scores = T.scale(scores, 1.0 / math.sqrt(d // h))
        if mask is not None:
            scores = T.add(scores, mask)
        heads.append(T.matmul(T.softmax_rows(scores), v))
    return T.concat_cols(heads), heads


# --- full model ------------------------------------------------------------


@dataclass
class Batch:
    """Dialogs packed row-wise."""

    acoustic: np.ndarray
    lexical: np.ndarray
    speaker: np.ndarray
    labels: np.ndarray
    lengths: list[int]

    @classmethod
    def of(cls, dialogs) -> Batch:
        dialogs = list(dialogs)
        if not dialogs:
            raise ValueError("empty batch")
        return cls(
            np.concatenate([d.acoustic for d in dialogs]),
            np.concatenate([d.lexical for d in dialogs]),
            np.concatenate([d.speaker for d in dialogs]),
            np.concatenate([d.labels for d in dialogs]),
            [len(d) for d in dialogs],
        )

    def split(self, m: np.ndarray) -> list[np.ndarray]:
        return np.split(m, np.cumsum(self.lengths)[:-1])


@dataclass
class Diagnostics:
    fusion_alpha: np.ndarray | None


class Model:
    """Fusion + sequence classifier with parameters in a flat name -> array dict."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in expected}

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> Model:
        return cls(config, init_params(config, seed))

    def copy(self) -> Model:
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def constants(self) -> dict[str, Var]:
        return {k: Var(v) for k, v in self.params.items()}

    def logits(
        self,
        pv: Mapping[str, Var],
        batch: Batch,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        dropout_p: float | None = None,
    ) -> tuple[Var, Var | None]:
        """Pre-softmax scores (N x C) and fusion weights (N x M) for a packed batch.

        Dropout (``dropout_p``, default from the config) hits the classifier
        input only in ``train_mode``.
        """
        cfg = self.config
        for name, arr, dim in (("acoustic", batch.acoustic, cfg.d_a), ("lexical", batch.lexical, cfg.d_t)):
            if arr.shape[1] != dim:
                raise ShapeError(f"{name} features have width {arr.shape[1]}, model expects {dim}")
        speaker = None
        if cfg.fusion_mode.uses_speaker:
            if batch.speaker.shape[1] != cfg.d_s:
                raise ShapeError(f"speaker features have width {batch.speaker.shape[1]}, model expects {cfg.d_s}")
            speaker = Var(batch.speaker)
        F, alpha = fuse_sequence(pv, cfg.fusion_mode, Var(batch.acoustic), Var(batch.lexical), speaker)
        lengths = batch.lengths
        if cfg.classifier_mode is ClassifierMode.ATTN_ONLY:
            X = T.matmul(F, T.transpose(pv["W_in"]))
            R, _ = self_attention(pv, X, cfg.h, cfg.scaled_attention, lengths)
        elif cfg.classifier_mode is ClassifierMode.GRU_ONLY:
            R = bi_gru(pv, F, lengths)
        else:
            R, _ = self_attention(pv, bi_gru(pv, F, lengths), cfg.h, cfg.scaled_attention, lengths)
        if train_mode:
            R = T.dropout(R, cfg.dropout_p if dropout_p is None else dropout_p, rng)
        out = T.add(T.matmul(R, T.transpose(pv["W_out"])), T.transpose(pv["b_out"]))
        return out, alpha

    def predict_batch(self, dialogs) -> tuple[list[np.ndarray], list[np.ndarray | None]]:
        """Inference over several dialogs at once; per-dialog probs and fusion weights."""
        batch = Batch.of(dialogs)
        logits, alpha = self.logits(self.constants(), batch)
        probs = batch.split(T.softmax_array(logits.value))
        alphas = batch.split(alpha.value) if alpha is not None else [None] * len(probs)
        return probs, alphas

    def classify_dialog(
        self, dialog, train_mode: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[np.ndarray, Diagnostics]:
        """Class distribution per utterance (L x C)."""
        logits, alpha = self.logits(self.constants(), Batch.of([dialog]), train_mode, rng)
        probs = T.softmax_array(logits.value)
        return probs, Diagnostics(None if alpha is None else alpha.value)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "convemo-checkpoint/1"


def checkpoint_dict(model: Model, extra: dict | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_json(),
        "params": [
            {"name": k, "rows": int(v.shape[0]), "cols": int(v.shape[1]), "data": v.ravel().tolist()}
            for k, v in model.params.items()
        ],
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra)) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig(**doc["config"])
    params = {}
    for entry in doc["params"]:
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != entry["rows"] * entry["cols"]:
            raise ShapeError(f"{entry['name']}: {data.size} values for {entry['rows']}x{entry['cols']}")
        params[entry["name"]] = data.reshape(entry["rows"], entry["cols"])
    return Model(cfg, params)
