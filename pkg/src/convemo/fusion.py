"""Attention-weighted fusion of acoustic, lexical and speaker embeddings.

For utterance i the modality embeddings ``e_k = W_k x_k`` (each d-dim) form
the columns of ``u_cat``. Fusion scores every column with
``w_F^T tanh(W_F e_k)``, softmaxes the scores into modality weights, and
returns the weighted sum of the columns. ``AT`` drops the speaker column and
``ADD`` skips the attention and sums the embeddings.

Everything here runs on whole dialogs at once: row i of each L x d matrix is
utterance i, which is the transpose of the per-utterance column layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Var


class FusionMode(str, Enum):
    ATS = "ATS"
    AT = "AT"
    ADD = "ADD"

    @property
    def uses_speaker(self) -> bool:
        return self is not FusionMode.AT

    @property
    def uses_attention(self) -> bool:
        return self is not FusionMode.ADD

    @property
    def n_modalities(self) -> int:
        return 3 if self.uses_speaker else 2


def fusion_param_shapes(mode: FusionMode, d: int, d_a: int, d_t: int, d_s: int) -> dict[str, tuple[int, int]]:
    shapes = {"W_a": (d, d_a), "W_t": (d, d_t)}
    if mode.uses_speaker:
        shapes["W_s"] = (d, d_s)
    if mode.uses_attention:
        shapes["W_F"] = (d, d)
        shapes["w_F"] = (d, 1)
    return shapes


@dataclass
class FusionParams:
    mode: FusionMode
    W_a: np.ndarray
    W_t: np.ndarray
    W_s: np.ndarray | None = None
    W_F: np.ndarray | None = None
    w_F: np.ndarray | None = None

    def __post_init__(self):
        self.mode = FusionMode(self.mode)
        d = self.W_a.shape[0]
        present = {k for k in ("W_s", "W_F", "w_F") if getattr(self, k) is not None}
        needed = set(fusion_param_shapes(self.mode, d, 1, 1, 1)) - {"W_a", "W_t"}
        if present != needed:
            raise ShapeError(f"{self.mode.value} fusion needs {sorted(needed)}, got {sorted(present)}")
        expected = fusion_param_shapes(
            self.mode, d, self.W_a.shape[1], self.W_t.shape[1],
            self.W_s.shape[1] if self.W_s is not None else 0,
        )
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.W_a.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        names = fusion_param_shapes(self.mode, 1, 1, 1, 1)
        return {k: getattr(self, k) for k in names}

    @classmethod
    def from_dict(cls, mode: FusionMode | str, params: Mapping[str, np.ndarray]) -> FusionParams:
        return cls(FusionMode(mode), **{k: params[k] for k in ("W_a", "W_t", "W_s", "W_F", "w_F") if k in params})


@dataclass
class FusionOutput:
    fused: np.ndarray  # d x 1
    attn_weights: np.ndarray | None  # 1 x M, None for ADD


def fuse_sequence(
    p: Mapping[str, Var], mode: FusionMode, acoustic: Var, lexical: Var, speaker: Var | None
) -> tuple[Var, Var | None]:
    """Fuse L utterances; returns ``F`` (L x d) and modality weights (L x M)."""
    mode = FusionMode(mode)
    if mode.uses_speaker and speaker is None:
        raise ValueError(f"{mode.value} fusion needs speaker embeddings")
    inputs = [(acoustic, "W_a"), (lexical, "W_t")]
    if mode.uses_speaker:
        inputs.append((speaker, "W_s"))
    length = acoustic.shape[0]
    embedded = []
    for x, wname in inputs:
        w = p[wname]
        if x.shape[0] != length:
            raise ShapeError(f"modalities disagree on utterance count: {acoustic.shape} vs {x.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"features of width {x.shape[1]} do not match {wname} {w.shape}")
        embedded.append(T.matmul(x, T.transpose(w)))

    if not mode.uses_attention:
        fused = embedded[0]
        for e in embedded[1:]:
            fused = T.add(fused, e)
        return fused, None

    m = len(embedded)
    # all modality columns of all utterances share W_F: score them in one pass
    stacked = T.concat_rows(embedded)  # (M*L) x d
    proj = T.tanh_ew(T.matmul(stacked, T.transpose(p["W_F"])))
    scores = T.matmul(proj, p["w_F"])  # (M*L) x 1
    score_cols = T.concat_cols(T.split_rows(scores, [length] * m))  # L x M
    alpha = T.softmax_rows(score_cols)
    fused = None
    for k, e in enumerate(embedded):
        term = T.hadamard(T.cols(alpha, k, k + 1), e)
        fused = term if fused is None else T.add(fused, term)
    return fused, alpha


def _param_vars(params: FusionParams | Mapping[str, np.ndarray]) -> tuple[dict[str, Var], FusionMode | None]:
    if isinstance(params, FusionParams):
        return {k: Var(v) for k, v in params.as_dict().items()}, params.mode
    return {k: v if isinstance(v, Var) else Var(v) for k, v in params.items()}, None


def fuse(params: FusionParams, a, t, s=None) -> FusionOutput:
    """Fuse a single utterance given its three feature vectors."""
    p, mode = _param_vars(params)
    if mode.uses_speaker and s is None:
        raise ValueError(f"{mode.value} fusion needs a speaker embedding")
    row = lambda v: Var(np.asarray(v, dtype=np.float64).reshape(1, -1))  # noqa: E731
    fused, alpha = fuse_sequence(p, mode, row(a), row(t), row(s) if mode.uses_speaker else None)
    return FusionOutput(fused.value.T.copy(), None if alpha is None else alpha.value.copy())


def fuse_dialog(params: FusionParams, dialog) -> tuple[np.ndarray, np.ndarray | None]:
    """Fuse every utterance of a dialog; returns (L x d, L x M or None)."""
    if len(dialog) == 0:
        raise ValueError(f"dialog {dialog.id!r} is empty")
    p, mode = _param_vars(params)
    speaker = Var(dialog.speaker) if mode.uses_speaker else None
    fused, alpha = fuse_sequence(p, mode, Var(dialog.acoustic), Var(dialog.lexical), speaker)
    return fused.value, None if alpha is None else alpha.value
