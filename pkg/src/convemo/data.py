"""Dialog datasets: schema, JSON-lines I/O, synthetic generation, splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CLASSES = ("happy", "angry", "sad", "neutral")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(eq=False)
class UtteranceRecord:
    acoustic: np.ndarray
    lexical: np.ndarray
    speaker_emb: np.ndarray
    label: int
    speaker_tag: str | None = None


@dataclass(eq=False)
class Dialog:
    id: str
    utterances: list[UtteranceRecord]

    def __len__(self) -> int:
        return len(self.utterances)

    @cached_property
    def acoustic(self) -> np.ndarray:
        """L x D_a matrix, one row per utterance."""
        return np.stack([u.acoustic for u in self.utterances])

    @cached_property
    def lexical(self) -> np.ndarray:
        return np.stack([u.lexical for u in self.utterances])

    @cached_property
    def speaker(self) -> np.ndarray:
        return np.stack([u.speaker_emb for u in self.utterances])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.intp)

    def speaker_tags(self) -> set[str]:
        return {u.speaker_tag for u in self.utterances if u.speaker_tag is not None}

    def permuted(self, order: Sequence[int]) -> Dialog:
        """Copy with utterances reordered so that new position i holds old ``order[i]``."""
        if sorted(order) != list(range(len(self))):
            raise ValueError(f"not a permutation of range({len(self)}): {list(order)}")
        return Dialog(self.id, [self.utterances[i] for i in order])


@dataclass
class DatasetMeta:
    d_a: int
    d_t: int
    d_s: int
    c: int
    class_names: list[str] = field(default_factory=list)
    split_tag: str = ""

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.c)]
        if len(self.class_names) != self.c:
            raise DataError(f"{len(self.class_names)} class names for c={self.c}")

    def to_json(self) -> dict:
        out = {"d_a": self.d_a, "d_t": self.d_t, "d_s": self.d_s, "c": self.c, "classes": list(self.class_names)}
        if self.split_tag:
            out["split"] = self.split_tag
        return out


def validate_dialog(meta: DatasetMeta, dialog: Dialog) -> None:
    if not dialog.utterances:
        raise DataError(f"dialog {dialog.id!r} has no utterances")
    expected = {"acoustic": meta.d_a, "lexical": meta.d_t, "speaker_emb": meta.d_s}
    for i, u in enumerate(dialog.utterances):
        for attr, dim in expected.items():
            vec = getattr(u, attr)
            if vec.ndim != 1 or vec.shape[0] != dim:
                raise DataError(
                    f"dialog {dialog.id!r} utterance {i}: {attr} has dim {vec.shape}, expected {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise DataError(f"dialog {dialog.id!r} utterance {i}: non-finite {attr}")
        if not 0 <= u.label < meta.c:
            raise DataError(f"dialog {dialog.id!r} utterance {i}: label {u.label} outside [0, {meta.c})")


# --- JSON-lines I/O --------------------------------------------------------


def _utt_to_json(u: UtteranceRecord) -> dict:
    return {
        "a": u.acoustic.tolist(),
        "t": u.lexical.tolist(),
        "s": u.speaker_emb.tolist(),
        "spk": u.speaker_tag,
        "y": int(u.label),
    }


def dumps_dataset(meta: DatasetMeta, dialogs: Iterable[Dialog]) -> str:
    # repr-based float formatting in json round-trips every float64 exactly
    lines = [json.dumps(meta.to_json())]
    for d in dialogs:
        lines.append(json.dumps({"id": d.id, "utts": [_utt_to_json(u) for u in d.utterances]}))
    return "\n".join(lines) + "\n"


def save_dataset(path: str | Path, meta: DatasetMeta, dialogs: Sequence[Dialog]) -> None:
    for d in dialogs:
        validate_dialog(meta, d)
    Path(path).write_text(dumps_dataset(meta, dialogs), encoding="utf-8")


def _vector(obj, key: str, lineno: int) -> np.ndarray:
    try:
        return np.asarray(obj[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: bad or missing field {key!r}: {exc}") from exc


def load_dataset(path: str | Path) -> tuple[DatasetMeta, list[Dialog]]:
    """Read a dataset file; dialogs and utterances keep file order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
        meta = DatasetMeta(
            d_a=int(head["d_a"]),
            d_t=int(head["d_t"]),
            d_s=int(head["d_s"]),
            c=int(head["c"]),
            class_names=list(head.get("classes") or []),
            split_tag=str(head.get("split", "")),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path} line 1: malformed header: {exc}") from exc

    dialogs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            did = str(obj["id"])
            raw_utts = obj["utts"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path} line {lineno}: malformed dialog record: {exc}") from exc
        utts = []
        for u in raw_utts:
            try:
                label = int(u["y"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path} line {lineno}: dialog {did!r} has a bad label: {exc}") from exc
            spk = u.get("spk")
            utts.append(
                UtteranceRecord(
                    acoustic=_vector(u, "a", lineno),
                    lexical=_vector(u, "t", lineno),
                    speaker_emb=_vector(u, "s", lineno),
                    label=label,
                    speaker_tag=None if spk is None else str(spk),
                )
            )
        dialog = Dialog(did, utts)
        validate_dialog(meta, dialog)
        dialogs.append(dialog)
    return meta, dialogs


def datasets_equal(a: Sequence[Dialog], b: Sequence[Dialog]) -> bool:
    """Bit-exact comparison of two dialog lists."""
    if len(a) != len(b):
        return False
    for da, db in zip(a, b):
        if da.id != db.id or len(da) != len(db):
            return False
        for ua, ub in zip(da.utterances, db.utterances):
            if ua.label != ub.label or ua.speaker_tag != ub.speaker_tag:
                return False
            for x, y in ((ua.acoustic, ub.acoustic), (ua.lexical, ub.lexical), (ua.speaker_emb, ub.speaker_emb)):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
    return True


# --- synthetic dialogs -----------------------------------------------------

REGIMES = ("pointwise", "contextual", "speaker")


@dataclass
class SynthSpec:
    """Parameters of the synthetic dialog generator.

    Regimes:

    ``pointwise``
        Each label is drawn uniformly; acoustic and lexical vectors sit on
        that class's centroid.
    ``contextual``
        The centroid index of utterance t is ``(perm[c_{t-1}] + y_t) mod C``
        (``c_1 = y_1``), so a label is recoverable only from the current and
        the preceding utterance together.
    ``speaker``
        As ``contextual`` with the current speaker's group (0 or 1) subtracted
        from the centroid index, so the label also depends on who is talking.

    Speakers come in sessions of two, one from each group, and alternate
    turns within a dialog. Speaker tags are ``spk<k>``.
    """

    n_classes: int = 4
    d_a: int = 8
    d_t: int = 8
    d_s: int = 4
    n_dialogs: int = 100
    min_len: int = 4
    max_len: int = 8
    n_speakers: int = 10
    sigma: float = 0.1
    regime: str = "pointwise"
    centroid_scale: float = 1.0
    speaker_spread: float = 0.5
    class_centroids: dict[str, np.ndarray] | None = None
    perm: list[int] | None = None
    class_names: list[str] | None = None

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_speakers < 2 or self.n_speakers % 2:
            raise DataError(f"n_speakers must be an even number >= 2, got {self.n_speakers}")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise DataError(f"sigma must be >= 0, got {self.sigma}")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError(f"bad dialog length range [{self.min_len}, {self.max_len}]")
        if self.n_dialogs < 1:
            raise DataError("n_dialogs must be >= 1")
        if self.regime not in REGIMES:
            raise DataError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.class_centroids is not None:
            for key, dim in (("a", self.d_a), ("t", self.d_t)):
                cen = self.class_centroids.get(key)
                if cen is None or np.asarray(cen).size == 0:
                    raise DataError(f"empty centroid set for modality {key!r}")
                if np.asarray(cen).shape != (self.n_classes, dim):
                    raise DataError(
                        f"centroids for {key!r} have shape {np.asarray(cen).shape}, "
                        f"expected {(self.n_classes, dim)}"
                    )
        if self.perm is not None and sorted(self.perm) != list(range(self.n_classes)):
            raise DataError(f"perm {self.perm} is not a permutation of the classes")


@dataclass
class SynthWorld:
    """Everything the generator fixed before sampling dialogs."""

    centroids_a: np.ndarray
    centroids_t: np.ndarray
    speaker_centroids: np.ndarray
    speaker_group: np.ndarray
    perm: np.ndarray


def _make_world(spec: SynthSpec, rng: np.random.Generator) -> SynthWorld:
    if spec.class_centroids is not None:
        ca = np.asarray(spec.class_centroids["a"], dtype=np.float64)
        ct = np.asarray(spec.class_centroids["t"], dtype=np.float64)
    else:
        ca = rng.normal(0.0, spec.centroid_scale, (spec.n_classes, spec.d_a))
        ct = rng.normal(0.0, spec.centroid_scale, (spec.n_classes, spec.d_t))
    group_centers = rng.normal(0.0, spec.centroid_scale, (2, spec.d_s))
    group = np.tile([0, 1], spec.n_speakers // 2)
    spk = group_centers[group] + rng.normal(0.0, spec.speaker_spread, (spec.n_speakers, spec.d_s))
    perm = np.asarray(spec.perm if spec.perm is not None else rng.permutation(spec.n_classes), dtype=np.intp)
    return SynthWorld(ca, ct, spk, group, perm)


def centroid_indices(labels: Sequence[int], groups: Sequence[int], perm: Sequence[int], regime: str, c: int) -> list[int]:
    """Centroid index of every utterance given labels and speaker groups."""
    out: list[int] = []
    for t, y in enumerate(labels):
        if regime == "pointwise":
            out.append(int(y))
            continue
        g = int(groups[t]) if regime == "speaker" else 0
        prev = perm[out[t - 1]] if t > 0 else 0
        out.append(int((prev + y - g) % c))
    return out


def synth_dialogs(spec: SynthSpec, seed: int) -> tuple[DatasetMeta, list[Dialog]]:
    """Generate a deterministic synthetic dataset for ``seed``."""
    meta, dialogs, _ = synth_world(spec, seed)
    return meta, dialogs


def synth_world(spec: SynthSpec, seed: int) -> tuple[DatasetMeta, list[Dialog], SynthWorld]:
    spec.validate()
    rng = np.random.default_rng(seed)
    world = _make_world(spec, rng)
    c = spec.n_classes
    n_sessions = spec.n_speakers // 2
    dialogs = []
    for i in range(spec.n_dialogs):
        session = i % n_sessions
        pair = (2 * session, 2 * session + 1)
        first = int(rng.integers(2))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        speakers = [pair[(first + t) % 2] for t in range(length)]
        labels = rng.integers(0, c, size=length)
        groups = world.speaker_group[speakers]
        cidx = centroid_indices(labels, groups, world.perm, spec.regime, c)
        utts = []
        for t in range(length):
            a = world.centroids_a[cidx[t]] + spec.sigma * rng.standard_normal(spec.d_a)
            tx = world.centroids_t[cidx[t]] + spec.sigma * rng.standard_normal(spec.d_t)
            s = world.speaker_centroids[speakers[t]] + spec.sigma * rng.standard_normal(spec.d_s)
            utts.append(UtteranceRecord(a, tx, s, int(labels[t]), f"spk{speakers[t]}"))
        dialogs.append(Dialog(f"dlg{i:05d}", utts))
    names = spec.class_names or (list(DEFAULT_CLASSES) if c == 4 else [f"class{k}" for k in range(c)])
    meta = DatasetMeta(spec.d_a, spec.d_t, spec.d_s, c, list(names), split_tag=f"synth-{spec.regime}")
    return meta, dialogs, world


# --- splitting -------------------------------------------------------------


def _speaker_components(dialogs: Sequence[Dialog]) -> list[list[int]]:
    """Group dialog indices that share any speaker tag (union-find)."""
    parent = list(range(len(dialogs)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict[str, int] = {}
    for i, d in enumerate(dialogs):
        for tag in sorted(d.speaker_tags()):
            if tag in owner:
                parent[find(i)] = find(owner[tag])
            else:
                owner[tag] = i
    groups: dict[int, list[int]] = {}
    for i in range(len(dialogs)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def split_by_dialog(
    dialogs: Sequence[Dialog], fraction: float, seed: int, speaker_independent: bool = True
) -> tuple[list[Dialog], list[Dialog]]:
    """Split whole dialogs into (train, test).

    With speaker tags present (and ``speaker_independent``), dialogs sharing a
    speaker always land on the same side.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(dialogs) < 2:
        raise DataError("need at least 2 dialogs to split")
    rng = np.random.default_rng(seed)
    if speaker_independent:
        comps = _speaker_components(dialogs)
    else:
        comps = [[i] for i in range(len(dialogs))]
    order = rng.permutation(len(comps))
    target = round(fraction * len(dialogs))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for pos, k in enumerate(order):
        comp = comps[k]
        last = pos == len(order) - 1
        if last and not test_idx:
            test_idx.extend(comp)
        elif last and not train_idx:
            train_idx.extend(comp)
        elif abs(len(train_idx) + len(comp) - target) <= abs(len(train_idx) - target):
            train_idx.extend(comp)
        else:
            test_idx.extend(comp)
    if not train_idx or not test_idx:
        biggest = max(comps, key=len)
        tags = sorted(set().union(*(dialogs[i].speaker_tags() for i in biggest)))
        raise DataError(
            "no speaker-independent split exists: speaker tags "
            f"{tags} link {len(biggest)} of {len(dialogs)} dialogs"
        )
    train_idx.sort()
    test_idx.sort()
    return [dialogs[i] for i in train_idx], [dialogs[i] for i in test_idx]
