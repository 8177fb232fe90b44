"""Synthetic spoken-digit corpus with injected label mismatches, and its on-disk format.

Each split directory holds ``manifest.jsonl`` (a header line, then one line per
utterance with its byte offset) and ``records.bin``. A record is, all
little-endian: ``u32 T, u32 L``, ``f32[T*D]`` features (row-major), then four
``u32[L]`` arrays: labels C, pronounced digits, segment start frames, mismatch flags.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Truth, Utterance, ValidationError

FORMAT_NAME = "mlvae-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")
SPLIT_RATIO = (0.6, 0.2, 0.2)

_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


class DatasetFormatError(ValidationError):
    """A dataset file could not be parsed; the message names the file and byte offset."""


@dataclass(frozen=True)
class CorpusConfig:
    total: int = 3000
    n_symbols: int = 10
    feature_dim: int = 8
    sep: float = 4.0
    sigma: float = 1.0
    d_min: int = 5
    d_max: int = 20
    min_digits: int = 3
    max_digits: int = 7
    mismatch_rate: float = 0.201
    seed: int = 0

    def __post_init__(self):
        if self.total < 5:
            raise ValidationError("need at least 5 utterances for a 60:20:20 split")
        if not 0.0 <= self.mismatch_rate < 1.0:
            raise ValidationError("mismatch_rate must lie in [0, 1)")
        if self.d_min < 3 or self.d_max < self.d_min:
            raise ValidationError("durations need 3 <= d_min <= d_max")
        if not 1 <= self.min_digits <= self.max_digits:
            raise ValidationError("need 1 <= min_digits <= max_digits")
        if self.n_symbols < 2 or self.feature_dim < 1 or self.sigma <= 0 or self.sep < 0:
            raise ValidationError("invalid symbol model settings")


@dataclass(frozen=True)
class SymbolModel:
    """Per-symbol Gaussian frame distribution and duration range."""

    means: np.ndarray       # (V, D)
    var: np.ndarray         # (V, D)
    d_min: int = 5
    d_max: int = 20

    def __post_init__(self):
        if self.d_min < 3 or self.d_max < self.d_min:
            raise ValidationError("durations need 3 <= d_min <= d_max")
        if np.asarray(self.means).shape != np.asarray(self.var).shape:
            raise ValidationError("means and variances must have the same shape")

    @property
    def num_symbols(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    def min_separation(self) -> float:
        diff = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        return float(dist[~np.eye(self.num_symbols, dtype=bool)].min())

    @classmethod
    def random(cls, n_symbols: int, dim: int, sep: float, sigma: float, d_min: int, d_max: int,
               rng: np.random.Generator) -> "SymbolModel":
        """Random means rescaled so the closest pair sits exactly ``sep * sigma`` apart."""
        means = rng.normal(size=(n_symbols, dim))
        model = cls(means, np.full((n_symbols, dim), sigma ** 2), d_min, d_max)
        if sep > 0:
            means = means * (sep * sigma / model.min_separation())
        return cls(means, np.full((n_symbols, dim), sigma ** 2), d_min, d_max)

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> "SymbolModel":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        return cls.random(cfg.n_symbols, cfg.feature_dim, cfg.sep, cfg.sigma, cfg.d_min, cfg.d_max, rng)


def gen_utterance(model: SymbolModel, rng: np.random.Generator, mismatch_rate: float,
                  uid: str = "utt", min_digits: int = 3, max_digits: int = 7) -> Utterance:
    if not 0.0 <= mismatch_rate < 1.0:
        raise ValidationError("mismatch_rate must lie in [0, 1)")
    V = model.num_symbols
    L = int(rng.integers(min_digits, max_digits + 1))
    pronounced = rng.integers(0, V, size=L)
    durations = rng.integers(model.d_min, model.d_max + 1, size=L)
    flip = rng.random(L) < mismatch_rate
    # a uniformly random *different* digit: shift by 1..V-1
    labels = np.where(flip, (pronounced + rng.integers(1, V, size=L)) % V, pronounced)
    frame_digit = np.repeat(pronounced, durations)
    noise = rng.standard_normal((frame_digit.size, model.feature_dim))
    X = (model.means[frame_digit] + np.sqrt(model.var[frame_digit]) * noise).astype(np.float32)
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    return Utterance(uid, X, labels, Truth(pronounced, starts, flip))


def split_sizes(total: int) -> tuple[int, int, int]:
    """60:20:20 by flooring, with leftovers handed to train and then valid."""
    sizes = [int(total * r) for r in SPLIT_RATIO]
    for i in range(total - sum(sizes)):
        sizes[i % 2] += 1
    return tuple(sizes)


def gen_dataset(cfg: CorpusConfig) -> dict[str, list[Utterance]]:
    """Deterministic corpus: utterance ``i`` uses its own stream seeded by ``(seed, i)``."""
    model = SymbolModel.from_config(cfg)
    utts = []
    for i in range(cfg.total):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, i]))
        utts.append(gen_utterance(model, rng, cfg.mismatch_rate, f"utt{i:06d}", cfg.min_digits, cfg.max_digits))
    n_train, n_valid, _ = split_sizes(cfg.total)
    return {
        "train": utts[:n_train],
        "valid": utts[n_train:n_train + n_valid],
        "test": utts[n_train + n_valid:],
    }


# ---------------------------------------------------------------------------
# on-disk format

def _encode(utt: Utterance) -> bytes:
    if utt.truth is None:
        raise ValidationError(f"{utt.id}: only utterances with ground truth can be written")
    T, L = utt.num_frames, utt.num_phonemes
    parts = [
        np.array([T, L], dtype=_U32).tobytes(),
        np.ascontiguousarray(utt.X, dtype=_F32).tobytes(),
        utt.C.astype(_U32).tobytes(),
        utt.truth.pronounced.astype(_U32).tobytes(),
        utt.truth.boundaries.astype(_U32).tobytes(),
        utt.truth.mismatch.astype(_U32).tobytes(),
    ]
    return b"".join(parts)


def write_dataset(path, utterances: Sequence[Utterance], split: str = "", meta: dict | None = None):
    """Write one split directory (``manifest.jsonl`` + ``records.bin``)."""
    path = Path(path)
    if not utterances:
        raise ValidationError("refusing to write an empty split")
    dims = {u.X.shape[1] for u in utterances}
    if len(dims) != 1:
        raise ValidationError(f"inconsistent feature dimensions {sorted(dims)}")
    try:
        path.mkdir(parents=True, exist_ok=True)
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "split": split,
                  "count": len(utterances), "feature_dim": dims.pop(), **(meta or {})}
        lines = [json.dumps(header, sort_keys=True)]
        offset = 0
        with open(path / "records.bin", "wb") as fh:
            for u in utterances:
                blob = _encode(u)
                lines.append(json.dumps({"id": u.id, "offset": offset, "num_frames": u.num_frames,
                                         "num_phonemes": u.num_phonemes}, sort_keys=True))
                fh.write(blob)
                offset += len(blob)
        (path / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset at {path}: {exc}") from exc


def read_manifest(path) -> tuple[dict, list[dict]]:
    mpath = Path(path) / "manifest.jsonl"
    try:
        raw = mpath.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {mpath}: {exc}") from exc
    entries, pos = [], 0
    for line in raw.splitlines(keepends=True):
        if line.strip():
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{mpath}: bad JSON at byte {pos + exc.pos}: {exc.msg}") from None
        pos += len(line)
    if not entries:
        raise DatasetFormatError(f"{mpath}: empty manifest at byte 0")
    header, records = entries[0], entries[1:]
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: unsupported format header at byte 0")
    if header.get("count") != len(records):
        raise ValidationError(f"{mpath}: header count {header.get('count')} but {len(records)} records listed")
    offsets = [r["offset"] for r in records]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ValidationError(f"{mpath}: record offsets must be strictly increasing")
    return header, records


def read_dataset(path) -> list[Utterance]:
    """Read one split directory written by :func:`write_dataset`."""
    header, records = read_manifest(path)
    rpath = Path(path) / "records.bin"
    try:
        buf = rpath.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {rpath}: {exc}") from exc
    D = int(header["feature_dim"])
    out = []

    def take(pos, n, dtype, what):
        end = pos + n * dtype.itemsize
        if end > len(buf):
            raise DatasetFormatError(f"{rpath}: truncated {what} at byte {pos} (need {end - pos}, have {len(buf) - pos})")
        return np.frombuffer(buf, dtype=dtype, count=n, offset=pos), end

    pos = 0
    for rec in records:
        if rec["offset"] != pos:
            raise DatasetFormatError(f"{rpath}: record {rec['id']} expected at byte {rec['offset']}, found {pos}")
        (T, L), pos = take(pos, 2, _U32, "record header")
        T, L = int(T), int(L)
        if (T, L) != (rec["num_frames"], rec["num_phonemes"]):
            raise DatasetFormatError(f"{rpath}: record header at byte {rec['offset']} disagrees with manifest")
        X, pos = take(pos, T * D, _F32, "features")
        arrays = []
        for what in ("labels", "pronounced", "boundaries", "mismatch"):
            a, pos = take(pos, L, _U32, what)
            arrays.append(a.astype(np.int64))
        C, pron, starts, mis = arrays
        out.append(Utterance(rec["id"], X.reshape(T, D).copy(), C, Truth(pron, starts, mis.astype(bool))))
    if pos != len(buf):
        raise DatasetFormatError(f"{rpath}: {len(buf) - pos} trailing bytes at byte {pos}")
    return out


def write_corpus(root, splits: dict[str, list[Utterance]], cfg: CorpusConfig):
    root = Path(root)
    meta = {"seed": cfg.seed, "mismatch_rate": cfg.mismatch_rate}
    for name in SPLITS:
        write_dataset(root / name, splits[name], name, meta)
    try:
        (root / "config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {root / 'config.json'}: {exc}") from exc


def read_corpus(root) -> dict[str, list[Utterance]]:
    root = Path(root)
    return {name: read_dataset(root / name) for name in SPLITS if (root / name).is_dir()}


def load_split(path) -> list[Utterance]:
    """Accept either a split directory or a corpus root (returns its test split)."""
    path = Path(path)
    if (path / "manifest.jsonl").exists():
        return read_dataset(path)
    if (path / "test" / "manifest.jsonl").exists():
        return read_dataset(path / "test")
    raise FileNotFoundError(f"no dataset found at {path}")


def mismatch_fraction(utts: Sequence[Utterance]) -> float:
    flags = np.concatenate([u.truth.mismatch for u in utts])
    return float(flags.mean())


def corpus_digest(root) -> str:
    """SHA-256 over every file of a corpus directory, in sorted path order."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(os.fsencode(p.relative_to(root).as_posix()))
        h.update(p.read_bytes())
    return h.hexdigest()
