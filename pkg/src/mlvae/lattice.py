"""Mismatch-localization acceptor, weight assignment and best-path decoding.

The sentence acceptor gives every target phoneme a *correct* lane and a
*mismatch* lane. Decoding runs a Viterbi search over a (frame, phoneme, lane)
trellis, which accepts the same language as the state graph built by
:func:`build_sentence_fsa`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import (
    InfeasibleError,
    LocalizationResult,
    ValidationError,
    boundaries_to_segments,
    segment_index,
    starts_to_boundaries,
    uniform_alignment,
)

PROB_FLOOR = 1e-10
LOG_FLOOR = math.log(PROB_FLOOR)

CORRECT, MISMATCH = 0, 1

# arc labels
R, W, H, S = "R", "W", "H", "S"


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    label: str
    phoneme_pos: int = -1   # position l in C for c_l / c_l* arcs
    mode: int = CORRECT

    @property
    def consumes_frame(self) -> bool:
        return self.phoneme_pos >= 0 or self.label == H


@dataclass(frozen=True)
class SentenceFsa:
    phonemes: tuple
    num_states: int
    arcs: tuple
    initial: int
    final: int
    single_path: bool = False

    @property
    def num_lanes(self) -> int:
        return len(self.phonemes) * (1 if self.single_path else 2)

    def out_arcs(self, state: int) -> list[Arc]:
        return [a for a in self.arcs if a.src == state]


def _phoneme_arcs(l: int, c, base: int, single_path: bool) -> list[Arc]:
    """Arcs of one phoneme acceptor with its initial state at ``base``."""
    if single_path:
        s0, s1, s2 = base, base + 1, base + 2
        return [Arc(s0, s1, f"{c}", l, CORRECT), Arc(s1, s1, H), Arc(s1, s2, S)]
    s = [base + i for i in range(6)]
    return [
        Arc(s[0], s[1], R), Arc(s[1], s[2], f"{c}", l, CORRECT), Arc(s[2], s[2], H), Arc(s[2], s[5], S),
        Arc(s[0], s[3], W), Arc(s[3], s[4], f"{c}*", l, MISMATCH), Arc(s[4], s[4], H), Arc(s[4], s[5], S),
    ]


def build_sentence_fsa(C: Sequence[int]) -> SentenceFsa:
    """Chain one six-state acceptor per phoneme, merging each final state with the next initial state."""
    C = tuple(int(c) for c in C)
    if not C:
        raise ValidationError("phoneme sequence is empty")
    arcs = []
    for l, c in enumerate(C):
        arcs.extend(_phoneme_arcs(l, c, 5 * l, single_path=False))
    return SentenceFsa(C, 5 * len(C) + 1, tuple(arcs), 0, 5 * len(C))


def build_single_path_fsa(C: Sequence[int]) -> SentenceFsa:
    C = tuple(int(c) for c in C)
    if not C:
        raise ValidationError("phoneme sequence is empty")
    arcs = []
    for l, c in enumerate(C):
        arcs.extend(_phoneme_arcs(l, c, 2 * l, single_path=True))
    return SentenceFsa(C, 2 * len(C) + 1, tuple(arcs), 0, 2 * len(C), single_path=True)


def accepted_labelings(fsa: SentenceFsa, T: int) -> Iterator[tuple]:
    """Every per-frame labeling ``((l, mode), ...)`` of length T the acceptor accepts.

    Exponential; meant for validating the trellis on tiny inputs.
    """
    by_src: dict[int, list[Arc]] = {}
    for a in fsa.arcs:
        by_src.setdefault(a.src, []).append(a)
    seen = set()

    def walk(state, labels, current):
        if len(labels) > T:
            return
        if state == fsa.final and len(labels) == T:
            key = tuple(labels)
            if key not in seen:
                seen.add(key)
                yield key
        for arc in by_src.get(state, ()):
            if arc.phoneme_pos >= 0:
                yield from walk(arc.dst, labels + [(arc.phoneme_pos, arc.mode)], (arc.phoneme_pos, arc.mode))
            elif arc.label == H:
                yield from walk(arc.dst, labels + [current], current)
            else:
                yield from walk(arc.dst, labels, current)

    yield from walk(fsa.initial, [], None)


# ---------------------------------------------------------------------------
# weights

@dataclass(frozen=True)
class FrameScores:
    """Log weights for the trellis.

    emit[t, l, m]: lane emission; stay[t] = ln q(b_t=0); advance[t] = ln q(b_t=1);
    log_pi[t, m] = ln q(pi_t = m) used when lane m is entered at frame t.
    """

    emit: np.ndarray
    stay: np.ndarray
    advance: np.ndarray
    log_pi: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.emit.shape[0]

    @property
    def num_phonemes(self) -> int:
        return self.emit.shape[1]

    def advance_into(self, mode: int) -> np.ndarray:
        return self.advance + self.log_pi[:, mode]


def _clamped_log(p) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))


def frame_scores(log_qy: np.ndarray, q_b1: np.ndarray, prior: np.ndarray, C: Sequence[int],
                 log_qpi: Optional[np.ndarray] = None) -> FrameScores:
    """Trellis weights from model posteriors.

    ``log_qpi`` is (T, 2) with ln q(pi_t=0), ln q(pi_t=1); ``None`` drops the
    correctness factor (used by plain forced alignment).
    """
    C = np.asarray(C, dtype=np.int64)
    log_qy = np.asarray(log_qy, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    log_qc = np.maximum(log_qy[:, C], LOG_FLOOR)                       # (T, L)
    q_c = np.exp(log_qy[:, C])
    emit = np.empty(log_qc.shape + (2,))
    emit[..., CORRECT] = log_qc - np.log(prior[C])
    emit[..., MISMATCH] = _clamped_log(1.0 - q_c) - np.log1p(-prior[C])
    q_b1 = np.asarray(q_b1, dtype=np.float64)
    stay = _clamped_log(1.0 - q_b1)
    advance = _clamped_log(q_b1)
    if log_qpi is None:
        log_pi = np.zeros((len(q_b1), 2))
    else:
        log_pi = np.maximum(np.asarray(log_qpi, dtype=np.float64), LOG_FLOOR)
    return FrameScores(emit, stay, advance, log_pi)


# ---------------------------------------------------------------------------
# best path

@dataclass(frozen=True)
class PathResult:
    boundaries: np.ndarray      # B, length T
    correctness: np.ndarray     # Pi, length T (frame level)
    segment_modes: np.ndarray   # length L
    starts: np.ndarray          # length L
    log_score: float
    cumulative: np.ndarray      # cumulative score along the path, length T
    lanes: np.ndarray           # (T, 2): phoneme position and mode per frame

    def localization(self, C) -> LocalizationResult:
        return LocalizationResult.from_path(C, self.boundaries, self.segment_modes.astype(bool))


def best_path(fsa: SentenceFsa, scores: FrameScores) -> PathResult:
    """Viterbi over (frame, phoneme, lane).

    The first frame always starts segment 0 and carries no boundary factor.
    Ties prefer the correct lane, then the later segment start.
    """
    T, L = scores.num_frames, scores.num_phonemes
    if L != len(fsa.phonemes):
        raise ValidationError(f"scores cover {L} phonemes, acceptor has {len(fsa.phonemes)}")
    if T < L:
        raise InfeasibleError(f"cannot align {L} phonemes to {T} frames")
    emit = scores.emit.astype(np.float64, copy=True)
    log_pi = scores.log_pi.astype(np.float64, copy=True)
    if fsa.single_path:
        emit[..., MISMATCH] = -np.inf
        log_pi[:, MISMATCH] = -np.inf

    back = np.zeros((T, L, 2), dtype=np.int8)   # 0 stay, 1 + m' advance from lane m'
    score = np.full((L, 2), -np.inf)
    score[0] = emit[0, 0] + log_pi[0]
    path_cum = np.empty((T, L, 2))
    path_cum[0] = score
    for t in range(1, T):
        stay = score + scores.stay[t]
        prev_lane = np.argmax(score[:-1], axis=1)            # ties -> correct
        prev_best = score[np.arange(L - 1), prev_lane]
        adv = np.full((L, 2), -np.inf)
        adv[1:] = prev_best[:, None] + scores.advance[t] + log_pi[t][None, :]
        take = adv >= stay                                    # ties -> later boundary
        take[0] = False
        score = np.where(take, adv, stay) + emit[t]
        code = np.zeros((L, 2), dtype=np.int8)
        code[1:] = (1 + prev_lane)[:, None]
        back[t] = np.where(take, code, 0)
        path_cum[t] = score

    final_mode = int(np.argmax(score[L - 1]))
    log_score = float(score[L - 1, final_mode])
    if not np.isfinite(log_score):
        raise InfeasibleError("no finite-scoring path through the acceptor")

    lanes = np.empty((T, 2), dtype=np.int64)
    cum = np.empty(T)
    l, m = L - 1, final_mode
    starts = np.zeros(L, dtype=np.int64)
    modes = np.zeros(L, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        lanes[t] = (l, m)
        cum[t] = path_cum[t, l, m]
        code = back[t, l, m] if t > 0 else 0
        if t == 0 or code > 0:
            starts[l], modes[l] = t, m
            if t > 0:
                l, m = l - 1, int(code) - 1
    if l != 0:
        raise AssertionError("backtrack did not return to the first phoneme")
    B = starts_to_boundaries(starts, T)
    Pi = modes[segment_index(B)].astype(bool)
    return PathResult(B, Pi, modes, starts, log_score, cum, lanes)


def path_score(scores: FrameScores, starts: Sequence[int], modes: Sequence[int]) -> float:
    """Score of one explicit (segmentation, lane) assignment under the trellis weights."""
    T = scores.num_frames
    starts = list(starts)
    ends = starts[1:] + [T]
    total = 0.0
    for l, (s, e, m) in enumerate(zip(starts, ends, modes)):
        total += scores.log_pi[s, m] + scores.emit[s, l, m]
        if s > 0:
            total += scores.advance[s]
        for t in range(s + 1, e):
            total += scores.stay[t] + scores.emit[t, l, m]
    return float(total)


def dump_trellis(result: PathResult, symbols: Optional[Sequence[str]] = None, C=None) -> str:
    """Text table of the chosen path: one row per frame (t, l, mode, cumulative log score)."""
    rows = ["t\tl\tphoneme\tmode\tcum_log_score"]
    for t, ((l, m), c) in enumerate(zip(result.lanes, result.cumulative)):
        name = "-" if C is None else str(C[l] if symbols is None else symbols[C[l]])
        rows.append(f"{t}\t{l}\t{name}\t{'mismatch' if m else 'correct'}\t{c:.6f}")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# model-driven decoding

def _posteriors_for(X, model, with_correctness=True):
    batch = model.batch([X])
    return model.posteriors(batch, with_correctness=with_correctness)[0]


def align_posteriors(post, C, prior) -> np.ndarray:
    scores = frame_scores(post.log_qy, post.q_b1, prior, C, None)
    return best_path(build_single_path_fsa(C), scores).boundaries


def forced_align(X, C, model) -> np.ndarray:
    """Boundaries from the single-path acceptor (every phoneme assumed correct)."""
    return align_posteriors(_posteriors_for(X, model, False), C, model.inventory.prior)


def decode_posteriors(post, C, prior) -> PathResult:
    scores = frame_scores(post.log_qy, post.q_b1, prior, C, post.log_qpi)
    return best_path(build_sentence_fsa(C), scores)


def localize(X, C, model) -> LocalizationResult:
    """Joint boundary and mismatch decoding over the full acceptor."""
    return decode_posteriors(_posteriors_for(X, model), C, model.inventory.prior).localization(C)


def separate_from_posteriors(post, C, prior, gamma_pi: float) -> tuple[np.ndarray, np.ndarray]:
    """Boundaries from forced alignment, then one correct/mismatch decision per segment."""
    C = np.asarray(C, dtype=np.int64)
    B = align_posteriors(post, C, prior)
    scores = frame_scores(post.log_qy, post.q_b1, prior, C, None)
    modes = np.zeros(len(C), dtype=bool)
    for l, (s, e) in enumerate(boundaries_to_segments(B)):
        keep = math.log1p(-gamma_pi) + scores.emit[s:e, l, CORRECT].sum()
        flip = math.log(gamma_pi) + scores.emit[s:e, l, MISMATCH].sum()
        modes[l] = flip > keep
    return B, modes[segment_index(B)]


def separate_estimate(X, C, model) -> tuple[np.ndarray, np.ndarray]:
    post = _posteriors_for(X, model, False)
    return separate_from_posteriors(post, C, model.inventory.prior, model.priors.gamma_pi)


# ---------------------------------------------------------------------------
# baselines

def fa_localize_posteriors(post, C, prior) -> LocalizationResult:
    B = align_posteriors(post, C, prior)
    return LocalizationResult.from_path(C, B, np.zeros(len(C), dtype=bool))


def fa_localize(X, C, model) -> LocalizationResult:
    return fa_localize_posteriors(_posteriors_for(X, model, False), C, model.inventory.prior)


def collapse_repeats(seq: Sequence[int]) -> list[int]:
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(int(s))
    return out


MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


def edit_alignment(ref: Sequence[int], hyp: Sequence[int]) -> list[tuple[str, int, int]]:
    """Minimum edit-distance alignment of ``hyp`` to ``ref`` (unit costs).

    Returns ``(op, ref_index, hyp_index)`` in order; -1 marks the missing side.
    Backtrace preference: diagonal, then deletion, then insertion.
    """
    n, k = len(ref), len(hyp)
    D = np.zeros((n + 1, k + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(k + 1)
    for i in range(1, n + 1):
        for j in range(1, k + 1):
            D[i, j] = min(D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), D[i - 1, j] + 1, D[i, j - 1] + 1)
    ops = []
    i, j = n, k
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            ops.append((DEL, i - 1, -1))
            i -= 1
        else:
            ops.append((INS, -1, j - 1))
            j -= 1
    return ops[::-1]


def _repair_starts(starts: list, T: int) -> np.ndarray:
    """Make segment starts strictly increasing from 0 with every segment non-empty."""
    L = len(starts)
    s = np.array(starts, dtype=np.int64)
    s[0] = 0
    for l in range(L - 1, 0, -1):
        s[l] = min(s[l], T - (L - l))
    for l in range(1, L):
        s[l] = max(s[l], s[l - 1] + 1)
    return s


def two_pass_from_posteriors(post, C, prior) -> LocalizationResult:
    """Recognise, collapse repeats, edit-align to C, then align the recognised sequence for spans."""
    C = np.asarray(C, dtype=np.int64)
    T, L = post.log_qy.shape[0], len(C)
    recognized = collapse_repeats(np.argmax(post.log_qy, axis=1))
    if not recognized:
        return LocalizationResult.from_path(C, uniform_alignment(T, L), np.ones(L, dtype=bool))
    ops = edit_alignment(list(C), recognized)
    rec_starts = np.flatnonzero(align_posteriors(post, recognized, prior))

    mismatch = np.zeros(L, dtype=bool)
    owner = np.full(len(recognized), -1)
    last_ref = -1
    pending = []
    for op, i, j in ops:
        if op in (MATCH, SUB):
            owner[j] = i
            for p in pending:
                owner[p] = i
            pending = []
            last_ref = i
            mismatch[i] = op == SUB
        elif op == DEL:
            mismatch[i] = True
            last_ref = i
        else:
            if last_ref >= 0:
                owner[j] = last_ref
            else:
                pending.append(j)
    for p in pending:
        owner[p] = L - 1
    starts: list = [None] * L
    for j, i in enumerate(owner):
        if starts[i] is None or rec_starts[j] < starts[i]:
            starts[i] = int(rec_starts[j])
    nxt = T
    for l in range(L - 1, -1, -1):
        if starts[l] is None:
            starts[l] = nxt
        nxt = starts[l]
    B = starts_to_boundaries(_repair_starts(starts, T), T)
    return LocalizationResult.from_path(C, B, mismatch)


def two_pass_localize(X, C, model) -> LocalizationResult:
    return two_pass_from_posteriors(_posteriors_for(X, model, False), C, model.inventory.prior)
