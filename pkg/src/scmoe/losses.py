"""CTC loss/decoders and label-smoothed cross-entropy.

Index 0 is the CTC blank in every alphabet (ASR vocabulary and LID classes).
"""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from .numerics import Tensor, custom_op, log_softmax, as_tensor

BLANK = 0
IGNORE_ID = -1
NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The target needs more frames than the input provides."""

    def __init__(self, n_frames: int, target_len: int, repeats: int):
        self.n_frames, self.target_len, self.repeats = n_frames, target_len, repeats
        super().__init__(
            f"CTC target infeasible: {target_len} labels with {repeats} adjacent repeats "
            f"need >= {target_len + repeats} frames, got {n_frames}")


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended(targets: Sequence[Sequence[int]]):
    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = np.full((len(targets), S), BLANK, dtype=np.int64)
    for b, t in enumerate(targets):
        ext[b, 1:2 * len(t):2] = t
    skip = np.zeros(ext.shape, dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    return ext, skip


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance CTC negative log-likelihood.

    log_probs: [B, T, V] frame log-posteriors (rows beyond ``lengths[b]`` are
    padding); returns a [B] tensor. The gradient comes from the usual
    alpha-beta recursion rather than from unrolling the DP in the graph.
    """
    lp = log_probs.data
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = [list(map(int, t)) for t in targets]
    if len(targets) != B or len(lengths) != B:
        raise ValueError(f"batch mismatch: {B} grids, {len(targets)} targets, {len(lengths)} lengths")
    for b, t in enumerate(targets):
        if any(k <= BLANK or k >= V for k in t):
            raise ValueError(f"target {b} has labels outside [1, {V - 1}]: {t}")
        need = min_frames(t)
        if lengths[b] < need or lengths[b] > T or lengths[b] < 1:
            raise CTCInfeasibleError(int(lengths[b]), len(t), need - len(t))

    ext, skip = _extended(targets)
    S = ext.shape[1]
    tl = np.array([len(t) for t in targets])
    s_len = 2 * tl + 1
    valid_s = np.arange(S)[None, :] < s_len[:, None]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    has1 = tl > 0
    if S > 1:
        alpha[has1, 0, 1] = emit[has1, 0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[:, t - 1]
            a = prev.copy()
            a[:, 1:] = np.logaddexp(a[:, 1:], prev[:, :-1])
            a[:, 2:] = np.where(skip[:, 2:], np.logaddexp(a[:, 2:], prev[:, :-2]), a[:, 2:])
            a = np.where(valid_s, a + emit[:, t], NEG_INF)
            live = (t < lengths)[:, None]
            alpha[:, t] = np.where(live, a, prev)

    last = alpha[np.arange(B), lengths - 1]
    end1 = last[np.arange(B), s_len - 1]
    end2 = np.where(has1, last[np.arange(B), np.maximum(s_len - 2, 0)], NEG_INF)
    logz = np.logaddexp(end1, end2)

    def backward(g):
        beta = np.full((B, T, S), NEG_INF)
        init = np.full((B, S), NEG_INF)
        rows = np.arange(B)
        init[rows, s_len - 1] = emit[rows, lengths - 1, s_len - 1]
        init[has1, s_len[has1] - 2] = emit[has1, lengths[has1] - 1, s_len[has1] - 2]
        nxt = np.full((B, S), NEG_INF)
        with np.errstate(invalid="ignore"):
            for t in range(T - 1, -1, -1):
                b_ = nxt.copy()
                b_[:, :-1] = np.logaddexp(b_[:, :-1], nxt[:, 1:])
                b_[:, :-2] = np.where(skip[:, 2:], np.logaddexp(b_[:, :-2], nxt[:, 2:]), b_[:, :-2])
                b_ = np.where(valid_s, b_ + emit[:, t], NEG_INF)
                cur = np.where((t == lengths - 1)[:, None], init,
                               np.where((t < lengths - 1)[:, None], b_, NEG_INF))
                beta[:, t] = cur
                nxt = cur
            occ = np.exp(alpha + beta - emit - logz[:, None, None])
        occ = np.where(np.isfinite(occ), occ, 0.0)
        live = np.arange(T)[None, :] < lengths[:, None]
        occ = occ * live[:, :, None]
        grad = np.zeros((B, T, V))
        for b in range(B):
            np.add.at(grad[b], (slice(None), ext[b]), occ[b])
        return (-grad * g[:, None, None],)

    return custom_op(-logz, (log_probs,), backward)


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """CTC loss of one utterance; ``log_probs`` is [T, V] and log-softmax normalized."""
    T = log_probs.shape[0]
    out = ctc_loss_batch(log_probs.reshape(1, T, log_probs.shape[1]), [T], [target])
    return out.reshape(())


def ctc_greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def ctc_prefix_beam_search(log_probs, beam: int) -> list[tuple[tuple[int, ...], float]]:
    """CTC prefix beam search.

    Tracks, for every prefix, the log-probability of paths ending in blank and
    in a non-blank. Returns up to ``beam`` (prefix, total log-prob) pairs sorted
    by descending score; the empty prefix is included when it survives.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    T, V = lp.shape
    hyps: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    n_tok = min(beam, V)
    for t in range(T):
        frame = lp[t]
        tokens = np.argsort(-frame, kind="stable")[:n_tok]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in hyps.items():
            for s in tokens:
                s = int(s)
                p = frame[s]
                if s == BLANK:
                    e = nxt[prefix]
                    e[0] = np.logaddexp(e[0], np.logaddexp(pb, pnb) + p)
                elif prefix and s == prefix[-1]:
                    # repeat collapses unless separated by a blank
                    e = nxt[prefix]
                    e[1] = np.logaddexp(e[1], pnb + p)
                    e = nxt[prefix + (s,)]
                    e[1] = np.logaddexp(e[1], pb + p)
                else:
                    e = nxt[prefix + (s,)]
                    e[1] = np.logaddexp(e[1], np.logaddexp(pb, pnb) + p)
        # prefixes reachable only through zero-probability paths are dropped
        ranked = sorted(((k, v) for k, v in nxt.items() if np.logaddexp(*v) > NEG_INF),
                        key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        hyps = {k: (v[0], v[1]) for k, v in ranked[:beam]}
    result = [(k, float(np.logaddexp(*v))) for k, v in hyps.items()]
    result.sort(key=lambda kv: (-kv[1], kv[0]))
    return result


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean label-smoothed NLL over non-ignored rows of [N, C] logits.

    The target distribution is (1 - eps) on the label plus eps / C on every class.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    C = logits.shape[-1]
    flat = logits.reshape(-1, C)
    if len(targets) != flat.shape[0]:
        raise ValueError(f"{flat.shape[0]} logit rows but {len(targets)} targets")
    keep = targets != ignore_id
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored")
    bad = targets[keep]
    if (bad < 0).any() or (bad >= C).any():
        raise ValueError(f"targets outside [0, {C}) and != ignore_id")
    rows = np.nonzero(keep)[0]
    logp = log_softmax(flat[rows], axis=-1)
    q = np.full((len(rows), C), smoothing / C)
    q[np.arange(len(rows)), targets[rows]] += 1.0 - smoothing
    return -(logp * q).sum() * (1.0 / len(rows))
