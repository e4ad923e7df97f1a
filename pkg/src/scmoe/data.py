"""Synthetic code-switching corpus, language labels and error-rate metrics.

Two artificial languages ("A" stands in for Mandarin, "B" for English) each
own K tokens. Every token has a prototype feature vector; an utterance is a
token sequence whose frames are noisy copies of the prototypes. At
confusability 0 the two languages occupy disjoint halves of feature space;
raising it mixes in a component shared by token k of both languages.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MA, EN = 0, 1
LANG_NAMES = {MA: "MA", EN: "EN"}


@dataclass
class SynthLanguageSpec:
    vocab_per_language: int = 10
    feature_dim: int = 32
    min_frames: int = 2
    max_frames: int = 4
    confusability: float = 0.3
    noise: float = 0.3
    min_tokens: int = 4
    max_tokens: int = 12

    def validate(self) -> "SynthLanguageSpec":
        if self.vocab_per_language < 2:
            raise ValueError("need at least 2 tokens per language")
        if not 0.0 <= self.confusability <= 1.0:
            raise ValueError("confusability must lie in [0, 1]")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ValueError("feature_dim must be even and >= 2")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("bad frames-per-token range")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("bad utterance length range")
        return self

    @property
    def vocab_size(self) -> int:
        """Joint ASR vocabulary: blank, A tokens, B tokens, sos/eos."""
        return 2 * self.vocab_per_language + 2


@dataclass
class VocabMap:
    K: int

    def language(self, token: int) -> int:
        if 1 <= token <= self.K:
            return MA
        if self.K < token <= 2 * self.K:
            return EN
        raise KeyError(f"token {token} belongs to no language")

    def token(self, lang: int, k: int) -> int:
        return 1 + k + lang * self.K


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, F]
    tokens: list[int]
    langs: list[int]  # one language label per token
    frames_per_token: list[int] = field(default_factory=list)

    @property
    def frame_langs(self) -> np.ndarray:
        """Per-frame language from the generation alignment."""
        return np.repeat(np.array(self.langs, dtype=np.int64), self.frames_per_token)

    def to_json(self) -> dict:
        return {"id": self.id, "features": self.features.tolist(), "tokens": self.tokens,
                "langs": self.langs, "frames_per_token": self.frames_per_token}

    @classmethod
    def from_json(cls, d: dict) -> "Utterance":
        return cls(d["id"], np.asarray(d["features"], dtype=np.float64), list(d["tokens"]), list(d["langs"]),
                   list(d.get("frames_per_token", [])))


@dataclass
class Corpus:
    spec: SynthLanguageSpec
    switch_prob: float
    seed: int
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    @property
    def vocab(self) -> VocabMap:
        return VocabMap(self.spec.vocab_per_language)

    def split(self, name: str) -> list[Utterance]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]

    def find(self, utt_id: str) -> Utterance:
        for utts in (self.train, self.dev, self.test):
            for u in utts:
                if u.id == utt_id:
                    return u
        raise KeyError(utt_id)


def make_prototypes(spec: SynthLanguageSpec, seed: int) -> np.ndarray:
    """[2, K, F] prototypes: (1 - c) * language-own part + c * part shared by token k of both languages."""
    rng = np.random.default_rng([seed, 0xC0DE])
    K, F = spec.vocab_per_language, spec.feature_dim
    half = F // 2
    own = np.zeros((2, K, F))
    own[MA, :, :half] = np.abs(rng.standard_normal((K, half)))
    own[EN, :, half:] = np.abs(rng.standard_normal((K, half)))
    shared = rng.standard_normal((K, F))
    c = spec.confusability
    return (1.0 - c) * own + c * shared[None]


def _utterance(rng, spec: SynthLanguageSpec, protos: np.ndarray, switch_prob: float, uid: str) -> Utterance:
    K = spec.vocab_per_language
    vocab = VocabMap(K)
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    lang = int(rng.integers(0, 2))
    tokens, langs, frames, feats = [], [], [], []
    prev_k = None
    for i in range(n):
        if i > 0 and rng.random() < switch_prob:
            lang = 1 - lang
            prev_k = None
        # no immediate repeat of the same token: frames carry no boundary cue
        k = int(rng.integers(0, K - 1 if prev_k is not None else K))
        if prev_k is not None and k >= prev_k:
            k += 1
        prev_k = k
        d = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        tokens.append(vocab.token(lang, k))
        langs.append(lang)
        frames.append(d)
        feats.append(protos[lang, k] + spec.noise * rng.standard_normal((d, spec.feature_dim)))
    return Utterance(uid, np.concatenate(feats, axis=0), tokens, langs, frames)


SPLITS = ("train", "dev", "test")


def generate_corpus(spec: SynthLanguageSpec, n_train: int, n_dev: int, n_test: int, switch_prob: float,
                    seed: int) -> Corpus:
    """Deterministic corpus; each split draws from its own child seed so splits never share a stream.

    Token languages follow a two-state Markov chain switching with probability
    ``switch_prob`` between consecutive tokens.
    """
    spec.validate()
    if not 0.0 <= switch_prob <= 1.0:
        raise ValueError("switch_prob must lie in [0, 1]")
    protos = make_prototypes(spec, seed)
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    out = {}
    for name, n, ss in zip(SPLITS, (n_train, n_dev, n_test), streams):
        rng = np.random.default_rng(ss)
        out[name] = [_utterance(rng, spec, protos, switch_prob, f"{name}-{i:05d}") for i in range(n)]
    return Corpus(spec, switch_prob, seed, out["train"], out["dev"], out["test"])


def language_labels(tokens: Sequence[int], vocab: VocabMap) -> list[int]:
    """One language label per token (runs are not collapsed)."""
    return [vocab.language(int(t)) for t in tokens]


def switch_rate(utts: Sequence[Utterance]) -> float:
    pairs = switches = 0
    for u in utts:
        for a, b in zip(u.langs, u.langs[1:]):
            pairs += 1
            switches += a != b
    return switches / pairs if pairs else 0.0


# ---------------------------------------------------------------- files

def write_corpus(corpus: Corpus, out_dir: str | Path) -> dict:
    """One JSON object per line per split plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "scmoe-corpus/1", "spec": asdict(corpus.spec), "switch_prob": corpus.switch_prob,
                "seed": corpus.seed, "splits": {}}
    for name in SPLITS:
        path = out / f"{name}.jsonl"
        with open(path, "w") as f:
            for u in corpus.split(name):
                f.write(json.dumps(u.to_json(), separators=(",", ":")) + "\n")
        manifest["splits"][name] = {"file": path.name, "count": len(corpus.split(name)),
                                    "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_corpus(path: str | Path) -> Corpus:
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    splits = {}
    for name in SPLITS:
        with open(root / manifest["splits"][name]["file"]) as f:
            splits[name] = [Utterance.from_json(json.loads(line)) for line in f if line.strip()]
    return Corpus(SynthLanguageSpec(**manifest["spec"]), manifest["switch_prob"], manifest["seed"],
                  splits["train"], splits["dev"], splits["test"])


# ---------------------------------------------------------------- metrics

def edit_ops(ref: Sequence[int], hyp: Sequence[int]) -> list[tuple[str, int | None, int | None]]:
    """Levenshtein alignment as (op, ref token, hyp token); op in {ok, sub, del, ins}."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("ok" if ref[i - 1] == hyp[j - 1] else "sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("del", ref[i - 1], None))
            i -= 1
        else:
            ops.append(("ins", None, hyp[j - 1]))
            j -= 1
    return ops[::-1]


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    return sum(op != "ok" for op, _, _ in edit_ops(ref, hyp))


def compute_metrics(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]], vocab: VocabMap,
                    routing: Sequence[np.ndarray] | None = None,
                    frame_langs: Sequence[np.ndarray] | None = None) -> dict:
    """Per-language token error rates, MER and (optionally) router LID frame accuracy.

    Substitutions and deletions count against the reference token's language,
    insertions against the hypothesis token's language. ``routing[i]`` holds
    selected encoder experts (any leading layer axes, frames last) for
    utterance i; frames routed to the blank expert are left out.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    errors = {MA: 0, EN: 0}
    ref_count = {MA: 0, EN: 0}
    total_err = total_ref = 0
    exact = 0
    for ref, hyp in zip(refs, hyps):
        for t in ref:
            ref_count[vocab.language(t)] += 1
        n_err = 0
        for op, r, h in edit_ops(list(ref), list(hyp)):
            if op == "ok":
                continue
            n_err += 1
            lang = vocab.language(h) if op == "ins" else vocab.language(r)
            errors[lang] += 1
        total_err += n_err
        total_ref += len(ref)
        exact += n_err == 0
    rate = lambda e, n: e / n if n else 0.0
    report = {
        "utterances": len(refs),
        "ref_tokens": total_ref,
        "errors": total_err,
        "man": rate(errors[MA], ref_count[MA]),
        "eng": rate(errors[EN], ref_count[EN]),
        "mixed": rate(total_err, total_ref),
        "sentence_accuracy": rate(exact, len(refs)),
    }
    if routing is not None and frame_langs is not None:
        report.update(lid_frame_accuracy(routing, frame_langs))
    return report


def lid_frame_accuracy(routing: Sequence[np.ndarray], frame_langs: Sequence[np.ndarray],
                       blank_expert: int = 2) -> dict:
    correct = counted = blank = 0
    for idx, langs in zip(routing, frame_langs):
        idx = np.asarray(idx)
        langs = np.broadcast_to(np.asarray(langs), idx.shape)
        keep = idx != blank_expert
        blank += int((~keep).sum())
        counted += int(keep.sum())
        correct += int((idx[keep] == langs[keep]).sum())
    return {"lid_frame_accuracy": correct / counted if counted else 0.0,
            "lid_frames_counted": counted, "lid_frames_blank": blank}
