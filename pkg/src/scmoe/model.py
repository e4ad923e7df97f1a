"""SC-MoE assembly: joint ASR + LID objective, training, parameter accounting, decoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .decoder import Decoder, DecoderOutput, decoder_forward
from .encoder import FULL_CONTEXT, ChunkSpec, Encoder, EncoderOutput, encoder_forward
from .layers import Linear, Module
from .losses import IGNORE_ID, ctc_greedy_decode, ctc_loss_batch, ctc_prefix_beam_search, cross_entropy
from .numerics import Tensor
from .routing import BLANK_EXPERT, ENCODER_EXPERTS, ENGLISH, MANDARIN, RouterSharing, StreamingMoELayer

# router columns are (MA, EN, blank); LID-CTC wants blank first
LID_CTC_ORDER = [BLANK_EXPERT, MANDARIN, ENGLISH]


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


@dataclass
class ModelConfig:
    input_dim: int = 32
    vocab_size: int = 22  # blank=0 ... sos/eos=V-1
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    conv_kernel: int = 7
    m: int = 2  # standard conformer blocks
    h: int = 2  # Switch Conformer blocks
    k: int = 1  # standard decoder layers per direction
    g: int = 1  # Switch Transformer decoder layers per direction
    router_sharing: str = "R3"
    dropout: float = 0.1
    subsampling: int = 1

    def validate(self) -> "ModelConfig":
        for name in ("m", "h", "k", "g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.m + self.h < 1:
            raise ValueError("encoder needs at least one block")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.vocab_size < 3:
            raise ValueError("vocab needs blank, at least one token and sos/eos")
        RouterSharing(self.router_sharing)
        if self.subsampling not in (1, 4):
            raise ValueError("subsampling must be 1 or 4")
        return self

    @property
    def sos(self) -> int:
        return self.vocab_size - 1

    eos = sos

    @property
    def is_baseline(self) -> bool:
        return self.h == 0 and self.g == 0

    def baseline(self) -> "ModelConfig":
        """Dense model with the same depth and activated width."""
        return replace(self, m=self.m + self.h, h=0, k=self.k + self.g, g=0)


@dataclass
class LossWeights:
    lam: float = 0.3  # CTC vs attention
    alpha: float = 0.3  # L2R vs R2L
    lid_weight: float = 1.0  # L_lid scale in the total loss
    asr_smoothing: float = 0.1
    lid_smoothing: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.alpha <= 1.0):
            raise ValueError("lam and alpha must lie in [0, 1]")


TRAIN_WEIGHTS = LossWeights(lam=0.3, alpha=0.3)
DECODE_WEIGHTS = LossWeights(lam=0.3, alpha=0.6)


class SCMoE(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        c = config
        self.config = c
        self.encoder = Encoder(c.input_dim, c.d_model, c.d_ff, c.heads, c.conv_kernel, c.m, c.h, rng,
                               c.dropout, c.subsampling, c.router_sharing)
        self.ctc = Linear(c.d_model, c.vocab_size, rng)
        self.l2r = Decoder(c.vocab_size, c.d_model, c.d_ff, c.heads, c.k, c.g, rng, c.dropout)
        self.r2l = Decoder(c.vocab_size, c.d_model, c.d_ff, c.heads, c.k, c.g, rng, c.dropout)

    def moe_layers(self) -> list[StreamingMoELayer]:
        return [m for m in self.modules() if isinstance(m, StreamingMoELayer)]


def build_model(config: ModelConfig, seed: int = 0) -> SCMoE:
    return SCMoE(config, np.random.default_rng(seed))


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    feats: np.ndarray  # [B, T, F]
    lengths: np.ndarray
    ys: list[list[int]]
    zs: list[list[int]]  # 0 = Mandarin-side, 1 = English-side, one per token

    @classmethod
    def from_utterances(cls, utts) -> "Batch":
        T = max(u.features.shape[0] for u in utts)
        F = utts[0].features.shape[1]
        feats = np.zeros((len(utts), T, F))
        for i, u in enumerate(utts):
            feats[i, : u.features.shape[0]] = u.features
        return cls(feats, np.array([u.features.shape[0] for u in utts]),
                   [list(u.tokens) for u in utts], [list(u.langs) for u in utts])


def decoder_io(seqs: list[list[int]], sos: int, reverse: bool):
    """Teacher-forcing inputs ([sos] + y, eos-padded) and targets (y + [eos], ignore-padded)."""
    seqs = [list(reversed(s)) if reverse else list(s) for s in seqs]
    U = max(len(s) for s in seqs) + 1
    ins = np.full((len(seqs), U), sos, dtype=np.int64)
    outs = np.full((len(seqs), U), IGNORE_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ins[i, 1: len(s) + 1] = s
        outs[i, : len(s)] = s
        outs[i, len(s)] = sos
    return ins, outs, np.array([len(s) + 1 for s in seqs])


def lid_targets(zs: list[list[int]], U: int, reverse: bool) -> np.ndarray:
    """Decoder position u is labelled with the language of the token it predicts; eos is ignored."""
    out = np.full((len(zs), U), IGNORE_ID, dtype=np.int64)
    for i, z in enumerate(zs):
        z = list(reversed(z)) if reverse else list(z)
        out[i, : len(z)] = z
    return out


# ---------------------------------------------------------------- losses

def combine_asr(ctc, l2r, r2l, w: LossWeights):
    return w.lam * ctc + (1.0 - w.lam) * ((1.0 - w.alpha) * l2r + w.alpha * r2l)


def combine_lid(enc_ctc, dec_l2r, dec_r2l, w: LossWeights):
    """lam * sum_i CTC_i + (1 - lam) * sum_j [(1 - alpha) CE_l2r_j + alpha CE_r2l_j]."""
    total = 0.0
    for term in enc_ctc:
        total = total + w.lam * term
    for a, b in zip(dec_l2r, dec_r2l):
        total = total + (1.0 - w.lam) * ((1.0 - w.alpha) * a + w.alpha * b)
    return total


def combine_total(asr, lid, w: LossWeights):
    return asr + w.lid_weight * lid


@dataclass
class ModelOutputs:
    enc: EncoderOutput
    ctc_log_probs: Tensor
    l2r: DecoderOutput | None
    r2l: DecoderOutput | None


def forward(model: SCMoE, batch: Batch, spec: ChunkSpec = FULL_CONTEXT, rng=None) -> ModelOutputs:
    cfg = model.config
    enc = encoder_forward(model.encoder, batch.feats, spec, batch.lengths, rng)
    ctc_lp = nx.log_softmax(model.ctc(enc.features), axis=-1)
    valid = enc.valid
    ins, _, lens = decoder_io(batch.ys, cfg.sos, reverse=False)
    l2r = decoder_forward(model.l2r, ins, enc.features, valid, lens, rng)
    ins, _, lens = decoder_io(batch.ys, cfg.sos, reverse=True)
    r2l = decoder_forward(model.r2l, ins, enc.features, valid, lens, rng)
    return ModelOutputs(enc, ctc_lp, l2r, r2l)


@dataclass
class LossReport:
    total: Tensor
    asr: Tensor
    lid: Tensor | float
    asr_ctc: Tensor
    asr_ce_l2r: Tensor
    asr_ce_r2l: Tensor
    lid_ctc: list[Tensor] = field(default_factory=list)
    lid_ce_l2r: list[Tensor] = field(default_factory=list)
    lid_ce_r2l: list[Tensor] = field(default_factory=list)

    def scalars(self) -> dict:
        val = lambda t: float(t.item()) if isinstance(t, Tensor) else float(t)
        return {
            "total": val(self.total), "asr": val(self.asr), "lid": val(self.lid),
            "asr_ctc": val(self.asr_ctc), "asr_ce_l2r": val(self.asr_ce_l2r),
            "asr_ce_r2l": val(self.asr_ce_r2l),
            "lid_ctc": [val(t) for t in self.lid_ctc],
            "lid_ce_l2r": [val(t) for t in self.lid_ce_l2r],
            "lid_ce_r2l": [val(t) for t in self.lid_ce_r2l],
        }


def asr_components(out: ModelOutputs, batch: Batch, w: LossWeights, sos: int):
    ctc = ctc_loss_batch(out.ctc_log_probs, out.enc.lengths, batch.ys).mean()
    V = out.ctc_log_probs.shape[-1]
    _, tgt, _ = decoder_io(batch.ys, sos, reverse=False)
    l2r = cross_entropy(out.l2r.logits.reshape(-1, V), tgt.reshape(-1), w.asr_smoothing)
    _, tgt, _ = decoder_io(batch.ys, sos, reverse=True)
    r2l = cross_entropy(out.r2l.logits.reshape(-1, V), tgt.reshape(-1), w.asr_smoothing)
    return ctc, l2r, r2l


def lid_components(out: ModelOutputs, batch: Batch, w: LossWeights):
    for y, z in zip(batch.ys, batch.zs):
        if len(y) != len(z):
            raise ValueError(f"language labels ({len(z)}) do not match tokens ({len(y)})")
    z_ctc = [[int(v) + 1 for v in z] for z in batch.zs]  # MA->1, EN->2, blank=0
    enc_terms = []
    for logits in out.enc.router_logits:
        lp = nx.log_softmax(logits[..., LID_CTC_ORDER], axis=-1)
        enc_terms.append(ctc_loss_batch(lp, out.enc.lengths, z_ctc).mean())
    l2r_terms, r2l_terms = [], []
    for dec, terms, rev in ((out.l2r, l2r_terms, False), (out.r2l, r2l_terms, True)):
        for logits in dec.router_logits:
            U = logits.shape[1]
            tgt = lid_targets(batch.zs, U, rev)
            terms.append(cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), w.lid_smoothing))
    return enc_terms, l2r_terms, r2l_terms


def asr_loss(out: ModelOutputs, batch: Batch, w: LossWeights, sos: int) -> Tensor:
    return combine_asr(*asr_components(out, batch, w, sos), w)


def lid_loss(out: ModelOutputs, batch: Batch, w: LossWeights):
    return combine_lid(*lid_components(out, batch, w), w)


def total_loss(model: SCMoE, batch: Batch, w: LossWeights = TRAIN_WEIGHTS, spec: ChunkSpec = FULL_CONTEXT,
               rng=None, outputs: ModelOutputs | None = None) -> LossReport:
    """L = L_asr + lid_weight * L_lid with every component exposed."""
    out = outputs if outputs is not None else forward(model, batch, spec, rng)
    ctc, l2r, r2l = asr_components(out, batch, w, model.config.sos)
    asr = combine_asr(ctc, l2r, r2l, w)
    enc_terms, l2r_terms, r2l_terms = lid_components(out, batch, w)
    lid = combine_lid(enc_terms, l2r_terms, r2l_terms, w)
    total = combine_total(asr, lid, w) if (enc_terms or l2r_terms) else asr
    return LossReport(total, asr, lid, ctc, l2r, r2l, enc_terms, l2r_terms, r2l_terms)


# ---------------------------------------------------------------- optimisation

class Adam:
    """Adam with an inverse-square-root warm-up schedule."""

    def __init__(self, params: list[Tensor], peak_lr: float = 1e-3, warmup: int = 200,
                 betas=(0.9, 0.98), eps: float = 1e-9, clip_norm: float | None = 5.0):
        self.params = params
        self.peak_lr, self.warmup = peak_lr, warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def lr(self, step: int | None = None) -> float:
        s = max(1, self.step_count if step is None else step)
        return self.peak_lr * min(s / self.warmup, math.sqrt(self.warmup / s))

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None))

    def step(self) -> tuple[float, float]:
        """Apply one update; returns (grad norm before clipping, learning rate)."""
        self.step_count += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        lr = self.lr()
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm, lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"adam.m.{i}"]
            self.v[i][...] = arrays[f"adam.v.{i}"]
        self.step_count = step_count


def train_step(model: SCMoE, batch: Batch, opt: Adam, rng: np.random.Generator,
               w: LossWeights = TRAIN_WEIGHTS, spec: ChunkSpec | None = None) -> dict:
    """One optimizer step on ``total_loss`` with a dynamic chunk drawn from ``rng`` unless ``spec`` is given."""
    from .encoder import sample_dynamic_chunk

    model.train()
    spec = sample_dynamic_chunk(rng) if spec is None else spec
    model.zero_grad()
    out = forward(model, batch, spec, rng)
    report = total_loss(model, batch, w, spec, outputs=out)
    loss = report.total.item()
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", {"step": opt.step_count + 1, **report.scalars()})
    nx.backward(report.total)
    norm = opt.grad_norm()
    if not math.isfinite(norm):
        bad = [n for n, p in model.named_parameters() if p.grad is not None and not np.isfinite(p.grad).all()]
        raise NumericError("non-finite gradient", {"step": opt.step_count + 1, "params": bad[:10]})
    norm, lr = opt.step()
    return {"step": opt.step_count, "lr": lr, "grad_norm": norm, "chunk": spec.as_list(), **report.scalars(),
            "routing": routing_utilization(out.enc)}


def routing_utilization(enc: EncoderOutput) -> list[list[float]]:
    """Per encoder sMoE slot, the fraction of valid frames sent to each expert (MA, EN, blank)."""
    valid = enc.valid
    n = max(int(valid.sum()), 1)
    return [[float(((idx == e) & valid).sum()) / n for e in range(ENCODER_EXPERTS)] for idx in enc.indices]


# ---------------------------------------------------------------- parameter accounting

@dataclass(frozen=True)
class ParamCount:
    total: int
    activated: int
    router: int


def count_parameters(model: SCMoE | Module) -> ParamCount:
    """Total parameters vs parameters touched by one frame/position under top-1 routing.

    Each MoE layer contributes a single expert to the activated count; every
    router counts in full (shared routers once).
    """
    total = model.num_parameters()
    inactive = 0
    router_ids, router = set(), 0
    for layer in (m for m in model.modules() if isinstance(m, StreamingMoELayer)):
        sizes = [e.num_parameters() for e in layer.experts]
        inactive += sum(sizes) - max(sizes)
        if id(layer.router) not in router_ids:
            router_ids.add(id(layer.router))
            router += layer.router.num_parameters()
    return ParamCount(total, total - inactive, router)


# ---------------------------------------------------------------- decoding

@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    ctc_score: float
    l2r_score: float = 0.0
    r2l_score: float = 0.0
    fused_score: float = 0.0


@dataclass
class DecodeResult:
    nbest: list[Hypothesis]
    best: Hypothesis
    enc_indices: list[np.ndarray] = field(default_factory=list)  # [T'] per encoder sMoE slot

    @property
    def tokens(self) -> list[int]:
        return list(self.best.tokens)


def fuse_scores(ctc: float, l2r: float, r2l: float, w: LossWeights = DECODE_WEIGHTS) -> float:
    return w.lam * ctc + (1.0 - w.lam) * ((1.0 - w.alpha) * l2r + w.alpha * r2l)


def ctc_decode_log_probs(model: SCMoE, features: Tensor) -> np.ndarray:
    """CTC posteriors for decoding; sos/eos is never a CTC label so its column is masked out."""
    logits = model.ctc(features).data.copy()
    logits[..., model.config.sos] = -np.inf
    return nx.log_softmax(Tensor(logits), axis=-1).data


def decoder_scores(model: SCMoE, memory: Tensor, hyps: list[tuple[int, ...]], reverse: bool) -> np.ndarray:
    """Teacher-forced log-likelihood (tokens + eos) of each hypothesis under one decoder."""
    sos = model.config.sos
    ins, tgt, lens = decoder_io([list(h) for h in hyps], sos, reverse)
    mem = Tensor(np.broadcast_to(memory.data, (len(hyps),) + memory.shape[-2:]))
    dec = model.r2l if reverse else model.l2r
    out = decoder_forward(dec, ins, mem, np.ones(mem.shape[:2], dtype=bool), lens)
    lp = nx.log_softmax(out.logits, axis=-1).data
    keep = tgt != IGNORE_ID
    picked = np.take_along_axis(lp, np.where(keep, tgt, 0)[..., None], axis=-1)[..., 0]
    return (picked * keep).sum(axis=1)


def rescore(model: SCMoE, memory: Tensor, ctc_log_probs: np.ndarray, beam: int,
            w: LossWeights = DECODE_WEIGHTS) -> tuple[list[Hypothesis], Hypothesis]:
    nbest = ctc_prefix_beam_search(ctc_log_probs, beam)
    hyps = [h for h, _ in nbest]
    l2r = decoder_scores(model, memory, hyps, reverse=False)
    r2l = decoder_scores(model, memory, hyps, reverse=True) if w.alpha > 0 else np.zeros(len(hyps))
    out = []
    for (tokens, ctc), a, b in zip(nbest, l2r, r2l):
        out.append(Hypothesis(tokens, ctc, float(a), float(b), fuse_scores(ctc, float(a), float(b), w)))
    best = max(out, key=lambda h: h.fused_score)
    return out, best


def attention_rescoring_decode(model: SCMoE, x, spec: ChunkSpec = FULL_CONTEXT, beam: int = 10,
                               w: LossWeights = DECODE_WEIGHTS) -> DecodeResult:
    """CTC prefix beam search, then rescoring with both attention decoders."""
    model.eval()
    with nx.no_grad():
        enc = encoder_forward(model.encoder, x, spec)
        lp = ctc_decode_log_probs(model, enc.features)[0]
        nbest, best = rescore(model, enc.features[0], lp, beam, w)
    return DecodeResult(nbest, best, [i[0] for i in enc.indices])


def decode_batch(model: SCMoE, utts, spec: ChunkSpec = FULL_CONTEXT, beam: int = 10,
                 w: LossWeights = DECODE_WEIGHTS, batch_size: int = 32) -> list[DecodeResult]:
    """Attention-rescoring decode of many utterances; encoder runs batched."""
    model.eval()
    results = []
    with nx.no_grad():
        for start in range(0, len(utts), batch_size):
            chunk = utts[start: start + batch_size]
            b = Batch.from_utterances(chunk)
            enc = encoder_forward(model.encoder, b.feats, spec, b.lengths)
            lp_all = ctc_decode_log_probs(model, enc.features)
            for i, n in enumerate(enc.lengths):
                mem = Tensor(enc.features.data[i, :n])
                nbest, best = rescore(model, mem, lp_all[i, :n], beam, w)
                results.append(DecodeResult(nbest, best, [idx[i, :n] for idx in enc.indices]))
    return results


class StreamingSession:
    """Chunk-by-chunk decoding state machine.

    Each ``feed`` appends one chunk of input frames, recomputes the encoder
    over the accumulated prefix under the chunk mask (earlier frames are
    unaffected by later ones), and returns the greedy CTC partial transcript.
    ``finish`` runs attention rescoring over the whole stream.
    """

    def __init__(self, model: SCMoE, spec: ChunkSpec = ChunkSpec(16, 8), beam: int = 10,
                 w: LossWeights = DECODE_WEIGHTS):
        self.model = model
        self.spec = spec
        self.beam = beam
        self.w = w
        self._frames: list[np.ndarray] = []
        self._features: np.ndarray | None = None
        self._log_probs: np.ndarray | None = None
        self._indices: list[np.ndarray] = []
        self.partials: list[list[int]] = []

    @property
    def input_chunk(self) -> int | None:
        """Input frames per chunk (encoder chunk times the subsampling rate); None = whole stream."""
        if self.spec.is_full:
            return None
        return self.spec.chunk_size * self.model.config.subsampling

    def feed(self, frames: np.ndarray) -> list[int]:
        self._frames.append(np.asarray(frames, dtype=np.float64))
        x = np.concatenate(self._frames, axis=0)
        self.model.eval()
        with nx.no_grad():
            enc = encoder_forward(self.model.encoder, x, self.spec)
            self._features = enc.features.data[0]
            self._log_probs = ctc_decode_log_probs(self.model, enc.features)[0]
            self._indices = [i[0] for i in enc.indices]
        partial = ctc_greedy_decode(self._log_probs)
        self.partials.append(partial)
        return partial

    def finish(self) -> DecodeResult:
        if self._features is None:
            raise RuntimeError("no audio was fed")
        with nx.no_grad():
            nbest, best = rescore(self.model, Tensor(self._features), self._log_probs, self.beam, self.w)
        return DecodeResult(nbest, best, self._indices)


def streaming_decode(model: SCMoE, features: np.ndarray, spec: ChunkSpec = ChunkSpec(16, 8), beam: int = 10,
                     w: LossWeights = DECODE_WEIGHTS):
    """Replay ``features`` chunk by chunk. Returns (partials, final DecodeResult).

    A trailing remainder shorter than a chunk is fed as a short last chunk.
    """
    session = StreamingSession(model, spec, beam, w)
    step = session.input_chunk or len(features)
    for start in range(0, len(features), step):
        session.feed(features[start: start + step])
    return session.partials, session.finish()


def encoder_chunked(model: SCMoE, features: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    """Encoder output assembled from chunk-incremental recomputation (consistency check helper)."""
    step = spec.chunk_size * model.config.subsampling if not spec.is_full else len(features)
    pieces, done = [], 0
    model.eval()
    with nx.no_grad():
        for end in range(step, len(features) + step, step):
            enc = encoder_forward(model.encoder, features[: min(end, len(features))], spec)
            feats = enc.features.data[0]
            pieces.append(feats[done:])
            done = feats.shape[0]
    return np.concatenate(pieces, axis=0)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
