"""Training: contrastive retriever pretraining (the cold-start fix) and the
joint loop over the full retrieval-augmented generator with scheduled index
refresh.

Pretraining objective over a batch of N (abstract, summary) pairs, with
query-encoded abstracts A and memory-encoded summaries B:

    L = sum_i -log( exp(A_i.B_i / tau) / sum_j exp(A_i.B_j / tau) )

The joint step, per record: encode the query, retrieve top-k candidates with
the record's own id excluded, re-encode them for fresh scores and token
states, encode the source, teacher-force the sequence loss, then one Adam
update under global gradient-norm clipping.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import (Tape, Tensor, backward, concat, log, matmul, pick,
                       reshape, softmax, transpose)
from .data import (ExampleRecord, TokenSequence, Vocabulary, encode_document,
                   encode_query, encode_target)
from .encoder import EncoderStack
from .errors import ConfigError, ContractError, NumericError
from .generator import GenerationExample, _example_nll
from .index import MemoryIndex, refresh, retrieve_candidates
from .layers import Parameter
from .model import ModelConfig, SummarizerModel


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 64
    warmup_steps: int = 2000
    total_steps: int = 12000
    top_k: int = 5
    refresh_interval: int = 500
    temperature: float = 0.1
    seed: int = 0
    grad_clip: float = 0.1
    precision: str = "float64"
    freeze_memory_encoder: bool = False
    allow_cold_start: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unsupported precision {self.precision!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear 0 -> lr over warmup, then linear lr -> 0 at total_steps."""
    lr, warm, total = config.learning_rate, config.warmup_steps, config.total_steps
    if warm > 0 and step < warm:
        return lr * step / warm
    if step >= total:
        return 0.0
    if total == warm:
        return lr
    return lr * (total - step) / (total - warm)


class Adam(object):
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(float(state["t"]))
        for k in self.params:
            self.m[k] = state[f"m.{k}"].copy()
            self.v[k] = state[f"v.{k}"].copy()


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.requires_grad]
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Contrastive pretraining
# ---------------------------------------------------------------------------

def _contrastive_forward(pairs: Sequence[tuple[TokenSequence, TokenSequence]],
                         query_encoder: EncoderStack, memory_encoder: EncoderStack,
                         tau: float) -> tuple[Tensor, np.ndarray]:
    n = len(pairs)
    d = query_encoder.config.d_model
    a_rows = [reshape(query_encoder.encode(a).cls_unit, (1, d)) for a, _ in pairs]
    b_rows = [reshape(memory_encoder.encode(b).cls_unit, (1, d)) for _, b in pairs]
    scores = matmul(concat(a_rows, axis=0), transpose(concat(b_rows, axis=0)))
    probs = softmax(scores * (1.0 / tau), axis=-1)
    diagonal = pick(probs, np.arange(n))
    loss = -(log(diagonal).sum())
    return loss, scores.data.copy()


def contrastive_pretrain_step(pairs: Sequence[tuple[TokenSequence, TokenSequence]],
                              query_encoder: EncoderStack,
                              memory_encoder: EncoderStack,
                              tau: float) -> Tensor:
    """Forward + backward of the in-batch contrastive loss; returns the loss.

    Gradients accumulate into both encoders; the caller owns zeroing and the
    optimizer update.
    """
    if len(pairs) < 2:
        raise ConfigError("contrastive pretraining needs a batch of at least 2 pairs")
    with Tape() as tape:
        loss, _ = _contrastive_forward(pairs, query_encoder, memory_encoder, tau)
    backward(loss, tape)
    return loss


def pretrain_retriever(records: Sequence[ExampleRecord], model: SummarizerModel,
                       vocab: Vocabulary, config: TrainConfig, steps: int,
                       learning_rate: Optional[float] = None,
                       log_path=None) -> list[dict]:
    """Run contrastive pretraining over (abstract, summary) pairs.

    Uses a constant learning rate (``learning_rate`` or the config value) and
    marks the model's retriever as pretrained on completion. Only the two
    retriever encoders receive updates.
    """
    if len(records) < 2:
        raise ConfigError("pretraining needs at least 2 records")
    max_len = model.config.max_len
    pairs = [(encode_document(r.source_abstract, vocab, max_len),
              encode_document(r.target, vocab, max_len)) for r in records]
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate if learning_rate is None else learning_rate
    named: dict[str, Parameter] = {}
    seen_ids: set[int] = set()
    for prefix, enc in (("query_encoder", model.query_encoder),
                        ("memory_encoder", model.memory_encoder)):
        for k, p in enc.named_parameters().items():
            if id(p) in seen_ids:
                continue
            seen_ids.add(id(p))
            named[f"{prefix}.{k}"] = p
    optimizer = Adam(named)
    history = []
    batch = min(config.batch_size, len(pairs))
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, steps + 1):
            chosen = rng.choice(len(pairs), size=batch, replace=False)
            sub = [pairs[i] for i in chosen]
            for p in named.values():
                p.grad[...] = 0.0
            with Tape() as tape:
                loss, scores = _contrastive_forward(sub, model.query_encoder,
                                                    model.memory_encoder,
                                                    config.temperature)
            backward(loss, tape)
            clip_grad_norm(named.values(), config.grad_clip)
            optimizer.step(lr)
            acc = float(np.mean(np.argmax(scores, axis=1) == np.arange(len(sub))))
            entry = {"step": step, "loss": float(loss.data), "accuracy": acc}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.retriever_pretrained = True
    return history


# ---------------------------------------------------------------------------
# Joint training
# ---------------------------------------------------------------------------

@dataclass
class StepStats:
    step: int
    loss: float
    lr: float
    grad_norm: float
    lambda_mean: float
    retrieval_hit_rate: float
    refreshed: bool = False


def joint_train_step(records: Sequence[ExampleRecord], model: SummarizerModel,
                     index: MemoryIndex, vocab: Vocabulary,
                     optimizer: Adam, config: TrainConfig, step: int) -> StepStats:
    """One optimizer update over ``records`` (gradients accumulate per record)."""
    if not (model.retriever_pretrained or config.allow_cold_start):
        raise ConfigError("retriever is not pretrained; set allow_cold_start to override")
    max_len = model.config.max_len
    for p in model.parameters():
        p.grad[...] = 0.0
    total_nll = 0.0
    total_tokens = 0
    lam_sum = 0.0
    hits = 0
    for rec in records:
        if not rec.target.strip():
            raise ContractError(f"record {rec.id!r} has an empty target")
        with Tape() as tape:
            query_seq = encode_query(rec, vocab, max_len)
            query_doc = model.query_encoder.encode(query_seq)
            candidates = retrieve_candidates(index, query_doc, config.top_k,
                                             model.memory_encoder,
                                             model.retrieved_encoder,
                                             exclusions={rec.id})
            source_doc = model.source_encoder.encode(query_seq)
            target_seq = encode_target(rec, vocab, max_len)
            ex = GenerationExample(target=target_seq, source_states=source_doc.hidden,
                                   candidates=candidates)
            nll, n_tok, lam_mean = _example_nll(model, ex)
            if not np.isfinite(float(nll.data)):
                raise NumericError(f"non-finite loss at step {step} on record {rec.id!r}")
            backward(nll, tape)
        total_nll += float(nll.data)
        total_tokens += n_tok
        lam_sum += lam_mean
        stale_top = min(candidates, key=lambda c: (-c.stale_score, c.doc_id))
        hits += int(stale_top.doc_id == candidates[0].doc_id)
    scale = 1.0 / total_tokens
    for p in model.parameters():
        if p.requires_grad:
            p.grad *= scale
    grad_norm = clip_grad_norm(model.parameters(), config.grad_clip)
    lr = lr_schedule(step, config)
    optimizer.step(lr)
    refreshed = False
    if (config.refresh_interval > 0 and not config.freeze_memory_encoder
            and step % config.refresh_interval == 0):
        refresh(index, model.memory_encoder)
        refreshed = True
    return StepStats(step=step, loss=total_nll / total_tokens, lr=lr,
                     grad_norm=grad_norm, lambda_mean=lam_sum / len(records),
                     retrieval_hit_rate=hits / len(records), refreshed=refreshed)


def train_joint(records: Sequence[ExampleRecord], model: SummarizerModel,
                index: MemoryIndex, vocab: Vocabulary, config: TrainConfig,
                steps: Optional[int] = None, log_path=None) -> list[StepStats]:
    """Seeded joint training loop; one JSON log line per step."""
    if config.freeze_memory_encoder:
        if model.config.tie_query_memory:
            raise ConfigError("cannot freeze the memory encoder when it is tied to the query encoder")
        model.memory_encoder.set_trainable(False)
    optimizer = Adam(model.named_parameters())
    rng = np.random.default_rng(config.seed)
    n_steps = config.total_steps if steps is None else steps
    batch = min(config.batch_size, len(records))
    stats_log: list[StepStats] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, n_steps + 1):
            chosen = rng.choice(len(records), size=batch, replace=False)
            stats = joint_train_step([records[i] for i in chosen], model, index,
                                     vocab, optimizer, config, step)
            stats_log.append(stats)
            if log_fh:
                log_fh.write(json.dumps({
                    "step": stats.step, "loss": stats.loss, "lr": stats.lr,
                    "grad_norm": stats.grad_norm, "lambda_mean": stats.lambda_mean,
                    "retrieval_hit_rate": stats.retrieval_hit_rate}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return stats_log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}
_CODE_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8"}


def write_tensor_file(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw_name = name.encode("utf-8")
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES[np.dtype(arr.dtype)]
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(_CODE_DTYPES[code]).tobytes())


def read_tensor_file(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            dtype = np.dtype(_CODE_DTYPES[code])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype).reshape(shape)
            out[name] = arr.copy()
    return out


@dataclass
class LoadedCheckpoint:
    model: SummarizerModel
    train_config: TrainConfig
    step: int
    optimizer_state: Optional[dict]
    vocab_path: str
    index_epoch: int


def save_checkpoint(ckpt_dir, model: SummarizerModel, optimizer: Optional[Adam],
                    train_config: TrainConfig, step: int, vocab_path: str = "",
                    index_epoch: int = 0) -> None:
    """Write params.bin / optim.bin / meta.json under ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_tensor_file(ckpt_dir / "params.bin",
                      {k: p.data for k, p in model.named_parameters().items()})
    if optimizer is not None:
        write_tensor_file(ckpt_dir / "optim.bin", optimizer.state_dict())
    meta = {"step": step, "train_config": asdict(train_config),
            "model_config": model.config.to_dict(), "vocab_path": str(vocab_path),
            "index_epoch": index_epoch,
            "retriever_pretrained": model.retriever_pretrained}
    with open(ckpt_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(ckpt_dir) -> LoadedCheckpoint:
    """Reconstruct the model; reload is bit-exact at the stored precision."""
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model_config = ModelConfig(**meta["model_config"])
    model = SummarizerModel(model_config, np.random.default_rng(0))
    params = read_tensor_file(ckpt_dir / "params.bin")
    named = model.named_parameters()
    if set(params) != set(named):
        missing = set(named) ^ set(params)
        raise ContractError(f"checkpoint parameter keys mismatch: {sorted(missing)[:5]}")
    for k, p in named.items():
        if params[k].shape != p.data.shape:
            raise ContractError(f"checkpoint shape mismatch for {k}")
        p.data = params[k].astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
    model.retriever_pretrained = bool(meta.get("retriever_pretrained", False))
    optim_path = ckpt_dir / "optim.bin"
    optim_state = read_tensor_file(optim_path) if optim_path.exists() else None
    return LoadedCheckpoint(model=model,
                            train_config=TrainConfig.from_dict(meta["train_config"]),
                            step=int(meta["step"]), optimizer_state=optim_state,
                            vocab_path=meta.get("vocab_path", ""),
                            index_epoch=int(meta.get("index_epoch", 0)))
