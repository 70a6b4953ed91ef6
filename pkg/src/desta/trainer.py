"""Caption-target training: example assembly, Adam, cosine schedule, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .encoder import EncoderOutput
from .nn import Module
from .tensor import Parameter, Tensor
from .tokenizer import BOS, EOS, ByteTokenizer

log = logging.getLogger(__name__)

CAPTION_PROMPTS = ("Describe the speech.", "What can be inferred from this audio?")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, batch_id: int, value: float) -> None:
        super().__init__(f"non-finite loss {value} at step {step} (batch {batch_id})")
        self.step = step
        self.batch_id = batch_id


class FrozenParameterChanged(RuntimeError):
    pass


@dataclass
class TrainingExample:
    """One assembled sequence ``[prefix ; transcript ; prompt ; target]``.

    ``targets[p]`` is the token at sequence position ``p + 1`` and
    ``loss_mask[p]`` is True exactly where that token belongs to the target.
    """

    adapter_input: EncoderOutput | None
    transcript_tokens: list[int]
    prompt_tokens: list[int]
    target_tokens: list[int]
    prefix_len: int
    token_ids: list[int] = field(default_factory=list)
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loss_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    audio_id: str = ""

    @property
    def length(self) -> int:
        return self.prefix_len + len(self.token_ids)


def context_tokens(tokenizer: ByteTokenizer, transcript: str, prompt: str) -> tuple[list[int], list[int]]:
    """Transcript and prompt segments, each terminated by a newline.

    The transcript segment starts with BOS.
    """
    return [BOS] + tokenizer.encode(transcript + "\n"), tokenizer.encode(prompt + "\n")


def assemble_input(adapter_input: EncoderOutput | None, transcript: str, prompt: str, target: str, *,
                   tokenizer: ByteTokenizer, prefix_len: int, max_seq_len: int | None = None,
                   audio_id: str = "") -> TrainingExample:
    tr, pr = context_tokens(tokenizer, transcript, prompt)
    tg = tokenizer.encode(target) + [EOS] if target else []
    ids = tr + pr + tg
    n = prefix_len + len(ids)
    if max_seq_len is not None and n > max_seq_len:
        raise ValueError(f"assembled length {n} (prefix {prefix_len} + {len(ids)} tokens) exceeds max_seq_len {max_seq_len}")
    targets = np.zeros(n, dtype=np.int64)
    targets[prefix_len:n - 1] = ids[1:]
    mask = np.zeros(n, dtype=bool)
    if tg:
        mask[n - len(tg) - 1:n - 1] = True
    return TrainingExample(adapter_input, tr, pr, tg, prefix_len, ids, targets, mask, audio_id)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainerConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 5
    batch_size: int = 12
    warmup_steps: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_steps: int | None = None
    stop_loss: float | None = None
    overfit_one_batch: bool = False

    def __post_init__(self) -> None:
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


def cosine_lr(step: int, total_steps: int, cfg: TrainerConfig) -> float:
    """Linear warmup to ``lr_max``, then cosine annealing to ``lr_min`` at ``total_steps``."""
    w = cfg.warmup_steps
    if w and step < w:
        return cfg.lr_max * step / w
    span = total_steps - w
    if span <= 0:
        return cfg.lr_min
    frac = min(max((step - w) / span, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam over a fixed parameter list; frozen parameters are rejected."""

    def __init__(self, params: Sequence[tuple[str, Parameter]], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.params = list(params)
        for name, p in self.params:
            if p.frozen:
                raise ValueError(f"optimizer given frozen parameter {name}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{n}": a for n, a in self.m.items()}
        out.update({f"adam.v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = np.array(arrays[f"adam.m/{n}"])
            self.v[n] = np.array(arrays[f"adam.v/{n}"])
        self.t = t


def clip_grad_norm(params: Sequence[Parameter], max_norm: float | None) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = T.parameters_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def batch_loss(model, examples: Sequence[TrainingExample]) -> Tensor:
    """Token-level mean masked cross-entropy over a batch."""
    logits, targets, masks = [], [], []
    for ex in examples:
        logits.append(model.logits(ex.adapter_input, ex.token_ids))
        targets.append(ex.targets)
        masks.append(ex.loss_mask)
    joined = logits[0] if len(logits) == 1 else T.concat(logits, axis=0)
    loss, empty = T.cross_entropy_masked(joined, np.concatenate(targets), np.concatenate(masks))
    if empty:
        log.warning("batch has no target positions; loss defined as 0")
    return loss


def params_digest(named: Sequence[tuple[str, Parameter]]) -> str:
    h = hashlib.sha256()
    for name, p in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.asarray(p.data, dtype="<f8", order="C").tobytes())
    return h.hexdigest()


@dataclass
class FitResult:
    log: list[dict]
    checkpoints: list[Path]
    step: int
    epoch: int

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log]


def fit(dataset: Sequence[TrainingExample], model: Module, cfg: TrainerConfig,
        out_dir: str | Path | None = None, resume: str | Path | None = None,
        on_step: Callable[[dict], None] | None = None) -> FitResult:
    """Train the non-frozen partition of ``model`` on ``dataset``.

    Logs ``{step, lr, loss, grad_norm}`` per step (appended to
    ``out_dir/train_log.jsonl`` when ``out_dir`` is set) and writes a
    checkpoint after every epoch. Frozen parameters are hashed before training
    and after each epoch; any change raises :class:`FrozenParameterChanged`.
    """
    if not dataset:
        raise ValueError("empty training set")
    named = list(model.named_parameters())
    trainable = [(n, p) for n, p in named if not p.frozen]
    frozen = [(n, p) for n, p in named if p.frozen]
    frozen_digest = params_digest(frozen)
    opt = Adam(trainable, cfg.beta1, cfg.beta2, cfg.eps)
    params = [p for _, p in trainable]

    if cfg.overfit_one_batch:
        batches_per_epoch = 1
        epochs = 1
        total = cfg.max_steps or 500
    else:
        batches_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
        epochs = cfg.epochs
        total = batches_per_epoch * epochs
        if cfg.max_steps is not None:
            total = min(total, cfg.max_steps)

    step, start_epoch = 0, 0
    if resume is not None:
        step, start_epoch = _load_resume(resume, model, opt)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out is not None else None
    records: list[dict] = []
    checkpoints: list[Path] = []
    stop = False
    epoch = start_epoch
    for epoch in range(start_epoch, epochs):
        if cfg.overfit_one_batch:
            order = np.arange(min(cfg.batch_size, len(dataset)))
            schedule = [order] * (total - step)
        else:
            rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, epoch])
            perm = rng.permutation(len(dataset))
            schedule = [perm[i:i + cfg.batch_size] for i in range(0, len(dataset), cfg.batch_size)]
        for batch_id, idx in enumerate(schedule):
            if step >= total:
                stop = True
                break
            lr = cosine_lr(step, total, cfg)
            T.reset_tape()
            model.zero_grad()
            loss = batch_loss(model, [dataset[i] for i in idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, batch_id, value)
            if loss.requires_grad:
                T.backward(loss)
            gnorm = clip_grad_norm(params, cfg.clip_norm)
            opt.step(lr)
            rec = {"step": step, "lr": lr, "loss": value, "grad_norm": gnorm}
            records.append(rec)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            step += 1
            if cfg.stop_loss is not None and value < cfg.stop_loss:
                stop = True
                break
        T.reset_tape()
        if params_digest(frozen) != frozen_digest:
            raise FrozenParameterChanged(f"frozen parameters changed during epoch {epoch}")
        if out is not None:
            path = out / f"epoch{epoch + 1}.ckpt"
            save_training_checkpoint(path, model, opt, step, epoch + 1, cfg)
            checkpoints.append(path)
        if stop:
            break
    return FitResult(records, checkpoints, step, epoch + 1)


def save_training_checkpoint(path: str | Path, model: Module, opt: Adam, step: int, epoch: int,
                             cfg: TrainerConfig) -> None:
    trainable = [(n, p) for n, p in model.named_parameters() if not p.frozen]
    meta = {"step": step, "epoch": epoch, "adam_t": opt.t, "trainer": asdict(cfg)}
    ckpt.save_parameters(path, trainable, meta=meta, extra=opt.state_arrays())


def load_trainable(path: str | Path, model: Module) -> dict:
    """Load trainable parameters from a training checkpoint; returns its meta."""
    arrays, _, meta = ckpt.load_arrays(path)
    own = {n: p for n, p in model.named_parameters() if not p.frozen}
    missing = sorted(set(own) - set(arrays))
    if missing:
        raise KeyError(f"{path}: checkpoint lacks trainable parameters {missing[:5]}")
    for n, p in own.items():
        if p.shape != arrays[n].shape:
            raise T.ShapeError(f"{n}: checkpoint shape {arrays[n].shape} != model shape {p.shape}")
        p.data[...] = arrays[n]
    return meta


def _load_resume(path: str | Path, model: Module, opt: Adam) -> tuple[int, int]:
    meta = load_trainable(path, model)
    arrays, _, _ = ckpt.load_arrays(path)
    opt.load_state_arrays(arrays, int(meta["adam_t"]))
    return int(meta["step"]), int(meta["epoch"])


# ---------------------------------------------------------------------------
# accounting


COMPONENTS = ("layer_weights", "adapter", "projection", "lora")


def component_of(name: str) -> str:
    if ".lora." in name:
        return "lora"
    if name.startswith("adapter.layer_weights."):
        return "layer_weights"
    if name.startswith("adapter.projection."):
        return "projection"
    if name.startswith("adapter."):
        return "adapter"
    return "other"


def count_trainable_params(model: Module) -> dict[str, int]:
    """Trainable scalar counts per component plus ``total``."""
    counts = {c: 0 for c in COMPONENTS}
    for name, p in model.named_parameters():
        if p.frozen:
            continue
        c = component_of(name)
        counts[c] = counts.get(c, 0) + p.data.size
    counts["total"] = sum(v for k, v in counts.items())
    return counts
