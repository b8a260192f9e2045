"""Small trainable encoder classifier with a 3-logit sigmoid head.

A pre-norm self-attention encoder pools the position-0 hidden state into a
linear head; training uses weighted binary cross-entropy, Adam, periodic
validation and early stopping on validation micro-F1. All randomness is
seeded and training runs single-threaded by default so runs reproduce
bitwise.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, TextIO, Union

import numpy as np
import torch
from torch import nn

from .evaluation import CLASS_NAMES, NoPositives as _EvalNoPositives
from .evaluation import PredictionSet, metric_report, micro_auprc

N_CLASSES = len(CLASS_NAMES)
CHECKPOINT_MAGIC = b"EHRSEQ01"


class ModelError(Exception):
    """Base class for model failures."""


class ShapeMismatch(ModelError):
    """Batch shapes disagree with the model configuration."""


class NonPositiveWeight(ModelError):
    """Loss weights must be strictly positive."""


class NoPositives(ModelError):
    """A class has no positive training examples to weight."""


class EmptySplit(ModelError):
    """Training requires non-empty train and validation splits."""


class TrainingDiverged(ModelError):
    """Loss became non-finite during optimization."""


class CheckpointError(ModelError):
    """Corrupt or mismatched checkpoint file."""


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vocab_size < 1 or self.max_len < 2:
            raise ValueError("vocab_size >= 1 and max_len >= 2 required")

    def to_dict(self) -> dict:
        return asdict(self)


class _SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, length, self.n_heads, self.d_head)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        # exact -inf masking: padded keys receive precisely zero attention,
        # so logits cannot depend on the content of masked positions
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        context = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.out(context)


class _EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = _SelfAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.norm_attn(x), key_mask))
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


class ClassifierModel(nn.Module):
    """Token + learned positional embeddings, pre-norm encoder blocks, and a
    3-node linear head over the position-0 hidden state."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.max_len, config.d_model)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            _EncoderBlock(config.d_model, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, N_CLASSES)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ShapeMismatch(f"ids {tuple(ids.shape)} vs mask {tuple(mask.shape)}")
        if ids.shape[1] != self.config.max_len:
            raise ShapeMismatch(
                f"sequence length {ids.shape[1]} != configured {self.config.max_len}"
            )
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)
        x = self.embed_dropout(x)
        key_mask = mask.bool()
        for block in self.blocks:
            x = block(x, key_mask)
        x = self.final_norm(x)
        return self.head(x[:, 0])


def _as_tensor(array, dtype) -> torch.Tensor:
    if isinstance(array, torch.Tensor):
        return array.to(dtype)
    return torch.as_tensor(np.asarray(array)).to(dtype)


def forward(model: ClassifierModel, ids, mask) -> np.ndarray:
    """Inference-mode logits for a (B, max_len) batch, as float64 numpy."""
    model.eval()
    with torch.no_grad():
        logits = model(_as_tensor(ids, torch.long), _as_tensor(mask, torch.long))
    return logits.double().numpy()


def predict_proba(model: ClassifierModel, ids, mask) -> np.ndarray:
    """Elementwise logistic of the logits; labels stay independent (no
    cross-label normalization)."""
    logits = forward(model, ids, mask)
    return 1.0 / (1.0 + np.exp(-logits))


def weighted_bce_loss(
    logits: torch.Tensor, labels: torch.Tensor, weights
) -> torch.Tensor:
    """Mean over all B x 3 elements of the positively-weighted binary
    cross-entropy, in the numerically stable softplus form."""
    w = _as_tensor(weights, logits.dtype)
    if torch.any(w <= 0):
        raise NonPositiveWeight(f"weights must be positive, got {w.tolist()}")
    if logits.shape != labels.shape or logits.shape[-1] != N_CLASSES:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    y = labels.to(logits.dtype)
    softplus = nn.functional.softplus
    elementwise = w * y * softplus(-logits) + (1.0 - y) * softplus(logits)
    return elementwise.mean()


def compute_label_weights(labels: np.ndarray, clamp: tuple[float, float] = (1.0, 100.0)) -> np.ndarray:
    """Per-class positive weights neg/pos, clamped; raises NoPositives for a
    class with no positive training example."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    weights = np.empty(N_CLASSES, dtype=np.float64)
    for c in range(N_CLASSES):
        positives = int(labels[:, c].sum())
        if positives == 0:
            raise NoPositives(f"class {CLASS_NAMES[c]} has no positive examples")
        weights[c] = min(max((n - positives) / positives, clamp[0]), clamp[1])
    return weights


@dataclass
class SplitData:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.ids) == len(self.mask) == len(self.labels)):
            raise ValueError("split arrays disagree on length")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EncodedSplits:
    train: SplitData
    validation: SplitData
    test: Optional[SplitData] = None


@dataclass
class TrainConfig:
    lr_candidates: tuple[float, ...] = (1e-3, 2e-5, 3e-5, 4e-5, 5e-5)
    max_steps: int = 48000
    batch_size: int = 32
    early_stop_patience: int = 5
    eval_every: int = 200
    label_weights: Optional[tuple[float, float, float]] = None
    threshold: float = 0.5
    seed: int = 0
    num_threads: int = 1

    def __post_init__(self) -> None:
        if not self.lr_candidates or any(lr <= 0 for lr in self.lr_candidates):
            raise ValueError("lr_candidates must be non-empty and positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_micro_f1: float
    val_micro_auprc: float


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)
    chosen_lr: float = 0.0
    stopped_at_step: int = 0

    @property
    def best_val_micro_f1(self) -> float:
        return max((r.val_micro_f1 for r in self.records), default=0.0)

    def write_csv(self, handle: TextIO) -> None:
        handle.write("step,train_loss,val_micro_f1,val_micro_auprc\n")
        for r in self.records:
            handle.write(
                f"{r.step},{r.train_loss!r},{r.val_micro_f1!r},{r.val_micro_auprc!r}\n"
            )


def batched_predict_proba(model: ClassifierModel, split: SplitData, chunk: int = 256) -> np.ndarray:
    probs = [
        predict_proba(model, split.ids[i : i + chunk], split.mask[i : i + chunk])
        for i in range(0, len(split), chunk)
    ]
    return np.concatenate(probs, axis=0)


def _validation_metrics(
    model: ClassifierModel, split: SplitData, threshold: float
) -> tuple[float, float]:
    probs = batched_predict_proba(model, split)
    pred = PredictionSet(probs, split.labels, window_years=0, model_tag="validation")
    report = metric_report(pred, threshold)
    try:
        auprc = micro_auprc(pred)
    except _EvalNoPositives:
        auprc = 0.0
    return report.micro_f1, auprc


def train(
    model: ClassifierModel,
    splits: EncodedSplits,
    tc: TrainConfig,
    lr: float,
) -> tuple[ClassifierModel, TrainHistory]:
    """Adam mini-batch training with periodic validation and early stopping.

    Evaluates validation micro-F1/AUPRC every eval_every steps (and at the
    final step), stops after early_stop_patience evaluations without a strict
    micro-F1 improvement, and restores the best-validation parameters.
    """
    if len(splits.train) == 0 or len(splits.validation) == 0:
        raise EmptySplit("train and validation splits must be non-empty")
    torch.set_num_threads(tc.num_threads)
    torch.manual_seed(tc.seed)
    if tc.label_weights is not None:
        weights = np.asarray(tc.label_weights, dtype=np.float64)
    else:
        weights = compute_label_weights(splits.train.labels)
    ids = torch.as_tensor(splits.train.ids, dtype=torch.long)
    mask = torch.as_tensor(splits.train.mask, dtype=torch.long)
    labels = torch.as_tensor(splits.train.labels, dtype=torch.float32)
    weights_t = torch.as_tensor(weights, dtype=torch.float32)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    order_rng = np.random.default_rng([tc.seed, 7])
    history = TrainHistory(chosen_lr=lr)
    best_f1 = -math.inf
    best_state: Optional[dict] = None
    stale_evals = 0
    loss_sum, loss_n = 0.0, 0
    permutation: list[int] = []
    cursor = 0
    model.train()
    for step in range(1, tc.max_steps + 1):
        if cursor + tc.batch_size > len(permutation):
            permutation = list(order_rng.permutation(len(splits.train)))
            cursor = 0
        batch = permutation[cursor : cursor + tc.batch_size]
        cursor += tc.batch_size
        optimizer.zero_grad()
        logits = model(ids[batch], mask[batch])
        loss = weighted_bce_loss(logits, labels[batch], weights_t)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        loss.backward()
        optimizer.step()
        loss_sum += float(loss.detach())
        loss_n += 1
        if step % tc.eval_every == 0 or step == tc.max_steps:
            val_f1, val_auprc = _validation_metrics(model, splits.validation, tc.threshold)
            history.records.append(
                EvalRecord(step, loss_sum / max(loss_n, 1), val_f1, val_auprc)
            )
            loss_sum, loss_n = 0.0, 0
            if val_f1 > best_f1:
                best_f1 = val_f1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale_evals = 0
            else:
                stale_evals += 1
            history.stopped_at_step = step
            if stale_evals >= tc.early_stop_patience:
                break
            model.train()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def lr_search(
    splits: EncodedSplits,
    config: EncoderConfig,
    tc: TrainConfig,
) -> tuple[float, dict[float, TrainHistory]]:
    """Train one model per candidate learning rate and pick the one with the
    highest best-validation micro-F1; ties go to the smaller rate."""
    histories: dict[float, TrainHistory] = {}
    for lr in tc.lr_candidates:
        model = ClassifierModel(config)
        _, history = train(model, splits, tc, lr)
        histories[lr] = history
    best_lr = min(
        histories, key=lambda lr: (-histories[lr].best_val_micro_f1, lr)
    )
    return best_lr, histories


def gradient_check(
    model: ClassifierModel,
    ids,
    mask,
    labels,
    weights=(1.0, 1.0, 1.0),
    step: float = 1e-4,
) -> float:
    """Max relative discrepancy between autograd gradients and central finite
    differences of the loss, over every parameter element (float64, dropout
    off via eval mode)."""
    probe = copy.deepcopy(model).double().eval()
    ids_t = _as_tensor(ids, torch.long)
    mask_t = _as_tensor(mask, torch.long)
    labels_t = _as_tensor(labels, torch.float64)
    weights_t = _as_tensor(weights, torch.float64)

    def loss_value() -> torch.Tensor:
        return weighted_bce_loss(probe(ids_t, mask_t), labels_t, weights_t)

    loss = loss_value()
    params = [p for p in probe.parameters()]
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, grads):
            flat = param.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = loss_value().item()
                flat[i] = original - step
                minus = loss_value().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                analytic = gflat[i].item()
                rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
                worst = max(worst, rel)
    return worst


def save_checkpoint(
    model: ClassifierModel, path: Union[str, Path]
) -> str:
    """Self-describing binary checkpoint: magic, JSON header (config + param
    manifest), float32 little-endian parameter blocks, trailing SHA-256.
    Returns the hex checksum."""
    state = model.state_dict()
    manifest = [
        {"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()
    ]
    header = json.dumps(
        {"config": model.config.to_dict(), "params": manifest}, sort_keys=True
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for item in manifest:
        tensor = state[item["name"]]
        buf.write(tensor.detach().numpy().astype("<f4").tobytes())
    digest = hashlib.sha256(buf.getvalue()).digest()
    buf.write(digest)
    Path(path).write_bytes(buf.getvalue())
    return digest.hex()


def load_checkpoint(path: Union[str, Path]) -> ClassifierModel:
    """Verify and restore a checkpoint written by save_checkpoint."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an ehrseq checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    header = json.loads(body[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    config = EncoderConfig(**header["config"])
    model = ClassifierModel(config)
    state = {}
    for item in header["params"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        block = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        state[item["name"]] = torch.as_tensor(
            block.reshape(item["shape"]).copy(), dtype=torch.float32
        )
    model.load_state_dict(state)
    model.eval()
    return model
