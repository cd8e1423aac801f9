"""Corpus handling, losses, AdamW with warmup+cosine, and the two training loops:
next-token pretraining of the backbone, then projector training on the frozen
backbone with a CE + distillation objective per offset.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .cmtpp import Projector, ProjectorConfig, init_projector
from .model import Backbone, ModelConfig

log = logging.getLogger(__name__)

IGNORE = -1


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class AllIgnoredWarning(UserWarning):
    pass


@dataclass
class TrainingConfig:
    seq_len: int = 256
    batch_size: int = 32
    total_steps: int = 3000
    peak_lr: float = 2.0e-4
    warmup_ratio: float = 0.05
    lambda_kd: float = 0.7
    temperature: float = 2.0
    offsets: tuple[int, ...] = (1,)
    offset_weights: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.offsets = tuple(int(k) for k in self.offsets)
        if self.offset_weights is None:
            self.offset_weights = tuple(1.0 / len(self.offsets) for _ in self.offsets) if self.offsets else ()
        else:
            self.offset_weights = tuple(float(w) for w in self.offset_weights)

    @property
    def lambda_ce(self) -> float:
        return 1.0 - self.lambda_kd

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))

    def problems(self, prefix: str = "") -> list[str]:
        errs = []
        if not 0.0 <= self.lambda_kd <= 1.0:
            errs.append(f"{prefix}lambda_kd must be in [0, 1]")
        if not self.temperature > 0:
            errs.append(f"{prefix}temperature must be > 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            errs.append(f"{prefix}warmup_ratio must be in [0, 1)")
        if self.seq_len < 2 or self.batch_size < 1 or self.total_steps < 1:
            errs.append(f"{prefix}seq_len >= 2, batch_size >= 1 and total_steps >= 1 required")
        if self.peak_lr <= 0:
            errs.append(f"{prefix}peak_lr must be > 0")
        if not self.offsets:
            errs.append(f"{prefix}offsets must be non-empty")
        if any(k < 1 for k in self.offsets):
            errs.append(f"{prefix}offsets must be >= 1")
        if len(set(self.offsets)) != len(self.offsets):
            errs.append(f"{prefix}offsets must be distinct")
        if len(self.offset_weights) != len(self.offsets):
            errs.append(f"{prefix}offset_weights must have one entry per offset")
        elif any(w < 0 for w in self.offset_weights):
            errs.append(f"{prefix}offset_weights must be >= 0")
        elif self.offsets and abs(sum(self.offset_weights) - 1.0) > 1e-9:
            errs.append(f"{prefix}offset_weights must sum to 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.weight_decay < 0:
            errs.append(f"{prefix}optimizer betas must be in [0, 1) and weight_decay >= 0")
        return errs

    def validate(self) -> "TrainingConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"] = list(self.offsets)
        d["offset_weights"] = list(self.offset_weights)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        return cls(**doc).validate()


# Backbone pretraining is not covered by the projector hyperparameter table;
# a from-scratch toy model needs a larger step size.
BACKBONE_TRAINING_DEFAULTS = dict(peak_lr=1e-3, weight_decay=0.1, lambda_kd=0.0)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


def tokenize(text: str | bytes) -> np.ndarray:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())


def detokenize_text(tokens) -> str:
    return detokenize(tokens).decode("utf-8", errors="replace")


def ingest_corpus(path, tokenizer: Callable[[bytes], np.ndarray] = tokenize) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise TrainingError(f"cannot read corpus {path}: {e}") from e
    if not data:
        raise TrainingError(f"corpus {path} is empty")
    tokens = tokenizer(data)
    log.info("corpus %s: %d tokens", path, len(tokens))
    return tokens


def split_corpus(tokens: np.ndarray, holdout_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Train on the head of the stream, hold out the tail."""
    cut = int(round(len(tokens) * (1.0 - holdout_fraction)))
    return tokens[:cut], tokens[cut:]


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    starts = rng.integers(0, len(tokens) - seq_len + 1, size=batch_size)
    return np.stack([tokens[s : s + seq_len] for s in starts])


def mtp_targets(tokens: np.ndarray, k: int) -> np.ndarray:
    """Position ``i`` targets ``tokens[i + 1 + k]``; out-of-range positions get IGNORE.
    ``k = 0`` is plain next-token prediction. Works along the last axis."""
    if k < 0:
        raise ValueError(f"offset k must be >= 0, got {k}")
    tokens = np.asarray(tokens)
    out = np.full(tokens.shape, IGNORE, dtype=np.int64)
    shift = 1 + k
    if shift < tokens.shape[-1]:
        out[..., : tokens.shape[-1] - shift] = tokens[..., shift:]
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def ce_loss(student_logps: np.ndarray, targets: np.ndarray) -> float:
    """Mean of ``-logp[target]`` over non-ignored positions (0.0 if none)."""
    targets = np.asarray(targets)
    valid = targets != IGNORE
    if not valid.any():
        warnings.warn("every position is ignored; CE defined as 0", AllIgnoredWarning, stacklevel=2)
        return 0.0
    lp = student_logps[valid]
    return float(-lp[np.arange(len(lp)), targets[valid]].mean())


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, T: float = 2.0, valid=None) -> float:
    """``T**2 * KL(softmax(t/T) || softmax(s/T))`` averaged over valid rows.

    The teacher is treated as a constant.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"teacher {teacher_logits.shape} and student {student_logits.shape} differ")
    if T <= 0:
        raise ValueError("temperature must be positive")
    t2 = teacher_logits.reshape(-1, teacher_logits.shape[-1])
    s2 = student_logits.reshape(-1, student_logits.shape[-1])
    if valid is not None:
        valid = np.asarray(valid).reshape(-1)
        t2, s2 = t2[valid], s2[valid]
    if len(t2) == 0:
        return 0.0
    lpt = nx.log_softmax(t2 / T)
    lps = nx.log_softmax(s2 / T)
    kl = (np.exp(lpt) * (lpt - lps)).sum(axis=-1)
    return float(T * T * kl.mean())


@dataclass
class LossBreakdown:
    total: float
    ce: dict[int, float]
    kd: dict[int, float]
    grads: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def projector_loss(
    tokens: np.ndarray,
    backbone: Backbone,
    projector: Projector,
    cfg: TrainingConfig,
    *,
    with_grad: bool = True,
    cached: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossBreakdown:
    """Weighted CE + KD over offsets for a token batch of shape (B, T).

    Student row ``i`` for offset ``k`` reads hidden ``i`` and predicts token
    ``i+1+k``; its teacher is the next-token distribution at row ``i+k``.
    ``cached`` may supply the frozen ``(hidden, logits)`` for ``tokens``.
    """
    tokens = np.atleast_2d(tokens)
    bad = [k for k in cfg.offsets if k > projector.config.max_offset]
    if bad:
        raise ConfigError([f"offset {k} exceeds projector max_offset {projector.config.max_offset}" for k in bad])
    hidden, logits = cached if cached is not None else backbone.forward(tokens)
    W = backbone.params["lm_head"]
    T_len = tokens.shape[1]
    temp = cfg.temperature
    ce, kd = {}, {}
    total = 0.0
    grads = {name: np.zeros_like(a) for name, a in projector.params.items()} if with_grad else {}
    for k, lam in zip(cfg.offsets, cfg.offset_weights):
        n_rows = T_len - 1 - k
        if n_rows <= 0:
            ce[k], kd[k] = 0.0, 0.0
            continue
        h = hidden[:, :n_rows]
        teacher = logits[:, k : k + n_rows]
        target = tokens[:, 1 + k :]
        out, saved = projector.forward(h, k, keep=True)
        student = out @ W
        lps = nx.log_softmax(student)
        n = target.size
        flat_t = target.reshape(-1)
        lps2 = lps.reshape(n, -1)
        ce[k] = float(-lps2[np.arange(n), flat_t].mean())
        lpt_T = nx.log_softmax(teacher / temp).reshape(n, -1)
        lps_T = nx.log_softmax(student / temp).reshape(n, -1)
        pt_T = np.exp(lpt_T)
        kd[k] = float(temp * temp * (pt_T * (lpt_T - lps_T)).sum(axis=-1).mean())
        total += lam * (cfg.lambda_ce * ce[k] + cfg.lambda_kd * kd[k])
        if with_grad and lam > 0:
            g_ce = np.exp(lps2)
            g_ce[np.arange(n), flat_t] -= 1.0
            g_kd = temp * (np.exp(lps_T) - pt_T)
            g_student = (lam / n) * (cfg.lambda_ce * g_ce + cfg.lambda_kd * g_kd)
            g_out = g_student @ W.T
            for name, g in projector.backward(g_out, saved).items():
                grads[name] += g
    return LossBreakdown(total=total, ce=ce, kd=kd, grads=grads)


def total_loss(batch, backbone: Backbone, projector: Projector, cfg: TrainingConfig) -> LossBreakdown:
    return projector_loss(batch, backbone, projector, cfg, with_grad=True)


def backbone_loss(tokens: np.ndarray, backbone: Backbone, *, with_grad: bool = True) -> tuple[float, dict]:
    """Next-token CE over a (B, T) batch and its parameter gradients."""
    tokens = np.atleast_2d(tokens)
    if with_grad:
        _, logits, saved = backbone.forward(tokens, keep=True)
    else:
        _, logits = backbone.forward(tokens)
    lp = nx.log_softmax(logits[:, :-1])
    target = tokens[:, 1:]
    B, T1, V = lp.shape
    n = B * T1
    lp2 = lp.reshape(n, V)
    flat = target.reshape(-1)
    loss = float(-lp2[np.arange(n), flat].mean())
    if not with_grad:
        return loss, {}
    g = np.exp(lp2)
    g[np.arange(n), flat] -= 1.0
    g_logits = np.zeros_like(logits)
    g_logits[:, :-1] = (g / n).reshape(B, T1, V)
    return loss, backbone.backward(g_logits, saved)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at ``total_steps``."""
    warm = cfg.warmup_steps
    if warm > 0 and step < warm:
        return cfg.peak_lr * step / warm
    span = max(cfg.total_steps - warm, 1)
    progress = min(max((step - warm) / span, 0.0), 1.0)
    return max(cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)), 0.0)


class AdamW:
    """Decoupled weight decay Adam over a dict of arrays, updated in place.
    Decay applies to matrices only."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.ndim >= 2:
                p *= 1.0 - lr * self.wd
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class LossLog:
    """Per-step CSV loss log; the file is flushed every row."""

    def __init__(self, path, columns: list[str]):
        self.rows: list[dict] = []
        self.columns = columns
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=columns)
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _check_corpus(tokens: np.ndarray, cfg: TrainingConfig) -> None:
    need = 10 * cfg.batch_size * cfg.seq_len
    if len(tokens) < need:
        raise TrainingError(f"corpus has {len(tokens)} tokens; need at least {need} (10 x batch x seq_len)")


def train_backbone(
    tokens: np.ndarray,
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
    *,
    log_path=None,
    log_every: int = 50,
    backbone: Backbone | None = None,
) -> tuple[Backbone, LossLog]:
    cfg.validate()
    _check_corpus(tokens, cfg)
    if cfg.seq_len > model_cfg.max_seq_len:
        raise ConfigError([f"seq_len {cfg.seq_len} exceeds max_seq_len {model_cfg.max_seq_len}"])
    model = backbone if backbone is not None else Backbone.init(model_cfg)
    opt = AdamW(model.params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    losslog = LossLog(log_path, ["step", "lr", "total", "ce_0", "grad_norm", "seconds"])
    t0 = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            batch = sample_batch(tokens, cfg.batch_size, cfg.seq_len, rng)
            try:
                loss, grads = backbone_loss(batch, model)
            except nx.NumericsError as e:
                raise TrainingError(f"non-finite backbone loss at step {step}: {e}") from e
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite backbone loss at step {step}")
            gnorm = clip_grads(grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            opt.step(grads, lr)
            losslog.write(dict(step=step, lr=lr, total=loss, ce_0=loss, grad_norm=gnorm,
                               seconds=round(time.perf_counter() - t0, 3)))
            if log_every and step % log_every == 0:
                log.info("backbone step %d lr %.3g loss %.4f", step, lr, loss)
    finally:
        losslog.close()
    return model, losslog


def train_projector(
    tokens: np.ndarray,
    backbone: Backbone,
    proj_cfg: ProjectorConfig,
    cfg: TrainingConfig,
    *,
    log_path=None,
    log_every: int = 50,
    projector: Projector | None = None,
) -> tuple[Projector, LossLog]:
    """Optimize only the projector; backbone arrays are read, never written."""
    cfg.validate()
    _check_corpus(tokens, cfg)
    if proj_cfg.d_model != backbone.config.d_model:
        raise ConfigError([f"projector d_model {proj_cfg.d_model} != backbone d_model {backbone.config.d_model}"])
    if max(cfg.offsets) > proj_cfg.max_offset:
        raise ConfigError([f"offsets {cfg.offsets} exceed projector max_offset {proj_cfg.max_offset}"])
    proj = projector if projector is not None else init_projector(proj_cfg)
    opt = AdamW(proj.params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    cols = ["step", "lr", "total"] + [f"ce_{k}" for k in cfg.offsets] + [f"kd_{k}" for k in cfg.offsets]
    losslog = LossLog(log_path, cols + ["grad_norm", "seconds"])
    t0 = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            batch = sample_batch(tokens, cfg.batch_size, cfg.seq_len, rng)
            try:
                res = projector_loss(batch, backbone, proj, cfg)
            except nx.NumericsError as e:
                raise TrainingError(f"non-finite projector loss at step {step}: {e}") from e
            if not math.isfinite(res.total):
                raise TrainingError(f"non-finite projector loss at step {step}")
            gnorm = clip_grads(res.grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            opt.step(res.grads, lr)
            row = dict(step=step, lr=lr, total=res.total)
            row.update({f"ce_{k}": v for k, v in res.ce.items()})
            row.update({f"kd_{k}": v for k, v in res.kd.items()})
            row.update(grad_norm=gnorm, seconds=round(time.perf_counter() - t0, 3))
            losslog.write(row)
            if log_every and step % log_every == 0:
                log.info("projector step %d lr %.3g loss %.4f", step, lr, res.total)
    finally:
        losslog.close()
    return proj, losslog
