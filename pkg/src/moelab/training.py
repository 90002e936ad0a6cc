"""Training loop: Adam with warmup + inverse-square-root decay, per-step
metrics, and bitwise-reproducible binary checkpoints.

Batch t is a pure function of (seed, t), parameters and optimizer state are
float64 end to end, and metric rows are written with full-precision float
repr, so a run resumed from any checkpoint replays the original run
bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, NumericError
from .model import (
    BatchMeta,
    ModelConfig,
    ModelParams,
    init_params,
    model_forward,
    params_from_tensors,
    token_prediction_accuracy,
    total_loss,
)
from .data import DataPipeline
from .tensor import Tape

METRICS_HEADER = "step,loss_ce,loss_b,loss_zr,loss_zl,acc,drop_frac,lr"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    steps: int
    peak_lr: float = 0.01
    warmup_steps: int | None = None  # default: max(10, 2% of steps)
    checkpoint_every: int | None = None
    seed: int = 0
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.warmup_steps is not None and not 0 < self.warmup_steps < self.steps:
            raise ConfigError("warmup_steps must satisfy 0 < warmup < steps")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(10, self.steps // 50)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    warmup = cfg.warmup
    if step < warmup:
        return cfg.peak_lr * step / warmup
    return float(cfg.peak_lr * np.sqrt(warmup / step))


def clear_grads(params: ModelParams) -> None:
    """Drop gradients left by a previous backward pass.

    A parameter untouched by the current tape (an expert that received no
    tokens, say) would otherwise carry its stale gradient into the next
    optimizer step."""
    for _, tensor in params.named():
        tensor.grad = None


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over named parameters; state arrays are checkpointable."""

    def __init__(self, names: Iterable[str], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.names = list(names)

    def step(
        self,
        params: ModelParams,
        grads: dict[str, np.ndarray],
        lr: float,
        t: int,
    ) -> None:
        """One update with bias correction at timestep t (1-based).

        Gradients are first clipped to the configured global norm. Missing
        gradients count as zero.
        """
        named = dict(params.named())
        full = {
            name: grads.get(name, np.zeros_like(named[name].data)) for name in self.names
        }
        norm_sq = 0.0
        for g in full.values():
            norm_sq += float((g * g).sum())
        norm = np.sqrt(norm_sq)
        scale = 1.0
        if self.cfg.grad_clip > 0 and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm

        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        for name in self.names:
            g = full[name] * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**t)
            v_hat = self.v[name] / (1 - b2**t)
            named[name].data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.names:
            if name in self.m:
                out[f"m.{name}"] = self.m[name]
                out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for key, value in tensors.items():
            kind, _, name = key.partition(".")
            if kind == "m":
                self.m[name] = value.astype(np.float64).copy()
            elif kind == "v":
                self.v[name] = value.astype(np.float64).copy()


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "OMOE" | u32 version | u64 step | u32 json_len | config json
#   u32 n_tensors | tensors    | u32 n_opt_tensors | tensors
#
# each tensor: u16 name_len | name utf-8 | u8 dtype (0=f64, 1=i64) |
#              u8 ndim | u64 dims... | little-endian payload

CHECKPOINT_MAGIC = b"OMOE"
CHECKPOINT_VERSION = 1
_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


@dataclass
class Checkpoint:
    step: int
    config: dict
    tensors: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]


def _write_tensor_block(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        code = _DTYPE_CODES.get(value.dtype)
        if code is None:
            raise ConfigError(f"checkpoint tensor {name!r} has unsupported dtype {value.dtype}")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", code, value.ndim))
        fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        fh.write(np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ConfigError("checkpoint file is truncated")
    return data


def _read_tensor_block(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
        if code not in _DTYPES:
            raise ConfigError(f"checkpoint tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = _read_exact(fh, size * 8)
        out[name] = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    config_blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, ckpt.step))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        _write_tensor_block(fh, ckpt.tensors)
        _write_tensor_block(fh, ckpt.opt_state)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, step = struct.unpack("<IQ", _read_exact(fh, 12))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, json_len).decode("utf-8"))
        tensors = _read_tensor_block(fh)
        opt_state = _read_tensor_block(fh)
    return Checkpoint(step=int(step), config=config, tensors=tensors, opt_state=opt_state)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    loss_ce: float
    loss_b: float
    loss_zr: float
    loss_zl: float
    acc: float
    drop_frac: float
    lr: float

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                repr(self.loss_ce),
                repr(self.loss_b),
                repr(self.loss_zr),
                repr(self.loss_zl),
                repr(self.acc),
                repr(self.drop_frac),
                repr(self.lr),
            ]
        )


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[StepMetrics]
    checkpoint_paths: list[Path]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:07d}.omoe"


def train(
    params: ModelParams,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pipeline: DataPipeline,
    out_dir: str | Path,
    config_snapshot: dict | None = None,
    start_step: int = 0,
    optimizer: Adam | None = None,
) -> TrainResult:
    """Run (or continue) optimization for train_cfg.steps total steps.

    Writes metrics.csv and periodic checkpoints under out_dir. A non-finite
    loss aborts with a diagnostic snapshot next to the checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pipeline.seed != train_cfg.seed:
        raise ConfigError("pipeline seed differs from train config seed")
    names = [name for name, _ in params.named()]
    if optimizer is None:
        optimizer = Adam(names, train_cfg)
    snapshot = config_snapshot or {}

    metrics_path = out_dir / "metrics.csv"
    metrics: list[StepMetrics] = []
    checkpoints: list[Path] = []
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
        if mode == "w":
            metrics_fh.write(METRICS_HEADER + "\n")
        for index in range(start_step, train_cfg.steps):
            step = index + 1
            batch = pipeline.batch(index, train_cfg.batch_size)
            meta = BatchMeta(seq_ids=batch.seq_ids, domains=batch.domains)
            clear_grads(params)
            with Tape() as tape:
                out = model_forward(
                    params, model_cfg, batch.input_ids, meta=meta, prefix_lens=batch.prefix_lens
                )
                loss, parts = total_loss(out.logits, batch.labels, out.aux, model_cfg)
                if not np.isfinite(parts.total):
                    snap = checkpoint_path(out_dir, step).with_suffix(".diagnostic")
                    save_checkpoint(
                        snap,
                        Checkpoint(
                            step=index,
                            config=snapshot,
                            tensors={n: t.data for n, t in params.named()},
                            opt_state=optimizer.state_tensors(),
                        ),
                    )
                    raise NumericError(
                        f"non-finite loss at step {step} "
                        f"(ce={parts.ce}, balance={parts.balance}); snapshot: {snap}"
                    )
                tape.backward(loss)

            grads = {
                name: tensor.grad for name, tensor in params.named() if tensor.grad is not None
            }
            lr = lr_at(step, train_cfg)
            optimizer.step(params, grads, lr, t=step)

            assignments = sum(len(row.kept) for row in out.trace)
            dropped = sum(sum(1 for k in row.kept if not k) for row in out.trace)
            record = StepMetrics(
                step=step,
                loss_ce=parts.ce,
                loss_b=parts.balance,
                loss_zr=parts.z_router,
                loss_zl=parts.z_logits,
                acc=token_prediction_accuracy(out.logits.data, batch.labels),
                drop_frac=dropped / assignments if assignments else 0.0,
                lr=lr,
            )
            metrics.append(record)
            metrics_fh.write(record.csv_row() + "\n")
            metrics_fh.flush()

            at_cadence = (
                train_cfg.checkpoint_every is not None
                and step % train_cfg.checkpoint_every == 0
            )
            if at_cadence or step == train_cfg.steps:
                path = checkpoint_path(out_dir, step)
                save_checkpoint(
                    path,
                    Checkpoint(
                        step=step,
                        config=snapshot,
                        tensors={n: t.data for n, t in params.named()},
                        opt_state=optimizer.state_tensors(),
                    ),
                )
                checkpoints.append(path)
    return TrainResult(params=params, metrics=metrics, checkpoint_paths=checkpoints)


def resume_training(
    ckpt: Checkpoint,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pipeline: DataPipeline,
    out_dir: str | Path,
) -> TrainResult:
    """Continue a run from a checkpoint; subsequent steps replay bitwise."""
    params = params_from_tensors(model_cfg, ckpt.tensors)
    optimizer = Adam([name for name, _ in params.named()], train_cfg)
    optimizer.load_state(ckpt.opt_state)
    return train(
        params,
        model_cfg,
        train_cfg,
        pipeline,
        out_dir,
        config_snapshot=ckpt.config,
        start_step=ckpt.step,
        optimizer=optimizer,
    )
