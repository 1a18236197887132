"""Staged certified training, optimizers and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bounds import PerturbationSpec
from .config import RunConfig, TrainConfig
from .loss import LossWeights, total_loss
from .metrics import certify_tight, clean_metrics
from .model import build_mcnn_micro
from .numerics import (
    FormatError,
    MagicError,
    TruncatedError,
    VersionError,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .rng import CounterRNG

SHUFFLE_STREAM = 2
CKPT_MAGIC = b"BTNC"
CKPT_VERSION = 1
CSV_HEADER = "epoch,kappa,epsilon,natural,certify,reg,total,val_mae,val_ct_mae"


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# -- schedules ----------------------------------------------------------------


def _check_epoch(epoch: int, cfg: TrainConfig) -> None:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")


def kappa_at(epoch: int, cfg: TrainConfig) -> float:
    """kappa_start during warmup, linear to kappa_end over the ramp, then flat."""
    _check_epoch(epoch, cfg)
    if epoch < cfg.warmup_epochs:
        return cfg.kappa_start
    k = epoch - cfg.warmup_epochs
    if k < cfg.ramp_epochs:
        return cfg.kappa_start + (cfg.kappa_end - cfg.kappa_start) * k / cfg.ramp_epochs
    return cfg.kappa_end


def epsilon_at(epoch: int, cfg: TrainConfig) -> float:
    _check_epoch(epoch, cfg)
    if epoch < cfg.warmup_epochs:
        return 0.0
    k = epoch - cfg.warmup_epochs
    if cfg.epsilon_ramp == "linear" and k < cfg.ramp_epochs:
        return cfg.epsilon_target * k / cfg.ramp_epochs
    return cfg.epsilon_target


def in_final_phase(epoch: int, cfg: TrainConfig) -> bool:
    return epoch >= cfg.warmup_epochs + cfg.ramp_epochs


# -- optimizers ---------------------------------------------------------------


class SGD:
    """Heavy-ball momentum: v = mu v + g; p -= lr v."""

    kind = "sgd"

    def __init__(self, keys, shapes, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.keys = list(keys)
        self.v = {k: np.zeros(s) for k, s in zip(self.keys, shapes)}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k in self.keys:
            v = self.v[k]
            v *= self.momentum
            v += grads[k]
            params[k] -= self.lr * v

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(f"v:{k}", self.v[k]) for k in self.keys]

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k in self.keys:
            self.v[k][...] = tensors[f"v:{k}"]


class Adam:
    kind = "adam"

    def __init__(self, keys, shapes, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.keys = list(keys)
        self.m = {k: np.zeros(s) for k, s in zip(self.keys, shapes)}
        self.v = {k: np.zeros(s) for k, s in zip(self.keys, shapes)}
        self.t = np.zeros(())

    def step(self, params, grads) -> None:
        self.t += 1.0
        t = float(self.t)
        c1, c2 = 1.0 - self.b1**t, 1.0 - self.b2**t
        for k in self.keys:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        out = [("t", self.t)]
        for k in self.keys:
            out += [(f"m:{k}", self.m[k]), (f"v:{k}", self.v[k])]
        return out

    def load_state(self, tensors) -> None:
        self.t[...] = tensors["t"]
        for k in self.keys:
            self.m[k][...] = tensors[f"m:{k}"]
            self.v[k][...] = tensors[f"v:{k}"]


def make_optimizer(cfg: TrainConfig, params: dict[str, np.ndarray]):
    keys = list(params)
    shapes = [params[k].shape for k in keys]
    if cfg.optimizer == "adam":
        return Adam(keys, shapes, cfg.learning_rate)
    return SGD(keys, shapes, cfg.learning_rate, cfg.momentum)


def param_dict(model) -> dict[str, np.ndarray]:
    """Live views of every trainable tensor, keyed ``layer.role`` in stable order."""
    return {f"{name}.{role}": p for name, role, p in model.parameters()}


# -- epoch log ----------------------------------------------------------------


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    kappa: float
    epsilon: float
    natural: float
    certify: float
    reg: float
    total: float
    val_mae: float
    val_ct_mae: float

    def csv(self) -> str:
        vals = [self.kappa, self.epsilon, self.natural, self.certify, self.reg, self.total]
        vals += [self.val_mae, self.val_ct_mae]
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])

    @classmethod
    def from_csv(cls, line: str) -> "EpochRow":
        head, *rest = line.split(",")
        return cls(int(head), *(float(v) for v in rest))


def log_csv(rows) -> str:
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    config: RunConfig
    model: object
    optimizer: object
    rng: CounterRNG
    epoch: int = 0  # next epoch to run
    log: list[EpochRow] = field(default_factory=list)
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None


def new_state(cfg: RunConfig, model=None) -> TrainState:
    model = model if model is not None else build_mcnn_micro(cfg.model)
    opt = make_optimizer(cfg.train, param_dict(model))
    rng = CounterRNG.from_seed(cfg.train.seed).split(SHUFFLE_STREAM)
    return TrainState(cfg, model, opt, rng)


def validate(model, val, cfg: TrainConfig) -> tuple[float, float]:
    """Clean MAE and certify-tight MAE at the target epsilon."""
    mae, _ = clean_metrics(model, val)
    spec = PerturbationSpec(cfg.norm_case, cfg.epsilon_target)
    ct, _ = certify_tight(model, val, spec)
    return mae, ct


def run_epoch(state: TrainState, train_ds) -> tuple[float, float, float, float, float, float]:
    cfg = state.config.train
    e = state.epoch
    kappa, eps = kappa_at(e, cfg), epsilon_at(e, cfg)
    w = LossWeights(kappa, cfg.lambda_l1, cfg.beta_l2, cfg.norm_case, eps)
    params = param_dict(state.model)
    n = len(train_ds)
    order = state.rng.permutation(n)
    sums = np.zeros(4)
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        images = np.stack([train_ds.samples[i].image for i in idx])
        gts = np.stack([train_ds.samples[i].gt_density for i in idx])
        parts, grads = total_loss(state.model, images, gts, w)
        if not math.isfinite(parts.total):
            raise DivergenceError(e, b, parts.total)
        state.optimizer.step(params, grads)
        state.model.bump()
        sums += len(idx) * np.array([parts.natural, parts.certify, parts.reg, parts.total])
    natural, certify, reg, total = sums / n
    if not all(np.isfinite(p).all() for p in params.values()):
        raise DivergenceError(e, -1, float("nan"))
    return kappa, eps, natural, certify, reg, total


def train(
    state: TrainState,
    train_ds,
    val_ds,
    until: Optional[int] = None,
    on_epoch_end: Optional[Callable[[TrainState, bool], None]] = None,
) -> TrainState:
    """Run epochs ``state.epoch .. until`` (default: to the end of the schedule).

    ``on_epoch_end(state, improved)`` fires after every epoch; ``improved``
    marks a new best validation certify-tight MAE within the final phase.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training split")
    cfg = state.config.train
    stop = cfg.total_epochs if until is None else min(until, cfg.total_epochs)
    while state.epoch < stop:
        e = state.epoch
        kappa, eps, natural, certify, reg, total = run_epoch(state, train_ds)
        val_mae, val_ct = validate(state.model, val_ds, cfg)
        state.log.append(EpochRow(e, kappa, eps, natural, certify, reg, total, val_mae, val_ct))
        improved = in_final_phase(e, cfg) and (state.best_score is None or val_ct < state.best_score)
        if improved:
            state.best_score, state.best_epoch = val_ct, e
        state.epoch = e + 1
        if on_epoch_end is not None:
            on_epoch_end(state, improved)
    return state


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    meta: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    rng_state: bytes

    @property
    def config(self) -> RunConfig:
        return RunConfig.model_validate(self.meta["config"])

    @property
    def epoch(self) -> int:
        return self.meta["epoch"]


def checkpoint_bytes(state: TrainState) -> bytes:
    params = param_dict(state.model)
    opt = state.optimizer.state()
    meta = {
        "config": state.config.model_dump(mode="json"),
        "epoch": state.epoch,
        "param_names": list(params),
        "optimizer": {"kind": state.optimizer.kind, "names": [k for k, _ in opt]},
        "best_val_ct_mae": state.best_score,
        "best_epoch": state.best_epoch,
        "log": [r.csv() for r in state.log],
    }
    block = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(block)), block]
    out += [tensor_to_bytes(t) for t in params.values()]
    out += [tensor_to_bytes(t) for _, t in opt]
    out.append(state.rng.state_bytes())
    return b"".join(out)


def save_checkpoint(state: TrainState, path) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    raw = checkpoint_bytes(state)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def parse_checkpoint(raw: bytes, name: str = "<checkpoint>") -> Checkpoint:
    if len(raw) < 4:
        raise TruncatedError(f"{name}: file shorter than the magic")
    if raw[:4] != CKPT_MAGIC:
        raise MagicError(f"{name}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 10:
        raise TruncatedError(f"{name}: header truncated")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{name}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 10
    if len(raw) < pos + n:
        raise TruncatedError(f"{name}: config block truncated")
    try:
        meta = json.loads(raw[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: unreadable config block: {exc}") from None
    pos += n
    tensors = {}
    try:
        for key in meta["param_names"] + [f"opt/{k}" for k in meta["optimizer"]["names"]]:
            tensors[key], pos = tensor_from_bytes(raw, pos)
    except TruncatedError as exc:
        raise TruncatedError(f"{name}: {exc}") from None
    if len(raw) < pos + 16:
        raise TruncatedError(f"{name}: PRNG state truncated")
    if len(raw) > pos + 16:
        raise FormatError(f"{name}: {len(raw) - pos - 16} trailing bytes")
    params = {k: tensors[k] for k in meta["param_names"]}
    opt = {k: tensors[f"opt/{k}"] for k in meta["optimizer"]["names"]}
    return Checkpoint(version, meta, params, opt, raw[pos : pos + 16])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))


def load_params(model, params: dict[str, np.ndarray]) -> None:
    live = param_dict(model)
    if list(live) != list(params):
        raise FormatError("checkpoint parameters do not match the model layout")
    for k, t in params.items():
        if live[k].shape != t.shape:
            raise FormatError(f"{k}: shape {t.shape} != model {live[k].shape}")
        live[k][...] = t
    model.bump()


def model_from_checkpoint(ck: Checkpoint):
    model = build_mcnn_micro(ck.config.model)
    load_params(model, ck.params)
    return model


def state_from_checkpoint(ck: Checkpoint, cfg: Optional[RunConfig] = None) -> TrainState:
    """Rebuild a TrainState; ``cfg`` overrides the stored config if given."""
    cfg = cfg or ck.config
    model = build_mcnn_micro(cfg.model)
    load_params(model, ck.params)
    state = new_state(cfg, model)
    if state.optimizer.kind != ck.meta["optimizer"]["kind"]:
        raise FormatError("optimizer kind differs from the checkpoint")
    state.optimizer.load_state(ck.optimizer)
    state.rng = CounterRNG.from_state_bytes(ck.rng_state)
    state.epoch = ck.epoch
    state.log = [EpochRow.from_csv(line) for line in ck.meta["log"]]
    state.best_score = ck.meta["best_val_ct_mae"]
    state.best_epoch = ck.meta["best_epoch"]
    return state
