"""Two-stage curriculum, joint-training ablation, history and checkpoints.

Stage 1 fits the marginal path (marginal encoder + hypernetwork) under the
independence copula.  The marginal parameters are then frozen and stage 2
fits the copula path on PIT values produced by the frozen marginals.  The
ablation trains everything at once on the joint NLL.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import DatasetSplit, NormalizationState
from .flops import FlopLedger
from .model import (
    CopulaModel,
    ModelConfig,
    NonFiniteLossError,
    collate,
    fit_global_normalization,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tscopula-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_SCHEMA = "history/1"


@dataclass
class StageConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    max_epochs: int = 1000
    max_wall_clock: float | None = None  # seconds
    patience: int | None = None  # falls back to TrainConfig.patience


@dataclass
class TrainConfig:
    batch_size: int = 32
    batches_per_epoch: int = 512
    patience: int = 50
    grad_clip: float = 1e3
    divergence_threshold: float = 1e6
    seed: int = 0
    val_batch_size: int = 64
    workers: int = 1
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    joint: StageConfig = field(default_factory=StageConfig)

    def __post_init__(self):
        for name in ("batch_size", "batches_per_epoch", "patience", "val_batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        for name in ("stage1", "stage2", "joint"):
            stage = getattr(self, name)
            if isinstance(stage, dict):
                stage = StageConfig(**stage)
                setattr(self, name, stage)
            if stage.lr <= 0 or stage.max_epochs < 1:
                raise ValueError(f"{name}: lr and max_epochs must be positive")

    def stage(self, phase):
        return getattr(self, phase)

    def to_dict(self):
        return asdict(self)


class TrainingDiverged(RuntimeError):
    """Loss exceeded the divergence threshold; ``result`` holds the last good state."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    model: CopulaModel
    ledger: FlopLedger
    history: list
    mode: str
    best_val: dict = field(default_factory=dict)
    stop_reason: dict = field(default_factory=dict)
    phase_boundary_epoch: int | None = None
    theta_m_hashes: list = field(default_factory=list)
    rng: np.random.Generator | None = None

    def write_history(self, path):
        write_history(self.history, path)


def write_history(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_history(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _split(data):
    if isinstance(data, DatasetSplit):
        return list(data.train), list(data.validation)
    train, val = data
    return list(train), list(val or [])


def _prepare_all(model, windows, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(model.prepare, windows))
    return [model.prepare(w) for w in windows]


@torch.no_grad()
def evaluate_nll(model, prepared, batch_size=64, marginal_only=False, original_units=False):
    """Mean per-dimension NLL over windows (canonical ordering)."""
    if not prepared:
        return float("nan")
    was = model.training
    model.eval()
    vals = []
    for start in range(0, len(prepared), batch_size):
        batch = collate(prepared[start : start + batch_size])
        vals.append(model.window_nll(batch, original_units=original_units, marginal_only=marginal_only))
    model.train(was)
    return float(torch.cat(vals).mean())


def build_model(model_config, seed, train_windows):
    torch.manual_seed(seed)
    model = CopulaModel(model_config)
    if model_config.normalization == "global":
        model.normalization = fit_global_normalization(train_windows)
    return model


def _run_stage(model, phase, params, train_p, val_p, config, rng, ledger, history, epoch0, result):
    stage_cfg = config.stage(phase)
    patience = stage_cfg.patience or config.patience
    opt = torch.optim.Adam(params, lr=stage_cfg.lr, weight_decay=stage_cfg.weight_decay)
    marginal_only = phase == "stage1"
    best = evaluate_nll(model, val_p, config.val_batch_size, marginal_only=marginal_only) if val_p else float("inf")
    if not np.isfinite(best):
        best = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    bad_epochs = 0
    started = time.perf_counter()
    reason = "max_epochs"
    epoch = epoch0
    model.train()
    for stage_epoch in range(1, stage_cfg.max_epochs + 1):
        epoch = epoch0 + stage_epoch
        losses = []
        for _ in range(config.batches_per_epoch):
            idx = rng.integers(0, len(train_p), size=config.batch_size)
            batch = collate([train_p[i] for i in idx], order="random", rng=rng)
            try:
                loss = model.objective(batch, phase)
                value = loss.item()
            except NonFiniteLossError:
                value = float("nan")
            if not value <= config.divergence_threshold:
                model.load_state_dict(best_state)
                result.stop_reason[phase] = "diverged"
                msg = f"{phase} diverged at epoch {epoch}: loss={value:.4g}"
                logger.error(msg)
                raise TrainingDiverged(msg, result)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            fwd, bwd = model.batch_flops(batch, phase)
            ledger.add(phase, fwd, bwd)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val = evaluate_nll(model, val_p, config.val_batch_size, marginal_only=marginal_only) if val_p else train_loss
        improved = val < best
        if improved:
            best = val
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
        record = {
            "schema": HISTORY_SCHEMA,
            "epoch": epoch,
            "stage": phase,
            "stage_epoch": stage_epoch,
            "train_loss": train_loss,
            "val_nll": val,
            "best_val_nll": best,
            "cumulative_flops": ledger.total,
            "stage_flops": ledger.stage_total(phase),
        }
        if phase == "stage2":
            digest = model.theta_m_hash()
            result.theta_m_hashes.append(digest)
            record["theta_m_hash"] = digest
        history.append(record)
        logger.info("%s epoch %d train %.4f val %.4f", phase, stage_epoch, train_loss, val)
        if bad_epochs >= patience:
            reason = "early_stop"
            break
        if stage_cfg.max_wall_clock is not None and time.perf_counter() - started > stage_cfg.max_wall_clock:
            reason = "wall_clock"
            break
    model.load_state_dict(best_state)
    result.best_val[phase] = best
    result.stop_reason[phase] = reason
    return epoch


def train_curriculum(data, config=None, model_config=None, model=None):
    """Stage 1 on the marginal NLL, freeze the marginal path, stage 2 on the copula NLL."""
    config = config or TrainConfig()
    train, val = _split(data)
    if not train:
        raise ValueError("no training windows")
    model = model or build_model(model_config or ModelConfig(), config.seed, train)
    rng = np.random.default_rng(config.seed)
    train_p = _prepare_all(model, train, config.workers)
    val_p = _prepare_all(model, val, config.workers)
    ledger = FlopLedger()
    history = []
    result = TrainResult(model, ledger, history, mode="curriculum", rng=rng)

    model.set_marginal_trainable(True)
    for p in model.copula_parameters():
        p.requires_grad_(False)
    epoch = _run_stage(model, "stage1", model.marginal_parameters(), train_p, val_p, config, rng, ledger, history, 0, result)
    result.phase_boundary_epoch = epoch

    model.set_marginal_trainable(False)
    for p in model.copula_parameters():
        p.requires_grad_(True)
    result.theta_m_hashes.append(model.theta_m_hash())
    _run_stage(model, "stage2", model.copula_parameters(), train_p, val_p, config, rng, ledger, history, epoch, result)
    return result


def train_joint_ablation(data, config=None, model_config=None, model=None):
    """Single-stage training of every parameter on the joint NLL."""
    config = config or TrainConfig()
    train, val = _split(data)
    if not train:
        raise ValueError("no training windows")
    model = model or build_model(model_config or ModelConfig(), config.seed, train)
    rng = np.random.default_rng(config.seed)
    train_p = _prepare_all(model, train, config.workers)
    val_p = _prepare_all(model, val, config.workers)
    ledger = FlopLedger()
    history = []
    result = TrainResult(model, ledger, history, mode="joint", rng=rng)
    for p in model.parameters():
        p.requires_grad_(True)
    _run_stage(model, "joint", list(model.parameters()), train_p, val_p, config, rng, ledger, history, 0, result)
    return result


def train(data, config=None, model_config=None, mode="curriculum"):
    if mode == "curriculum":
        return train_curriculum(data, config, model_config)
    if mode == "joint":
        return train_joint_ablation(data, config, model_config)
    raise ValueError(f"unknown mode {mode!r}")


def flops_to_reach(history, target):
    """Cumulative FLOPs at the first epoch whose validation NLL is ``<= target`` (None if never)."""
    for rec in history:
        if rec["stage"] in ("stage2", "joint") and rec["val_nll"] <= target:
            return rec["cumulative_flops"]
    return None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, train_config=None, rng=None, phase=None, extra=None):
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "theta_M": model.marginal_state(),
        "theta_C": model.copula_state(),
        "normalization": model.normalization.to_dict() if model.normalization is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "torch_rng": torch.get_rng_state(),
        "phase": phase,
        "extra": extra or {},
    }
    torch.save(archive, path)


def load_checkpoint(path):
    """Return ``(model, archive)``; raises on unknown formats or versions."""
    archive = torch.load(path, weights_only=False)
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {archive.get('version')}")
    model = CopulaModel(ModelConfig(**archive["model_config"]))
    state = {**archive["theta_M"], **archive["theta_C"]}
    model.load_state_dict(state)
    if archive.get("normalization"):
        model.normalization = NormalizationState.from_dict(archive["normalization"])
    return model, archive
