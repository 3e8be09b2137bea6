"""Two-phase training: manifold reconstruction, then maximum likelihood on the latent density."""

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from torch import nn

from src.atlas import MultiChartFlow
from src.checkpoint import save_checkpoint, write_metrics
from src.config import Config
from src.flows import FlowSingularityError
from src.geometry_data import Dataset

EVAL_CHUNK = 4096


class TrainingDivergedError(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


class TrainingPhase(Enum):
    """Training phases, in execution order."""

    RECON = "recon"
    ML = "ml"


@dataclass
class TrainState:
    """Progress of a training run."""

    epoch: int = 0
    phase: TrainingPhase = TrainingPhase.RECON
    best_val_metric: float = math.inf
    checkpoint_path: str | None = None
    rng_state: torch.Tensor | None = None
    best_by_phase: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainingStats:
    """Counters reported at the end of a run."""

    steps: int = 0
    skipped_steps: int = 0
    epochs: dict[str, int] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    early_stopped: list[str] = field(default_factory=list)

    def log_summary(self) -> None:
        logger.info("=" * 60)
        logger.info("Training Statistics:")
        logger.info(f"  Optimizer steps: {self.steps}")
        logger.info(f"  Skipped (non-finite) steps: {self.skipped_steps}")
        for phase, epochs in self.epochs.items():
            stopped = " (early stop)" if phase in self.early_stopped else ""
            logger.info(
                f"  {phase}: {epochs} epochs in {self.seconds.get(phase, 0.0):.1f}s{stopped}"
            )
        logger.info("=" * 60)


def recon_loss(
    model: MultiChartFlow, batch: torch.Tensor, reg_weight: float = 0.0
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean squared reconstruction error plus the logdet-cancellation regularizer.

    The regularizer is ``(log|det J_φ(x)| + log|det J_{φ^{-1}}(pad(u))|)²`` for the
    chart selected by ``encode``.

    Returns:
        Tuple of (loss, {"mse": ..., "reg": ...})
    """
    atlas = model.atlas
    encoding = atlas.encode(batch)
    reconstruction, inverse_logdet = atlas.chart_inverse(encoding.u, encoding.chart)
    mse = ((batch - reconstruction) ** 2).sum(dim=1).mean()
    reg = ((encoding.logdet + inverse_logdet) ** 2).mean()
    loss = mse + reg_weight * reg if reg_weight > 0 else mse
    return loss, {"mse": mse.item(), "reg": reg.item()}


def ml_loss(model: MultiChartFlow, batch: torch.Tensor) -> torch.Tensor:
    """Negative mean latent log-likelihood; gradients reach only the base flow."""
    with torch.no_grad():
        u = model.atlas.encode(batch).u
    return -model.latent.log_prob(u).mean()


def clip_gradients(grads: list[torch.Tensor], max_norm: float) -> list[torch.Tensor]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive: {max_norm}")
    if not grads:
        return []
    total = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
    if total <= max_norm:
        return [g.clone() for g in grads]
    scale = max_norm / total
    return [g * scale for g in grads]


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class Trainer:
    """Runs the reconstruction and maximum-likelihood phases on one model."""

    def __init__(
        self, model: MultiChartFlow, config: Config, checkpoint_dir: str | Path | None = None
    ):
        """Initialize trainer.

        Args:
            model: Model to train in place
            config: Experiment configuration (the train block drives the schedule)
            checkpoint_dir: If set, best checkpoints per phase and the final model go here
        """
        self.model = model
        self.config = config
        self.train_config = config.train
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.generator = torch.Generator().manual_seed(self.train_config.seed)
        self.state = TrainState()
        self.stats = TrainingStats()
        self._nonfinite = 0

    def _set_trainable(self, phase: TrainingPhase | None) -> None:
        train_charts = phase in (TrainingPhase.RECON, None)
        train_base = phase in (TrainingPhase.ML, None)
        for p in self.model.chart_parameters():
            p.requires_grad_(train_charts)
        for p in self.model.base_parameters():
            p.requires_grad_(train_base)

    def _make_optimizer(self, parameters: list[nn.Parameter]) -> torch.optim.Optimizer:
        tc = self.train_config
        if tc.optimizer == "adamw":
            return torch.optim.AdamW(parameters, lr=tc.learning_rate, weight_decay=tc.weight_decay)
        return torch.optim.Adam(parameters, lr=tc.learning_rate, weight_decay=tc.weight_decay)

    def _make_scheduler(self, optimizer: torch.optim.Optimizer, epochs: int):
        tc = self.train_config
        if tc.lr_schedule == "cosine":
            return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1))
        if tc.lr_schedule == "step":
            return torch.optim.lr_scheduler.StepLR(
                optimizer, step_size=tc.step_decay_every, gamma=tc.step_factor
            )
        return None

    @torch.no_grad()
    def _validate(self, phase: TrainingPhase, data: torch.Tensor) -> float:
        total = 0.0
        for chunk in data.split(EVAL_CHUNK):
            if phase is TrainingPhase.RECON:
                residual = chunk - self.model.atlas.reconstruct(chunk)
                total += (residual**2).sum().item()
            else:
                total += ml_loss(self.model, chunk).item() * len(chunk)
        return total / len(data)

    def _loss(self, phase: TrainingPhase, batch: torch.Tensor) -> torch.Tensor:
        if phase is TrainingPhase.RECON:
            loss, _ = recon_loss(self.model, batch, self.train_config.reg_weight)
            return loss
        return ml_loss(self.model, batch)

    def _save(self, directory: Path, optimizer: torch.optim.Optimizer | None) -> None:
        save_checkpoint(
            directory,
            self.config,
            self.model,
            optimizer_state=optimizer.state_dict() if optimizer is not None else None,
            rng_state={"torch": torch.get_rng_state(), "generator": self.generator.get_state()},
            metrics=self.state.history,
        )

    def _run_phase(
        self,
        phase: TrainingPhase,
        epochs: int,
        train_data: torch.Tensor,
        val_data: torch.Tensor,
    ) -> None:
        tc = self.train_config
        if phase is TrainingPhase.RECON:
            parameters = self.model.chart_parameters()
            grad_clip, patience = tc.recon_grad_clip, tc.recon_patience
        else:
            parameters = self.model.base_parameters()
            grad_clip, patience = tc.ml_grad_clip, tc.ml_patience

        self.state.phase = phase
        self._nonfinite = 0
        self.stats.epochs[phase.value] = 0
        if epochs == 0 or not parameters:
            logger.info(f"Skipping {phase.value} phase")
            return

        logger.info(f"Starting {phase.value} phase: {epochs} epochs, {len(parameters)} tensors")
        phase_start = time.time()
        self._set_trainable(phase)
        optimizer = self._make_optimizer(parameters)
        scheduler = self._make_scheduler(optimizer, epochs)

        best_metric = math.inf
        best_state = _snapshot(self.model)
        stale_epochs = 0

        for epoch in range(1, epochs + 1):
            self.model.train()
            losses: list[float] = []
            permutation = torch.randperm(len(train_data), generator=self.generator)
            for idx in permutation.split(tc.batch_size):
                optimizer.zero_grad(set_to_none=True)
                try:
                    loss = self._loss(phase, train_data[idx])
                except FlowSingularityError as e:
                    logger.warning(f"{phase.value} epoch {epoch}: {e}")
                    loss = None

                if loss is None or not torch.isfinite(loss):
                    self._nonfinite += 1
                    self.stats.skipped_steps += 1
                    logger.warning(
                        f"{phase.value} epoch {epoch}: non-finite loss "
                        f"({self._nonfinite}/{tc.max_nonfinite_steps} consecutive)"
                    )
                    if self._nonfinite >= tc.max_nonfinite_steps:
                        self.model.load_state_dict(best_state)
                        self._set_trainable(None)
                        raise TrainingDivergedError(
                            f"{tc.max_nonfinite_steps} consecutive non-finite losses in the "
                            f"{phase.value} phase; best parameters restored"
                        )
                    continue

                self._nonfinite = 0
                loss.backward()
                if grad_clip is not None:
                    grads = [p.grad for p in parameters if p.grad is not None]
                    for grad, clipped in zip(grads, clip_gradients(grads, grad_clip), strict=True):
                        grad.copy_(clipped)
                optimizer.step()
                self.stats.steps += 1
                losses.append(loss.item())

            if scheduler is not None:
                scheduler.step()

            self.model.eval()
            val_metric = self._validate(phase, val_data)
            train_loss = float(np.mean(losses)) if losses else math.nan
            self.state.epoch = epoch
            self.state.history.append(
                {
                    "epoch": epoch,
                    "phase": phase.value,
                    "train_loss": train_loss,
                    "val_metric": val_metric,
                }
            )
            self.stats.epochs[phase.value] = epoch
            logger.info(
                f"[{phase.value}] epoch {epoch}/{epochs}: train {train_loss:.5f}, "
                f"val {val_metric:.5f}, lr {optimizer.param_groups[0]['lr']:.2e}"
            )
            if self.checkpoint_dir is not None:
                write_metrics(self.checkpoint_dir, self.state.history)

            if math.isfinite(val_metric) and val_metric < best_metric:
                best_metric = val_metric
                best_state = _snapshot(self.model)
                stale_epochs = 0
                if self.checkpoint_dir is not None:
                    self._save(self.checkpoint_dir / phase.value, optimizer)
            else:
                stale_epochs += 1
                if patience is not None and stale_epochs >= patience:
                    logger.info(f"[{phase.value}] early stop after {stale_epochs} stale epochs")
                    self.stats.early_stopped.append(phase.value)
                    break

        self.model.load_state_dict(best_state)
        self.state.best_by_phase[phase.value] = best_metric
        self.state.best_val_metric = best_metric
        self.stats.seconds[phase.value] = time.time() - phase_start
        logger.info(f"Finished {phase.value} phase: best val {best_metric:.5f}")

    def train(self, train_data: torch.Tensor, val_data: torch.Tensor) -> TrainState:
        """Run both phases and leave the best parameters of each phase in the model."""
        if len(train_data) == 0 or len(val_data) == 0:
            raise ValueError("Training and validation data must be non-empty")
        torch.manual_seed(self.train_config.seed)

        try:
            tc = self.train_config
            self._run_phase(TrainingPhase.RECON, tc.recon_epochs, train_data, val_data)
            self._run_phase(TrainingPhase.ML, tc.ml_epochs, train_data, val_data)
        finally:
            self._set_trainable(None)
            self.model.eval()

        self.state.rng_state = self.generator.get_state()
        if self.checkpoint_dir is not None:
            self._save(self.checkpoint_dir, None)
            self.state.checkpoint_path = str(self.checkpoint_dir)
            logger.info(f"Final checkpoint written to {self.checkpoint_dir}")
        self.stats.log_summary()
        return self.state


def train(
    model: MultiChartFlow,
    dataset: Dataset,
    config: Config,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Train ``model`` on a dataset split with the schedule in ``config.train``."""
    dtype = next(model.parameters()).dtype
    train_data = torch.as_tensor(dataset.train, dtype=dtype)
    val_data = torch.as_tensor(dataset.val, dtype=dtype)
    logger.info(
        f"Training on '{dataset.name}': {len(train_data)} train / {len(val_data)} val points"
    )
    return Trainer(model, config, checkpoint_dir).train(train_data, val_data)
