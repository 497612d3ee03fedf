"""
Dual-domain training loop.

One forward pass through the shared encoder carries both domains. The
segmentation loss sees source labels (and target labels when
``training.supervise_target`` is on); the domain head sees the ViT feature
volume through the gradient-reversal layer; MMD compares GAP-pooled source
and target features. The decoder never sees the domain branch.
"""

import copy
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from model.models import CaseMetrics, ExperimentConfig, LossBreakdown, MetricsReport
from model.volume import MaskVolume
from services.adaptation import (
    MultiKernelMMD,
    adversarial_loss,
    domain_accuracy,
    domain_classify,
    global_average_pool,
    grl_apply,
)
from services.checkpoint import checkpoint_load, checkpoint_save
from services.data_loader import DomainBatch, make_batches, prepare_case
from services.losses import seg_loss, total_loss
from services.metrics import case_metrics
from services.network import PFDAformer, build_model
from services.volume_pipeline import CaseRecord
from utils.enum import StudyMode
from utils.errors import NonFiniteLossError, PFDAError

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "seg", "adv", "mmd2", "total", "domain_acc", "lambda"]
THRESHOLD = 0.5


@dataclass
class TrainState:
    model: PFDAformer
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0  # next epoch to run (or the one in progress)
    batch_in_epoch: int = 0  # batches of ``epoch`` already consumed
    seed: int = 0
    total_steps: Optional[int] = None  # schedule length for the lambda ramp
    best_dice: float = -math.inf
    best_step: Optional[int] = None
    stale_epochs: int = 0
    best_snapshot: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)

    def progress(self) -> Dict[str, Any]:
        return {
            "batch_in_epoch": self.batch_in_epoch,
            "total_steps": self.total_steps,
            "best_dice": self.best_dice,
            "best_step": self.best_step,
            "stale_epochs": self.stale_epochs,
        }

    def restore_progress(self, progress: Dict[str, Any]) -> None:
        self.batch_in_epoch = int(progress.get("batch_in_epoch", 0))
        self.total_steps = progress.get("total_steps")
        self.best_dice = float(progress.get("best_dice", -math.inf))
        self.best_step = progress.get("best_step")
        self.stale_epochs = int(progress.get("stale_epochs", 0))


@dataclass
class LossTerms:
    seg: torch.Tensor
    adv: torch.Tensor
    mmd2: torch.Tensor
    total: torch.Tensor
    domain_acc: float
    grl_lambda: float


class TrainingLog:
    """
    Append-only CSV of per-step losses.

    The ``mmd2`` column holds the display value clamped at 0; ``total`` is
    the optimized objective built from the raw estimate.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="", encoding="utf-8") as file:
                csv.writer(file).writerow(LOG_COLUMNS)

    def append(self, b: LossBreakdown) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as file:
            csv.writer(file).writerow(
                [b.step, repr(b.seg), repr(b.adv), repr(b.mmd2_display), repr(b.total), repr(b.domain_acc), repr(b.grl_lambda)]
            )


def binarize(foreground: np.ndarray) -> np.ndarray:
    return (foreground > THRESHOLD).astype(np.uint8)


def torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


class Trainer:
    """Owns the TrainState; the only writer of model and optimizer state."""

    def __init__(self, config: ExperimentConfig, model: Optional[PFDAformer] = None):
        self.config = config
        self.training = config.training
        self.dtype = torch_dtype(self.training.dtype)
        self.device = torch.device(self.training.device)
        self.mode = config.adaptation.study_mode
        self.weights = config.effective_weights

        torch.manual_seed(self.training.seed)
        if model is None:
            model = build_model(
                config.model, head_dropout=config.adaptation.head_dropout, dtype=self.dtype
            )
        model = model.to(device=self.device, dtype=self.dtype)
        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=self.training.lr,
            betas=(self.training.beta1, self.training.beta2),
            weight_decay=self.training.weight_decay,
        )
        self.state = TrainState(model=model, optimizer=optimizer, seed=self.training.seed)
        self.mmd = MultiKernelMMD(fixed_sigma=config.adaptation.fixed_sigma)
        self.log: Optional[TrainingLog] = None

        logger.info(
            f"Trainer ready: study={self.mode.value}, ratio={config.ratio}, "
            f"alpha_adv={self.weights.alpha_adv}, beta_mmd={self.weights.beta_mmd}, "
            f"dtype={self.training.dtype}"
        )

    @property
    def model(self) -> PFDAformer:
        return self.state.model

    @property
    def total_steps(self) -> Optional[int]:
        return self.state.total_steps

    @total_steps.setter
    def total_steps(self, value: Optional[int]) -> None:
        self.state.total_steps = value

    def current_lambda(self) -> float:
        progress = 1.0 if not self.total_steps else self.state.step / self.total_steps
        return self.config.adaptation.lambda_at(progress)

    def compute_losses(self, batch: DomainBatch, mode: Optional[StudyMode] = None) -> LossTerms:
        """Forward both domains and evaluate every active loss term (no update)."""
        mode = StudyMode(mode) if mode is not None else self.mode
        weights = self.config.loss.for_study(mode)
        batch = batch.to(self.device, self.dtype)
        n_s = batch.n_source
        grl_lambda = self.current_lambda()

        x = torch.cat([batch.source_volumes, batch.target_volumes], dim=0)
        prob, vit_out = self.model(x)
        foreground = prob[:, 1]

        if self.training.supervise_target and batch.target_masks is not None:
            seg = seg_loss(
                foreground, torch.cat([batch.source_masks, batch.target_masks], dim=0), weights
            )
        else:
            seg = seg_loss(foreground[:n_s], batch.source_masks, weights)

        zero = vit_out.new_zeros(())
        adv, acc = zero, math.nan
        if mode.uses_grl:
            labels = batch.domain_labels.to(self.device)
            logits = domain_classify(grl_apply(vit_out, grl_lambda), self.model.domain_head)
            adv = adversarial_loss(logits, labels)
            acc = domain_accuracy(logits.detach(), labels)

        mmd2 = zero
        if mode.uses_mmd:
            pooled = global_average_pool(vit_out)
            mmd2 = self.mmd(pooled[:n_s], pooled[n_s:])

        return LossTerms(
            seg=seg,
            adv=adv,
            mmd2=mmd2,
            total=total_loss(seg, adv, mmd2, weights),
            domain_acc=acc,
            grl_lambda=grl_lambda if mode.uses_grl else 0.0,
        )

    def train_step(self, batch: DomainBatch) -> LossBreakdown:
        """One optimizer update on all parameters, domain head included."""
        state = self.state
        state.model.train()
        terms = self.compute_losses(batch)
        for name in ("seg", "adv", "mmd2", "total"):
            value = float(getattr(terms, name).detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(name, value, step=state.step)

        state.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        if self.training.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(state.model.parameters(), self.training.grad_clip)
        state.optimizer.step()
        state.step += 1

        breakdown = LossBreakdown(
            step=state.step,
            seg=float(terms.seg.detach()),
            adv=float(terms.adv.detach()),
            mmd2=float(terms.mmd2.detach()),
            total=float(terms.total.detach()),
            domain_acc=terms.domain_acc,
            grl_lambda=terms.grl_lambda,
        )
        if self.log is not None:
            self.log.append(breakdown)
        return breakdown

    @torch.no_grad()
    def predict(self, case: CaseRecord) -> MaskVolume:
        """
        Eval-mode foreground mask at the model cube size.

        A voxel is foreground when its probability is strictly above 0.5, so
        an exact tie goes to background, the same as argmax over the two
        softmax channels.
        """
        self.model.eval()
        volume, _ = prepare_case(case, self.config.model.input_side, self.training.zscore)
        x = torch.from_numpy(volume[None]).to(device=self.device, dtype=self.dtype)
        prob, _ = self.model(x)
        return MaskVolume(binarize(prob[0, 1].cpu().numpy()), case.volume.spacing)

    @torch.no_grad()
    def pooled_features(self, cases: Sequence[CaseRecord]) -> torch.Tensor:
        """GAP-pooled ViT features, one row per case, in eval mode."""
        self.model.eval()
        rows = []
        for case in cases:
            volume, _ = prepare_case(case, self.config.model.input_side, self.training.zscore)
            x = torch.from_numpy(volume[None]).to(device=self.device, dtype=self.dtype)
            _, vit_out = self.model(x)
            rows.append(global_average_pool(vit_out)[0].cpu())
        return torch.stack(rows)

    def validate(
        self,
        cases: Sequence[CaseRecord],
        predictions: Optional[Dict[str, MaskVolume]] = None,
        max_workers: int = 1,
    ) -> MetricsReport:
        """
        Per-case Dice/Precision/Recall/HD/HD95/ASD on ``cases``.

        A case whose metrics fail is reported with NaN values and a flag
        instead of aborting the sweep. Predicted masks are stored into
        ``predictions`` (keyed ``site/case_id``) when given.
        """
        if not cases:
            raise ValueError("validation split is empty")
        side = self.config.model.input_side
        pairs = []
        for case in cases:
            pred = self.predict(case)
            gt = prepare_case(case, side)[1]
            pairs.append((case, pred, MaskVolume(gt, case.volume.spacing)))
            if predictions is not None:
                predictions[f"{case.site}/{case.case_id}"] = pred

        def score(item) -> CaseMetrics:
            case, pred, gt = item
            try:
                return case_metrics(case.case_id, pred, gt, site=case.site)
            except PFDAError as err:
                logger.error(f"❌ metrics failed for {case.site}/{case.case_id}: {err}", exc_info=True)
                nan = math.nan
                return CaseMetrics(
                    case_id=case.case_id, site=case.site, dice=nan, precision=nan,
                    recall=nan, hd=nan, hd95=nan, asd=nan, flags=[f"FAILED: {err}"],
                )

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results: List[CaseMetrics] = list(pool.map(score, pairs))
        else:
            results = [score(item) for item in pairs]
        return MetricsReport(cases=results)

    def fit(
        self,
        source_train: Sequence[CaseRecord],
        target_train: Sequence[CaseRecord],
        val_cases: Sequence[CaseRecord] = (),
        log_path: Optional[Union[str, Path]] = None,
        max_steps: Optional[int] = None,
    ) -> TrainState:
        """
        Train for the configured epochs, keeping the best-validation-Dice snapshot.

        Continues from ``state.epoch``/``state.batch_in_epoch``, so a trainer
        restored with ``load`` picks up exactly where the saved run stopped.
        With ``max_steps`` the loop pauses once that many steps exist; the
        paused state can be saved and resumed. The best snapshot is only
        swapped in when the schedule completes.
        """
        training = self.training
        loader = make_batches(
            source_train,
            target_train,
            batch_size=training.batch_size,
            seed=training.seed,
            side=self.config.model.input_side,
            mmd_active=self.mode.uses_mmd,
            zscore=training.zscore,
            num_workers=training.num_workers,
            prefetch=training.prefetch,
        )
        if log_path is not None:
            self.log = TrainingLog(log_path)
        state = self.state
        state.total_steps = training.epochs * len(loader.batch_sampler)
        if state.epoch > 0 or state.batch_in_epoch > 0:
            logger.info(
                f"▶️ resuming at epoch {state.epoch + 1}, batch {state.batch_in_epoch + 1} (step {state.step})"
            )

        while state.epoch < training.epochs:
            epoch = state.epoch
            loader.batch_sampler.set_epoch(epoch, start=state.batch_in_epoch)
            losses = []
            for batch in loader:
                losses.append(self.train_step(batch))
                state.batch_in_epoch += 1
                if max_steps is not None and state.step >= max_steps:
                    logger.info(f"⏸️ paused at step {state.step} (epoch {epoch + 1})")
                    return state

            message = f"epoch {epoch + 1}/{training.epochs}"
            if losses:
                mean_total = float(np.mean([b.total for b in losses]))
                mean_mmd2 = float(np.mean([b.mmd2_display for b in losses]))
                message += f": mean total loss {mean_total:.4f}, mean MMD^2 {mean_mmd2:.4f}"

            if val_cases:
                dice = self.validate(val_cases).mean_dice
                message += f", val dice {dice:.4f}"
                if dice > state.best_dice:
                    state.best_dice = dice
                    state.best_step = state.step
                    state.best_snapshot = copy.deepcopy(state.model.state_dict())
                    state.stale_epochs = 0
                else:
                    state.stale_epochs += 1
            logger.info(message)
            state.epoch = epoch + 1
            state.batch_in_epoch = 0
            if training.patience is not None and state.stale_epochs >= training.patience:
                logger.info(f"⏹️ early stop after {epoch + 1} epochs (best step {state.best_step})")
                state.epoch = training.epochs
                break

        if state.best_snapshot is not None:
            state.model.load_state_dict(state.best_snapshot)
            logger.info(f"✅ restored best snapshot from step {state.best_step} (dice {state.best_dice:.4f})")
        return state

    def save(self, path: Union[str, Path]) -> Path:
        s = self.state
        return checkpoint_save(
            path,
            s.model,
            self.config.model,
            s.optimizer,
            step=s.step,
            epoch=s.epoch,
            seed=s.seed,
            progress=s.progress(),
            best_snapshot=s.best_snapshot,
        )

    def load(self, path: Union[str, Path]) -> None:
        meta = checkpoint_load(path, self.state.model, self.config.model, self.state.optimizer)
        self.state.step = meta["step"]
        self.state.epoch = meta["epoch"]
        self.state.restore_progress(meta["progress"])
        self.state.best_snapshot = meta["best_snapshot"]
