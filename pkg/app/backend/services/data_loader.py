"""
Paired source/target batching.

An epoch visits every source training case exactly once; target cases are
drawn in a shuffled cycle so each batch carries both domains.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from services.volume_pipeline import CaseRecord, standardize_cube, zscore_volume
from utils.enum import Domain
from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

BatchPlan = List[Tuple[List[int], List[int]]]


@dataclass
class DomainBatch:
    source_volumes: torch.Tensor  # (n_s, 1, S, S, S)
    source_masks: torch.Tensor  # (n_s, S, S, S)
    target_volumes: torch.Tensor  # (n_t, 1, S, S, S)
    target_masks: Optional[torch.Tensor] = None
    source_ids: Tuple[str, ...] = ()
    target_ids: Tuple[str, ...] = ()

    @property
    def n_source(self) -> int:
        return self.source_volumes.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_volumes.shape[0]

    @property
    def domain_labels(self) -> torch.Tensor:
        return torch.cat(
            [
                torch.full((self.n_source,), int(Domain.SOURCE), dtype=torch.long),
                torch.full((self.n_target,), int(Domain.TARGET), dtype=torch.long),
            ]
        )

    def to(self, device: torch.device, dtype: torch.dtype) -> "DomainBatch":
        def move(t: Optional[torch.Tensor], cast: bool) -> Optional[torch.Tensor]:
            if t is None:
                return None
            return t.to(device=device, dtype=dtype) if cast else t.to(device=device)

        return DomainBatch(
            source_volumes=move(self.source_volumes, True),
            source_masks=move(self.source_masks, True),
            target_volumes=move(self.target_volumes, True),
            target_masks=move(self.target_masks, True),
            source_ids=self.source_ids,
            target_ids=self.target_ids,
        )


def prepare_case(case: CaseRecord, side: int, zscore: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Standardize a case to the model cube; returns (1, S, S, S) volume and (S, S, S) mask."""
    volume = standardize_cube(case.volume, side)
    if zscore:
        volume = zscore_volume(volume)
    mask = standardize_cube(case.mask, side).data if case.mask is not None else None
    return volume.data[None].copy(), mask


def plan_batches(
    n_source: int,
    n_target: int,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    min_batch: int = 1,
) -> BatchPlan:
    """
    Index plan for one epoch: ``[(source_indices, target_indices), ...]``.

    A trailing source chunk smaller than ``min_batch`` is merged into the
    previous batch so every source case still appears exactly once.
    """
    if n_source < 1:
        raise ConfigurationError("source site has no training cases", field="data")
    if n_target < 1:
        raise ConfigurationError("target site has no training cases", field="data")
    rng = np.random.default_rng([seed, epoch])
    source_order = rng.permutation(n_source).tolist()
    chunks = [source_order[i : i + batch_size] for i in range(0, n_source, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_batch:
        tail = chunks.pop()
        chunks[-1].extend(tail)
    if len(chunks[0]) < min_batch:
        raise ConfigurationError(
            f"{n_source} source cases cannot fill a batch of at least {min_batch}",
            field="training.batch_size",
        )

    target_order = rng.permutation(n_target).tolist()
    cursor = 0
    plan: BatchPlan = []
    for chunk in chunks:
        picks = []
        for _ in range(batch_size):
            picks.append(target_order[cursor % n_target])
            cursor += 1
        plan.append((chunk, picks))
    return plan


class PairedCaseDataset(Dataset):
    """Prepared cubes addressed by ``(domain, index)`` keys."""

    def __init__(
        self,
        source_cases: Sequence[CaseRecord],
        target_cases: Sequence[CaseRecord],
        side: int,
        zscore: bool = False,
    ):
        self.source = [prepare_case(c, side, zscore) for c in source_cases]
        self.target = [prepare_case(c, side, zscore) for c in target_cases]
        self.source_ids = [c.case_id for c in source_cases]
        self.target_ids = [c.case_id for c in target_cases]

    def __len__(self) -> int:
        return len(self.source) + len(self.target)

    def __getitem__(self, key: Tuple[int, int]):
        domain, index = key
        if domain == Domain.SOURCE:
            volume, mask = self.source[index]
            case_id = self.source_ids[index]
        else:
            volume, mask = self.target[index]
            case_id = self.target_ids[index]
        return domain, case_id, volume, mask


class DomainBatchSampler(Sampler):
    """Batch plan per epoch; ``start`` skips batches already consumed on resume."""

    def __init__(self, n_source: int, n_target: int, batch_size: int, seed: int, min_batch: int):
        self.n_source = n_source
        self.n_target = n_target
        self.batch_size = batch_size
        self.seed = seed
        self.min_batch = min_batch
        self.epoch = 0
        self.start = 0

    def set_epoch(self, epoch: int, start: int = 0) -> None:
        self.epoch = epoch
        self.start = start

    def _plan(self) -> BatchPlan:
        return plan_batches(
            self.n_source, self.n_target, self.batch_size, self.seed, self.epoch, self.min_batch
        )

    def __iter__(self) -> Iterator[List[Tuple[int, int]]]:
        for source_idx, target_idx in self._plan()[self.start :]:
            yield [(Domain.SOURCE, i) for i in source_idx] + [(Domain.TARGET, j) for j in target_idx]

    def __len__(self) -> int:
        return len(self._plan())


def collate_domain_batch(items) -> DomainBatch:
    source = [item for item in items if item[0] == Domain.SOURCE]
    target = [item for item in items if item[0] == Domain.TARGET]
    target_masks = None
    if all(item[3] is not None for item in target):
        target_masks = torch.from_numpy(np.stack([item[3] for item in target]))
    return DomainBatch(
        source_volumes=torch.from_numpy(np.stack([item[2] for item in source])),
        source_masks=torch.from_numpy(np.stack([item[3] for item in source])),
        target_volumes=torch.from_numpy(np.stack([item[2] for item in target])),
        target_masks=target_masks,
        source_ids=tuple(item[1] for item in source),
        target_ids=tuple(item[1] for item in target),
    )


def make_batches(
    source_cases: Sequence[CaseRecord],
    target_cases: Sequence[CaseRecord],
    batch_size: int,
    seed: int,
    side: int,
    mmd_active: bool = True,
    zscore: bool = False,
    num_workers: int = 0,
    prefetch: int = 2,
) -> DataLoader:
    """
    DataLoader yielding DomainBatch objects; call ``loader.batch_sampler.set_epoch``
    before each epoch to reshuffle.

    Raises:
        ConfigurationError: a site has no training cases, a source case lacks
            a mask, or MMD is active with fewer than 2 samples per domain
    """
    if mmd_active and batch_size < 2:
        raise ConfigurationError(
            "MMD needs at least 2 samples per domain per batch", field="training.batch_size"
        )
    if not source_cases:
        raise ConfigurationError("source site has no training cases", field="data")
    if not target_cases:
        raise ConfigurationError("target site has no training cases", field="data")
    if any(c.mask is None for c in source_cases):
        raise ConfigurationError("every source training case needs a mask", field="data")

    dataset = PairedCaseDataset(source_cases, target_cases, side, zscore)
    sampler = DomainBatchSampler(
        len(source_cases),
        len(target_cases),
        batch_size,
        seed,
        min_batch=2 if mmd_active else 1,
    )
    loader_kwargs = {}
    if num_workers > 0:
        loader_kwargs = {"num_workers": num_workers, "prefetch_factor": prefetch}
    logger.info(
        f"Batching {len(source_cases)} source / {len(target_cases)} target cases, "
        f"{batch_size} per domain, {len(sampler)} batches per epoch"
    )
    # own generator: iterator creation must not advance the global torch RNG
    return DataLoader(
        dataset,
        batch_sampler=sampler,
        collate_fn=collate_domain_batch,
        generator=torch.Generator().manual_seed(seed),
        **loader_kwargs,
    )
