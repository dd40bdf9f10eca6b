"""Disjoint-subset multistage training

The fake class is split into ``k`` disjoint subsets. Stage ``i`` trains
on every real sample plus fake subset ``i``, starting from the
parameters the previous stage ended with, so each stage sees a near
1:1 class ratio and the whole fake pool is used exactly once per pass.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import pandas as pd
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader, Dataset

from ._rng import derive_seed, numpy_rng, torch_generator, torch_seeded
from .backbones import evaluate_loss, make_optimizer, train_epoch
from .checkpoints import load_checkpoint, parameter_hash, save_checkpoint
from .errors import CheckpointError, InvalidConfig, InvalidInput

__all__ = [
    "EPOCHS_PER_STAGE",
    "EpochRecord",
    "MultistageResult",
    "StageCheckpoint",
    "StageHyperparams",
    "StagePlan",
    "build_stage_dataset",
    "partition_fakes",
    "run_multistage",
]

logger = logging.getLogger(__name__)

EPOCHS_PER_STAGE = {"conv": 5, "attention": 5, "wavelet": 4}
REAL, FAKE = 0, 1


@dataclass(frozen=True)
class StagePlan:
    real_ids: tuple
    fake_subsets: tuple
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "real_ids", tuple(self.real_ids))
        subsets = tuple(tuple(subset) for subset in self.fake_subsets)
        object.__setattr__(self, "fake_subsets", subsets)
        if not subsets:
            raise InvalidConfig("a plan needs at least one fake subset")
        sizes = [len(subset) for subset in subsets]
        if len(set().union(*subsets)) != sum(sizes):
            raise InvalidInput("fake subsets are not pairwise disjoint")
        if max(sizes) - min(sizes) > 1:
            raise InvalidInput(f"fake subset sizes are unbalanced: {sizes}")

    @property
    def k(self):
        return len(self.fake_subsets)

    @property
    def fake_ids(self):
        return tuple(fid for subset in self.fake_subsets for fid in subset)

    def subset_sizes(self):
        return [len(subset) for subset in self.fake_subsets]

    def ids_hash(self):
        text = json.dumps([self.real_ids, self.fake_subsets])
        return hashlib.sha256(text.encode()).hexdigest()

    def manifest(self, include_ids=True):
        data = {
            "seed": self.seed,
            "k": self.k,
            "real_count": len(self.real_ids),
            "subset_sizes": self.subset_sizes(),
            "ids_hash": self.ids_hash(),
        }
        if include_ids:
            data["real_ids"] = list(self.real_ids)
            data["fake_subsets"] = [list(s) for s in self.fake_subsets]
        return data

    @classmethod
    def from_manifest(cls, data):
        return cls(data["real_ids"], data["fake_subsets"], data["seed"])


def partition_fakes(fake_ids, k, seed, real_ids=()):
    """Shuffle fake ids with ``seed`` and deal them round-robin into k subsets

    Ids are sorted first, so the plan does not depend on the order the
    caller discovered them in.
    """
    fake_ids = sorted(fake_ids)
    if k < 1:
        raise InvalidConfig(f"stage count must be at least 1, got {k}")
    if not fake_ids:
        raise InvalidInput("no fake ids to partition")
    if k > len(fake_ids):
        raise InvalidConfig(
            f"cannot split {len(fake_ids)} fake ids into {k} subsets")
    if len(set(fake_ids)) != len(fake_ids):
        raise InvalidInput("fake ids contain duplicates")
    order = numpy_rng(seed).permutation(len(fake_ids))
    shuffled = [fake_ids[i] for i in order]
    subsets = [shuffled[i::k] for i in range(k)]
    return StagePlan(sorted(real_ids), subsets, seed)


def build_stage_dataset(plan, stage):
    """All reals plus fake subset ``stage`` (1-based), labelled, shuffled"""
    if not 1 <= stage <= plan.k:
        raise InvalidInput(f"stage {stage} is outside 1..{plan.k}")
    entries = [(rid, REAL) for rid in plan.real_ids]
    entries += [(fid, FAKE) for fid in plan.fake_subsets[stage - 1]]
    order = numpy_rng(plan.seed, stage).permutation(len(entries))
    return [entries[i] for i in order]


@dataclass(frozen=True)
class StageHyperparams:
    epochs_per_stage: int = 5
    batch_size: int = 32
    initial_lr: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    monitor: str = "val_loss"
    continue_lr: bool = False
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs_per_stage and batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise InvalidConfig(
                f"initial_lr must be positive: {self.initial_lr}")
        if not 0 < self.plateau_factor < 1:
            raise InvalidConfig(
                f"plateau_factor not in (0, 1): {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise InvalidConfig(
                f"plateau_patience must be >= 1: {self.plateau_patience}")
        if self.monitor not in ("val_loss", "val_acc"):
            raise InvalidConfig(
                f"monitor must be 'val_loss' or 'val_acc': {self.monitor!r}")

    @classmethod
    def for_backbone(cls, name, **overrides):
        overrides.setdefault("epochs_per_stage", EPOCHS_PER_STAGE.get(name, 5))
        return cls(**overrides)

    def plateau_scheduler(self, optimizer):
        """Cut the rate on the ``plateau_patience``-th non-improving epoch"""
        # torch cuts once the bad-epoch count exceeds its patience
        return ReduceLROnPlateau(
            optimizer,
            mode="min" if self.monitor == "val_loss" else "max",
            factor=self.plateau_factor,
            patience=self.plateau_patience - 1,
            threshold=0.0,
        )


@dataclass(frozen=True)
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float = None
    val_acc: float = None


LOG_COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass(frozen=True)
class StageCheckpoint:
    stage: int
    path: Path
    start_hash: str
    end_hash: str


@dataclass
class MultistageResult:
    checkpoints: list
    log: list

    def log_frame(self):
        return pd.DataFrame([asdict(r) for r in self.log], columns=LOG_COLUMNS)

    @property
    def final_checkpoint(self):
        return self.checkpoints[-1]


class StageDataset(Dataset):
    """(tensor, label) view of a stage's id list

    ``fetch(id, seed)`` turns an id into a preprocessed tensor; the seed
    is derived from (plan seed, stage, epoch, position) and only matters
    to augmenting preprocessors.
    """

    def __init__(self, entries, fetch, seed, stage, epoch):
        self.entries = entries
        self.fetch = fetch
        self.seed = seed
        self.stage = stage
        self.epoch = epoch

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        sample_id, label = self.entries[index]
        seed = derive_seed(self.seed, self.stage, self.epoch, index)
        return self.fetch(sample_id, seed), label


def _stage_path(out_dir, stage, epoch=None):
    if epoch is None:
        return out_dir / f"stage-{stage}.pt"
    return out_dir / f"stage-{stage}-epoch-{epoch}.pt"


def run_multistage(backbone, plan, hp, init=None, *, fetch, out_dir,
                   validation=None, teacher=None, num_workers=0):
    """Train ``backbone`` through every stage of ``plan``

    Stage ``i`` starts from the parameters loaded back from the durable
    checkpoint of stage ``i - 1``. Stages whose checkpoints already exist
    (and belong to this plan) are restored instead of retrained, which
    makes an interrupted run resumable.

    :param fetch: ``fetch(id, seed) -> tensor`` preprocessing callback.
    :param validation: sequence of (tensor, label) pairs monitored by the
        plateau scheduler; without it the training loss is monitored.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if init is not None:
        backbone.set_parameters(init)
    val_loader = None
    if validation is not None:
        val_loader = DataLoader(validation, batch_size=hp.batch_size)

    log = []
    checkpoints = []
    last_durable = None
    restoring = True
    optimizer = scheduler = None
    plan_hash = plan.ids_hash()
    for stage in range(1, plan.k + 1):
        path = _stage_path(out_dir, stage)
        if restoring:
            restored = _restore(path, plan_hash, hp)
            if restored is not None:
                backbone.set_parameters(restored.state)
                log.extend(EpochRecord(**row)
                           for row in restored.sidecar["log"])
                if hp.continue_lr:
                    optimizer = make_optimizer(backbone, hp.initial_lr)
                    scheduler = hp.plateau_scheduler(optimizer)
                    optimizer.load_state_dict(restored.extra["optimizer"])
                    scheduler.load_state_dict(restored.extra["scheduler"])
                checkpoints.append(StageCheckpoint(
                    stage, path, restored.sidecar["start_hash"],
                    restored.sidecar["content_hash"]))
                last_durable = path
                logger.info("stage %d restored from %s", stage, path)
                continue
            restoring = False

        start_hash = parameter_hash(backbone.get_parameters())
        if optimizer is None or not hp.continue_lr:
            optimizer = make_optimizer(backbone, hp.initial_lr)
            scheduler = hp.plateau_scheduler(optimizer)
        entries = build_stage_dataset(plan, stage)
        logger.info("stage %d/%d: %d real + %d fake samples", stage, plan.k,
                    len(plan.real_ids), len(plan.fake_subsets[stage - 1]))
        records = []
        for epoch in range(1, hp.epochs_per_stage + 1):
            loader = DataLoader(
                StageDataset(entries, fetch, plan.seed, stage, epoch),
                batch_size=hp.batch_size,
                shuffle=True,
                generator=torch_generator(plan.seed, stage, epoch),
                num_workers=num_workers,
            )
            lr = optimizer.param_groups[0]["lr"]
            with torch_seeded(plan.seed, stage, epoch):
                train = train_epoch(backbone, loader, optimizer, teacher)
            val = evaluate_loss(backbone, val_loader) if val_loader else None
            if val is None:
                scheduler.step(train.loss)
            else:
                scheduler.step(val.loss if hp.monitor == "val_loss"
                               else val.accuracy)
            record = EpochRecord(
                stage, epoch, lr, train.loss, train.accuracy,
                val.loss if val else None, val.accuracy if val else None)
            records.append(record)
            logger.info("stage %d epoch %d lr=%g train_loss=%.4f "
                        "train_acc=%.4f val_loss=%s val_acc=%s",
                        stage, epoch, lr, train.loss, train.accuracy,
                        record.val_loss, record.val_acc)
            if hp.checkpoint_every_epoch and epoch < hp.epochs_per_stage:
                _save(_stage_path(out_dir, stage, epoch), backbone, plan,
                      stage, epoch, start_hash, records, optimizer,
                      scheduler, last_durable)
        _save(path, backbone, plan, stage, hp.epochs_per_stage, start_hash,
              records, optimizer, scheduler, last_durable)
        last_durable = path
        log.extend(records)

        # warm start: the next stage begins from what is on disk
        durable = load_checkpoint(path)
        backbone.set_parameters(durable.state)
        checkpoints.append(StageCheckpoint(
            stage, path, start_hash, durable.sidecar["content_hash"]))
    return MultistageResult(checkpoints, log)


def _restore(path, plan_hash, hp):
    try:
        restored = load_checkpoint(path)
    except FileNotFoundError:
        return None
    if restored.sidecar.get("plan_hash") != plan_hash:
        raise InvalidConfig(
            f"checkpoint {str(path)!r} belongs to a different stage plan")
    if hp.continue_lr and "optimizer" not in restored.extra:
        return None
    return restored


def _save(path, backbone, plan, stage, epoch, start_hash, records,
          optimizer, scheduler, last_durable):
    meta = {
        "backbone": backbone.name,
        "stage": stage,
        "epoch": epoch,
        "seed": plan.seed,
        "parameter_count": backbone.parameter_count(),
        "plan_hash": plan.ids_hash(),
        "start_hash": start_hash,
        "log": [asdict(r) for r in records],
    }
    extra = {"optimizer": optimizer.state_dict(),
             "scheduler": scheduler.state_dict()}
    try:
        save_checkpoint(path, backbone.get_parameters(), meta, extra)
    except CheckpointError as exc:
        logger.error("aborting: %s (last durable checkpoint: %s)",
                     exc, last_durable)
        raise CheckpointError(str(exc), last_durable=last_durable) from exc
    logger.info("checkpoint written: %s", path)
