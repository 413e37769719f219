"""Training schedules and the optimization loop.

Per epoch the loop sets the auxiliary noise level and the guidance
coefficient, samples standardized patches, corrupts them, evaluates the
adaptive loss, and steps Adam. Bank features are rebuilt from the current
encoder on a fixed cadence (atomic swap; projections never change), with a
checkpoint written at each refresh.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import DegenerateBankError, DivergenceError, DimensionError, ParameterError
from .mrc_io import Micrograph
from .noise_model import PoissonGaussianParams, corrupt_poisson_gaussian
from .objectives import adaptive_loss
from .score_model import ScoreModel, ScoreModelConfig, save_checkpoint
from .target_bank import TargetBank, match, refresh_bank_features

LOG_COLUMNS = (
    "epoch", "step", "loss_total", "loss_dsm", "loss_tsm",
    "mean_confidence", "sigma_a", "lambda", "lr",
)


@dataclass
class TrainingSchedule:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-5
    lr_decay_factor: float = 0.1
    lr_decay_steps: int = 4000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    sigma_a_levels: tuple[float, ...] = (0.2, 0.1, 0.05, 0.01, 1e-6)
    warmup_epochs: int = 20
    ramp_end_epochs: int = 60
    patches_per_micrograph: int = 32
    patch_size: int = 256
    encoder_refresh_epochs: int = 10
    seed: int = 0
    augment: PoissonGaussianParams | None = None

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.ramp_end_epochs <= self.epochs:
            raise ParameterError(
                f"need 0 <= warmup ({self.warmup_epochs}) <= ramp end "
                f"({self.ramp_end_epochs}) <= epochs ({self.epochs})"
            )
        levels = tuple(float(s) for s in self.sigma_a_levels)
        if not levels or any(s <= 0 for s in levels):
            raise ParameterError("sigma_a_levels must be nonempty and positive")
        if any(a < b for a, b in zip(levels, levels[1:])):
            raise ParameterError(f"sigma_a_levels must be non-increasing, got {levels}")
        self.sigma_a_levels = levels


def lambda_schedule(epoch: int, sched: TrainingSchedule) -> float:
    """Guidance coefficient: 0 through warmup, linear ramp, then 1."""
    w, r = sched.warmup_epochs, sched.ramp_end_epochs
    if epoch < w:
        return 0.0
    if epoch >= r:
        return 1.0
    return (epoch - w) / (r - w)


def sigma_a_schedule(epoch: int, sched: TrainingSchedule) -> float:
    """Piecewise-constant descent through the auxiliary noise levels."""
    levels = sched.sigma_a_levels
    idx = min(int(epoch * len(levels) / sched.epochs), len(levels) - 1)
    return levels[idx]


def standardize(patch: np.ndarray, std_floor: float = 1e-6) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    return (patch - patch.mean()) / max(float(patch.std()), std_floor)


def sample_patches(
    micrographs, n_per: int, size: int, seed, do_standardize: bool = True
) -> list[np.ndarray]:
    """Uniformly sample ``n_per`` square patches from each micrograph."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    patches = []
    for idx, m in enumerate(micrographs):
        data = m.data if isinstance(m, Micrograph) else np.asarray(m)
        h, w = data.shape
        if h < size or w < size:
            name = m.provenance if isinstance(m, Micrograph) and m.provenance else f"#{idx}"
            raise DimensionError(f"micrograph {name} is {h}x{w}, smaller than patch size {size}")
        for _ in range(n_per):
            y = int(rng.integers(0, h - size + 1))
            x = int(rng.integers(0, w - size + 1))
            p = data[y : y + size, x : x + size].astype(np.float64)
            patches.append(standardize(p) if do_standardize else p)
    return patches


@dataclass
class TrainResult:
    model: ScoreModel
    metrics: list[dict]
    probe_trace: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    bank: TargetBank | None = None


def _write_log(path, rows):
    exists = os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def train(
    data: list[Micrograph],
    bank: TargetBank | None,
    sched: TrainingSchedule,
    config: ScoreModelConfig | None = None,
    dsm_only: bool = False,
    no_anneal: bool = False,
    fixed_wt: float | None = None,
    out_dir: str | None = None,
    log_path: str | None = None,
) -> TrainResult:
    """Run the full training loop and return the trained model with metrics.

    ``dsm_only`` disables the target branch entirely (no bank required);
    ``no_anneal`` pins the guidance coefficient to 1 from the first epoch;
    ``fixed_wt`` replaces the per-sample confidence with a constant.
    Single-worker runs are deterministic given the schedule seed.
    """
    if bank is None and not dsm_only:
        raise ParameterError("provide a target bank or request dsm_only training")
    sched = replace(sched)
    if dsm_only:
        sched.warmup_epochs = sched.ramp_end_epochs = sched.epochs
    elif no_anneal:
        sched.warmup_epochs = sched.ramp_end_epochs = 0

    torch.manual_seed(sched.seed)
    rng = np.random.default_rng(sched.seed)
    gen = torch.Generator().manual_seed(sched.seed)

    sigma = math.sqrt(bank.sigma2_surrogate) if bank is not None else 1.0
    config = config or ScoreModelConfig()
    model = ScoreModel(config, sigma_data=sigma)
    model.train()

    opt = torch.optim.Adam(model.parameters(), lr=sched.lr, betas=sched.adam_betas)
    lr_sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=[sched.lr_decay_steps], gamma=sched.lr_decay_factor
    )

    # schedule-independent probe patch for the confidence trace
    probe = None
    if bank is not None:
        first = data[0].data
        ps = min(sched.patch_size, *first.shape)
        y0 = (first.shape[0] - ps) // 2
        x0 = (first.shape[1] - ps) // 2
        probe = standardize(first[y0 : y0 + ps, x0 : x0 + ps])

    result = TrainResult(model=model, metrics=[], bank=bank)
    step = 0
    last_good = None
    for epoch in range(sched.epochs):
        sigma_a = sigma_a_schedule(epoch, sched)
        lam = lambda_schedule(epoch, sched)

        if bank is not None and epoch % sched.encoder_refresh_epochs == 0:
            try:
                bank = refresh_bank_features(bank, model.feature_map())
            except DegenerateBankError as exc:
                raise DegenerateBankError(
                    f"bank became degenerate at epoch {epoch} refresh: {exc}"
                ) from exc
            result.bank = bank
            if out_dir is not None:
                path = os.path.join(out_dir, f"checkpoint_epoch{epoch:04d}.npz")
                save_checkpoint(model, step, path)
                result.checkpoints.append(path)
                last_good = path

        patches = sample_patches(
            data, sched.patches_per_micrograph, sched.patch_size, rng,
            do_standardize=sched.augment is None,
        )
        if sched.augment is not None:
            patches = [
                standardize(corrupt_poisson_gaussian(p, sched.augment, rng))
                for p in patches
            ]
        order = rng.permutation(len(patches))

        sums = {"total": 0.0, "dsm": 0.0, "tsm": 0.0, "conf": 0.0}
        n_batches = 0
        for start in range(0, len(order), sched.batch_size):
            chunk = [patches[i] for i in order[start : start + sched.batch_size]]
            batch = np.stack(chunk)
            breakdown = adaptive_loss(
                model, batch, bank if not dsm_only else None, lam, sigma_a,
                sigma=sigma, generator=gen, fixed_confidence=fixed_wt,
            )
            if not torch.isfinite(breakdown.total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last good checkpoint: {last_good}"
                )
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            lr_sched.step()
            step += 1
            n_batches += 1
            sums["total"] += float(breakdown.total.detach())
            sums["dsm"] += breakdown.dsm_term
            sums["tsm"] += breakdown.tsm_term
            sums["conf"] += float(np.mean(breakdown.per_sample_confidence))

        if probe is not None:
            result.probe_trace.append(match(probe, bank).confidence)

        row = {
            "epoch": epoch,
            "step": step,
            "loss_total": sums["total"] / max(n_batches, 1),
            "loss_dsm": sums["dsm"] / max(n_batches, 1),
            "loss_tsm": sums["tsm"] / max(n_batches, 1),
            "mean_confidence": sums["conf"] / max(n_batches, 1),
            "sigma_a": sigma_a,
            "lambda": lam,
            "lr": opt.param_groups[0]["lr"],
        }
        result.metrics.append(row)
        if log_path is not None:
            _write_log(log_path, [row])

    if out_dir is not None:
        path = os.path.join(out_dir, "checkpoint_final.npz")
        save_checkpoint(model, step, path)
        result.checkpoints.append(path)
    return result
