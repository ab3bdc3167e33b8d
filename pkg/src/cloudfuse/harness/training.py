"""Training loop, evaluation and the weighted-vs-uniform ablation."""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from cloudfuse import cloud_mask as cm
from cloudfuse.errors import ConfigMismatchError, TrainingAborted, ValidationError
from cloudfuse.harness.checkpoint import Checkpoint
from cloudfuse.harness.config import TrainConfig
from cloudfuse.metrics import MetricsReport, patch_metrics, psnr_from_mse
from cloudfuse.objective import cloud_aware_loss
from cloudfuse.raster_store import PatchTriplet, load_dataset, split_of
from cloudfuse.reconstruction import build_model, export

log = logging.getLogger(__name__)

MOMENTS = ("step", "exp_avg", "exp_avg_sq")


def _triplets(data, split: str | None = None) -> list[PatchTriplet]:
    if isinstance(data, (str, Path)):
        return load_dataset(data, split)
    triplets = list(data)
    if split is not None:
        triplets = [t for t in triplets if split_of(t.id) == split]
    if not triplets:
        raise ValidationError("dataset is empty" + (f" for split {split!r}" if split else ""))
    return triplets


def cloud_mask_for(triplet: PatchTriplet, cfg: TrainConfig) -> cm.CloudMask:
    """Refined cloud mask used for weighting and for cloud-region metrics."""
    if cfg.weight_source == "diff":
        diff = np.abs(triplet.cloudy.bands.astype(np.float64) - triplet.clear.bands).max(axis=0)
        raw = cm.CloudMask((diff > 0).astype(np.uint8))
        return cm.refine_mask(raw, cm.ndsi(triplet.cloudy))
    return cm.refined_mask(triplet.cloudy, cfg.threshold)


def weights_for(triplet: PatchTriplet, cfg: TrainConfig) -> np.ndarray:
    if cfg.ablation_uniform_weight:
        return np.ones(triplet.size)
    return cm.weight_map(cloud_mask_for(triplet, cfg), cfg.alpha).values


@dataclass
class Batchable:
    ids: list
    cloudy: torch.Tensor
    clear: torch.Tensor
    sar: torch.Tensor
    weights: torch.Tensor

    @classmethod
    def from_triplets(cls, triplets, cfg: TrainConfig, dtype=torch.float32) -> "Batchable":
        def stack(arrays):
            return torch.from_numpy(np.stack(arrays)).to(dtype)

        return cls(
            [t.id for t in triplets],
            stack([t.cloudy.bands for t in triplets]),
            stack([t.clear.bands for t in triplets]),
            stack([t.sar.channels for t in triplets]),
            stack([weights_for(t, cfg) for t in triplets]),
        )

    def __len__(self) -> int:
        return len(self.ids)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Indices for ``step``: a seeded permutation per epoch over a flat sample stream.

    Stateless, so a resumed run draws exactly the batches the original would.
    """
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[offset]))
    return out


class Trainer:
    def __init__(self, cfg: TrainConfig, data, checkpoint: Checkpoint | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.triplets = _triplets(data, "train" if cfg.holdout_split else None)
        for t in self.triplets:
            cfg.fusion().check_size(*t.size)
        self.val = _triplets(data, "val") if cfg.holdout_split and cfg.val_every else []
        self.data = Batchable.from_triplets(self.triplets, cfg, dtype)
        self.loss_cfg = cfg.loss()
        self.model = build_model(cfg.fusion(), cfg.seed, dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=cfg.learning_rate,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            foreach=False,
        )
        self.step = 0
        self.history: list[float] = []
        if checkpoint is not None:
            self._restore(checkpoint)

    def _restore(self, ckpt: Checkpoint) -> None:
        diff = {
            k: (a, b)
            for k, (a, b) in ((k, (ckpt.config.to_dict()[k], v)) for k, v in self.cfg.to_dict().items())
            if a != b and k != "steps"
        }
        if diff:
            raise ConfigMismatchError(diff)
        self.model.load_state_dict(ckpt.model_state)
        names = [n for n, _ in self.model.named_parameters()]
        state = self.optimizer.state_dict()
        state["state"] = {
            i: {m: ckpt.optimizer_state[f"{name}/{m}"].clone() for m in MOMENTS}
            for i, name in enumerate(names)
            if f"{name}/step" in ckpt.optimizer_state
        }
        self.optimizer.load_state_dict(state)
        self.step = ckpt.step
        self.history = list(ckpt.history)

    def loss_on(self, idx: list[int]) -> torch.Tensor:
        d = self.data
        pred = self.model(d.cloudy[idx], d.sar[idx])
        return cloud_aware_loss(pred, d.clear[idx], d.weights[idx], self.loss_cfg)

    def full_loss(self) -> float:
        with torch.no_grad():
            return float(self.loss_on(list(range(len(self.data)))))

    def train_step(self) -> float:
        idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, len(self.data))
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.loss_on(idx)
        value = loss.item()
        if not math.isfinite(value):
            norms = {n: float(p.detach().norm()) for n, p in self.model.named_parameters()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
            raise TrainingAborted(
                f"non-finite loss {value} at step {self.step}, batch {[self.data.ids[i] for i in idx]}; "
                f"largest parameter norms {worst}"
            )
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.history.append(value)
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            log.info("step %d loss %.6g", self.step, value)
        if self.cfg.val_every and self.val and self.step % self.cfg.val_every == 0:
            report = evaluate_model(self.model, self.val, self.cfg)
            log.info("step %d val psnr %.3f mae %.5f", self.step, report.psnr_db, report.mae)
        return value

    def run(self, steps: int | None = None) -> list[float]:
        target = self.cfg.steps if steps is None else self.step + steps
        while self.step < target:
            self.train_step()
        return self.history

    def checkpoint(self) -> Checkpoint:
        names = {id(p): n for n, p in self.model.named_parameters()}
        optim = {}
        for p, state in self.optimizer.state.items():
            for m in MOMENTS:
                optim[f"{names[id(p)]}/{m}"] = state[m].detach().clone()
        return Checkpoint(
            config=self.cfg,
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optimizer_state=optim,
            step=self.step,
            sampler={"kind": "epoch-permutation", "seed": self.cfg.seed, "position": self.step * self.cfg.batch_size},
            history=list(self.history),
        )


def train(cfg: TrainConfig, data, resume: Checkpoint | None = None, out=None) -> Checkpoint:
    """Train to ``cfg.steps`` (continuing from ``resume`` if given) and return the checkpoint."""
    trainer = Trainer(cfg, data, resume)
    trainer.run()
    ckpt = trainer.checkpoint()
    if out is not None:
        ckpt.save(out)
    return ckpt


def evaluate_model(model, triplets, cfg: TrainConfig) -> MetricsReport:
    dtype = next(model.parameters()).dtype
    rows = []
    model.eval()
    with torch.no_grad():
        for t in triplets:
            pred = model(
                torch.from_numpy(t.cloudy.bands[None]).to(dtype), torch.from_numpy(t.sar.channels[None]).to(dtype)
            )
            rows.append(patch_metrics(t.id, t.clear.bands, export(pred[0]), cloud_mask_for(t, cfg)))
    model.train()
    return MetricsReport.aggregate(rows)


def evaluate(ckpt: Checkpoint, data) -> MetricsReport:
    """Full-image and cloud-masked metrics per patch plus their means."""
    triplets = _triplets(data)
    fusion = ckpt.config.fusion()
    sizes = sorted({t.size for t in triplets})
    bad = [hw for hw in sizes if hw[0] % fusion.multiple or hw[1] % fusion.multiple]
    if bad:
        raise ConfigMismatchError({"input_multiple": (fusion.multiple, bad)})
    return evaluate_model(ckpt.build_model(), triplets, ckpt.config)


def cloud_region_errors(model, triplets, cfg: TrainConfig) -> dict:
    """Pooled MSE/MAE/PSNR over all cloud pixels of ``triplets``."""
    dtype = next(model.parameters()).dtype
    sq, ab, count = 0.0, 0.0, 0
    with torch.no_grad():
        for t in triplets:
            mask = cloud_mask_for(t, cfg).values.astype(bool)
            if not mask.any():
                continue
            pred = export(
                model(torch.from_numpy(t.cloudy.bands[None]).to(dtype), torch.from_numpy(t.sar.channels[None]).to(dtype))[0]
            )
            err = (pred.astype(np.float64) - t.clear.bands)[:, mask]
            sq += float((err**2).sum())
            ab += float(np.abs(err).sum())
            count += err.size
    if not count:
        raise ValidationError("no cloud pixels in the evaluation data")
    return {"cloud_mse": sq / count, "cloud_mae": ab / count, "cloud_psnr_db": psnr_from_mse(sq / count)}


def ablation_pair(cfg: TrainConfig, data, seeds, eval_data=None) -> dict:
    """Train weighted and uniform-weight arms per seed and compare cloud-region error.

    The arms differ only in ``ablation_uniform_weight``. ``step0_loss`` is the
    weighted objective of the untrained model over the training set; it is
    computed the same way in both arms so equal initialization is visible.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValidationError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    train_set = _triplets(data)
    eval_set = _triplets(eval_data) if eval_data is not None else train_set
    rows, deltas = [], []
    for seed in seeds:
        arms = {}
        for arm, uniform in (("weighted", False), ("uniform", True)):
            arm_cfg = cfg.update(seed=seed, ablation_uniform_weight=uniform)
            trainer = Trainer(arm_cfg, train_set)
            weighted_view = Batchable.from_triplets(train_set, arm_cfg.update(ablation_uniform_weight=False))
            with torch.no_grad():
                pred = trainer.model(weighted_view.cloudy, weighted_view.sar)
                step0 = float(cloud_aware_loss(pred, weighted_view.clear, weighted_view.weights, trainer.loss_cfg))
            trainer.run()
            errors = cloud_region_errors(trainer.model, eval_set, arm_cfg)
            row = {"seed": seed, "arm": arm, "step0_loss": step0, "final_train_loss": trainer.history[-1], **errors}
            rows.append(row)
            arms[arm] = row
            log.info("ablation seed %d arm %s cloud_mae %.5f", seed, arm, errors["cloud_mae"])
        deltas.append(
            {
                "seed": seed,
                "cloud_mae": arms["weighted"]["cloud_mae"] - arms["uniform"]["cloud_mae"],
                "cloud_mse": arms["weighted"]["cloud_mse"] - arms["uniform"]["cloud_mse"],
                "cloud_psnr_db": arms["weighted"]["cloud_psnr_db"] - arms["uniform"]["cloud_psnr_db"],
            }
        )
    weighted_cfg = cfg.update(ablation_uniform_weight=False).to_dict()
    uniform_cfg = cfg.update(ablation_uniform_weight=True).to_dict()
    return {
        "config": weighted_cfg,
        "arm_config_diff": {k: [weighted_cfg[k], uniform_cfg[k]] for k in weighted_cfg if weighted_cfg[k] != uniform_cfg[k]},
        "rows": rows,
        "deltas": deltas,
        "median_delta": {
            key: statistics.median(d[key] for d in deltas) for key in ("cloud_mae", "cloud_mse", "cloud_psnr_db")
        },
        "median_cloud_mae": {
            arm: statistics.median(r["cloud_mae"] for r in rows if r["arm"] == arm) for arm in ("weighted", "uniform")
        },
    }
