"""Alternating generator/discriminator optimization with resumable state.

Every source of data-side randomness (batch sampling, augmentation, control
factor choice) is drawn from one numpy Generator whose state is checkpointed,
so an interrupted run resumed from its checkpoint replays the exact step
sequence of an uninterrupted run.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataio import BlurSample, ReorderedSequence, augment_sample, load_image, read_manifest
from .discriminator import DiscriminatorConfig, UNetDiscriminator
from .errors import InvalidInputError, NumericError
from .generator import DeblurGenerator, GeneratorConfig, expand_control
from .losses import LossWeights, RandomFeaturePyramid, discriminator_loss, generator_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    lr_decay_per_epoch: float = 0.99
    batch_size: int = 8
    crop: int = 256
    scale_range: tuple = (1.0, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if not (0 < self.lr_decay_per_epoch <= 1):
            raise InvalidInputError("lr_decay_per_epoch must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Exponential schedule: lr decays by a fixed factor once per epoch."""
    return cfg.lr * cfg.lr_decay_per_epoch ** epoch


# ---------------------------------------------------------------------------
# experiment config files: flat `key = value` lines
# ---------------------------------------------------------------------------

_TUPLE_KEYS = {"betas", "scale_range"}
_INT_KEYS = {"epochs", "batch_size", "crop", "seed"}


def parse_config_file(path):
    """Parse a flat key/value experiment file into (TrainConfig, LossWeights).

    Keys must match the config field names exactly; anything else is rejected.
    """
    train_fields = {f.name for f in fields(TrainConfig)}
    loss_fields = {f.name for f in fields(LossWeights)}
    train_kwargs, loss_kwargs = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in train_fields:
                train_kwargs[key] = _coerce(key, value)
            elif key in loss_fields:
                loss_kwargs[key] = float(value)
            else:
                raise InvalidInputError(f"{path}:{lineno}: unknown config key {key!r}")
    if "epochs" not in train_kwargs:
        raise InvalidInputError(f"{path}: missing required key 'epochs'")
    return TrainConfig(**train_kwargs), LossWeights(**loss_kwargs)


def _coerce(key, value):
    if key in _TUPLE_KEYS:
        return tuple(float(v) for v in value.split(","))
    if key in _INT_KEYS:
        return int(value)
    return float(value)


def write_config_file(path, cfg: TrainConfig, weights: LossWeights):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in (cfg, weights):
            for key, value in asdict(obj).items():
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

class RecordStore:
    """Manifest-backed sample access with an in-memory image cache."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        self.manifest = read_manifest(self.manifest_path)
        if not self.manifest.records:
            raise InvalidInputError(f"manifest {manifest_path} has no records")
        self.root = self.manifest_path.parent
        self._cache = {}

    def __len__(self):
        return len(self.manifest.records)

    def _image(self, rel):
        if rel not in self._cache:
            self._cache[rel] = load_image(self.root / rel)
        return self._cache[rel]

    def sample(self, index) -> BlurSample:
        rec = self.manifest.records[index]
        gt = ReorderedSequence(
            frames=[self._image(p) for p in rec.gt_paths],
            control_factors=list(rec.control_factors),
            permutation=list(range(1, rec.n_frames + 1)),
        )
        return BlurSample(blur=self._image(rec.blur_path), gt_frames=gt,
                          clip_id=rec.clip_id, n_frames=rec.n_frames)


def draw_batch(store: RecordStore, cfg: TrainConfig, rng):
    """Sample, augment and stack one training batch.

    Consumes the rng in a fixed per-sample order (record index, augmentation,
    control index) so checkpointed rng state replays identically.
    """
    blurs, sharps, us = [], [], []
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(0, len(store)))
        sample = augment_sample(store.sample(idx), rng,
                                scale_range=cfg.scale_range, crop=cfg.crop)
        k = int(rng.integers(0, sample.n_frames))
        blurs.append(sample.blur)
        sharps.append(sample.gt_frames.frames[k])
        us.append(sample.gt_frames.control_factors[k])
    to_tensor = lambda imgs: torch.from_numpy(
        np.stack(imgs).transpose(0, 3, 1, 2).copy())
    return {"blur": to_tensor(blurs), "sharp": to_tensor(sharps),
            "u": torch.tensor(us, dtype=torch.float32)}


def gt_pyramid(sharp):
    """Ground truth at full, half and quarter scale via area averaging."""
    return [sharp, F.avg_pool2d(sharp, 2), F.avg_pool2d(sharp, 4)]


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    gen: DeblurGenerator
    disc: UNetDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    weights: LossWeights
    cfg: TrainConfig
    perceptual: object
    rng: np.random.Generator
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0


def init_state(cfg: TrainConfig, weights: LossWeights,
               gen_config=None, disc_config=None, device="cpu") -> TrainState:
    torch.manual_seed(cfg.seed)
    gen = DeblurGenerator(gen_config or GeneratorConfig()).to(device)
    disc = UNetDiscriminator(disc_config or DiscriminatorConfig()).to(device)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
    return TrainState(
        gen=gen, disc=disc, opt_g=opt_g, opt_d=opt_d,
        weights=weights, cfg=cfg,
        perceptual=RandomFeaturePyramid().to(device),
        rng=np.random.default_rng(cfg.seed),
    )


def _set_lr(state: TrainState, lr):
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr


def _guard_finite(breakdown, total, which):
    bad = [k for k, v in breakdown.items() if not np.isfinite(v)]
    if bad or not torch.isfinite(total):
        raise NumericError(f"non-finite {which} loss; offending terms: {bad or ['total']}")


def train_step(state: TrainState, batch) -> dict:
    """One discriminator update on (real, detached fake), then one generator update."""
    device = next(state.gen.parameters()).device
    blur = batch["blur"].to(device)
    sharp = batch["sharp"].to(device)
    u = batch["u"].to(device)
    h, w = blur.shape[-2:]
    u_2d = expand_control(u, h, w, device=device).squeeze(1)

    outputs = state.gen(blur, u)
    fake = outputs.full

    d_real = state.disc(blur, sharp)
    d_fake = state.disc(blur, fake.detach())
    loss_d, d_terms = discriminator_loss(d_real, d_fake, u_2d, state.weights)
    _guard_finite(d_terms, loss_d, "discriminator")
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    d_fake_for_g = state.disc(blur, fake)
    loss_g, g_terms = generator_loss(
        d_fake_for_g, u_2d, outputs.images, gt_pyramid(sharp),
        state.weights, state.perceptual)
    _guard_finite(g_terms, loss_g, "generator")
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    metrics = {**d_terms, **g_terms}
    metrics["lr"] = state.opt_g.param_groups[0]["lr"]
    return metrics


# ---------------------------------------------------------------------------
# checkpointing of full trainer state
# ---------------------------------------------------------------------------

def save_trainer_checkpoint(path, state: TrainState):
    payload = {
        "schema_version": ckpt.CHECKPOINT_SCHEMA_VERSION,
        "component": "trainer",
        "generator": ckpt.component_payload("generator", state.gen.config, state.gen),
        "discriminator": ckpt.component_payload("discriminator", state.disc.config, state.disc),
        "optim_g": state.opt_g.state_dict(),
        "optim_d": state.opt_d.state_dict(),
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "global_step": state.global_step,
        "numpy_rng_state": state.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
        "train_config": asdict(state.cfg),
        "loss_weights": asdict(state.weights),
    }
    ckpt.save_checkpoint(path, payload)
    return Path(path)


def restore_trainer_checkpoint(path, state: TrainState):
    raw = ckpt.load_raw(path)
    if raw.get("component") != "trainer":
        raise InvalidInputError(f"{path} is not a trainer checkpoint")
    ckpt.load_into(state.gen, path, "generator")
    ckpt.load_into(state.disc, path, "discriminator")
    state.opt_g.load_state_dict(raw["optim_g"])
    state.opt_d.load_state_dict(raw["optim_d"])
    state.epoch = raw["epoch"]
    state.step_in_epoch = raw["step_in_epoch"]
    state.global_step = raw["global_step"]
    state.rng.bit_generator.state = raw["numpy_rng_state"]
    torch.set_rng_state(raw["torch_rng_state"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class MetricsLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def train_loop(manifest_path, cfg: TrainConfig, weights: LossWeights, out_dir,
               gen_config=None, disc_config=None, resume=None, max_steps=None,
               device="cpu", log_every=10) -> Path:
    """Run (or continue) training and return the final checkpoint path.

    ``max_steps`` caps the number of optimization steps of this call, writing
    `ckpt_latest.pt` on interruption so the run can be resumed exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = RecordStore(manifest_path)
    state = init_state(cfg, weights, gen_config, disc_config, device)
    if resume is not None:
        restore_trainer_checkpoint(resume, state)
        log.info("resumed from %s at epoch %d step %d", resume, state.epoch, state.global_step)

    metrics_log = MetricsLog(out_dir / "metrics.jsonl")
    steps_per_epoch = max(1, len(store) // cfg.batch_size)
    latest = out_dir / "ckpt_latest.pt"
    steps_done = 0

    while state.epoch < cfg.epochs:
        _set_lr(state, learning_rate(cfg, state.epoch))
        while state.step_in_epoch < steps_per_epoch:
            if max_steps is not None and steps_done >= max_steps:
                save_trainer_checkpoint(latest, state)
                return latest
            batch = draw_batch(store, cfg, state.rng)
            metrics = train_step(state, batch)
            state.step_in_epoch += 1
            state.global_step += 1
            steps_done += 1
            metrics_log.append({"epoch": state.epoch, "step": state.global_step, **metrics})
            if state.global_step % log_every == 0:
                log.info("epoch %d step %d: pix %.4f adv %.4f",
                         state.epoch, state.global_step, metrics["L_pix"], metrics["L_adv"])
        state.epoch += 1
        state.step_in_epoch = 0
        save_trainer_checkpoint(latest, state)

    final = out_dir / "ckpt_final.pt"
    save_trainer_checkpoint(final, state)
    return final
