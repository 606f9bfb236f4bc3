"""Two-player training loop: segmenter descent, then texture-adversary ascent.

Each batch runs up to two updates. The segmenter step minimizes supervised
loss on both synthesized views plus their consistency divergence, touching
only segmenter parameters. The adversary step re-synthesizes the views with
gradients enabled and ascends consistency plus the two patch-contrastive
terms, touching only the two synthesizers and the patch feature net.

Ablation modes reuse the same loop: modes without an adversary either skip
the second update (erm, cutout, gin keeps supervised-only losses) or replace
it with a fresh random draw of synthesizer weights (gin, no_adversarial).
Loss terms inactive under a mode are reported as exactly zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import (ModelConfig, TrainConfig, TrainMode, config_hash,
                     render_config_text, train_config_from_flat, train_config_to_flat)
from .data import DatasetSplit, Sample, augment, normalize_zscore
from .evaluation import mean_sample_dice
from .losses import LossReport, consistency_loss, supervised_loss
from .mi import PatchFeatureExtractor, contrastive_mi_loss, sample_patch_locations
from .seeding import substream, torch_generator
from .segmenter import Segmenter
from .synthesizer import DomainSynthesizer, StyleNoise, init_synthesizer_, sample_style
from .torchutil import init_parameters_

CHECKPOINT_FORMAT = 1


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


class TrainingDiverged(RuntimeError):
    """Raised when a step stays non-finite after the one LR-halving retry."""


@dataclass
class TrainState:
    """Everything mutable about a run: nets, optimizers, counters, streams."""

    config: TrainConfig
    segmenter: Segmenter
    synth_a: DomainSynthesizer
    synth_b: DomainSynthesizer
    mi_net: PatchFeatureExtractor | None
    opt_seg: torch.optim.Optimizer
    opt_adv: torch.optim.Optimizer | None
    gen_init: torch.Generator
    gen_style: torch.Generator
    rng_view: np.random.Generator  # mix ratios and cutout geometry
    rng_patches: np.random.Generator
    total_steps: int
    step: int = 0
    lr_scale: float = 1.0
    divergence_log: list = field(default_factory=list)


def init_state(config: TrainConfig, total_steps: int) -> TrainState:
    """Build nets and optimizers; all weights come from the init substream."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    m = config.model
    mode = config.train_mode
    gen_init = torch_generator(substream(config.seed, "init"))

    segmenter = Segmenter(m.in_channels, m.num_classes, m.seg_base_width, m.seg_stages)
    init_parameters_(segmenter, gen_init, leaky_slope=0.1)
    synth_a = DomainSynthesizer(m.in_channels, m.synth_hidden_channels, m.synth_num_blocks)
    init_synthesizer_(synth_a, gen_init)
    synth_b = DomainSynthesizer(m.in_channels, m.synth_hidden_channels, m.synth_num_blocks)
    init_synthesizer_(synth_b, gen_init)
    mi_net = None
    if mode.mi_active:
        mi_net = PatchFeatureExtractor(m.in_channels, m.mi_base_width, m.mi_embed_dim)
        init_parameters_(mi_net, gen_init, leaky_slope=0.2)

    betas = (config.adam_beta1, config.adam_beta2)
    opt_seg = torch.optim.Adam(segmenter.parameters(), lr=config.lr, betas=betas)
    opt_adv = None
    if mode.adversary_active:
        adv_params = list(synth_a.parameters()) + list(synth_b.parameters())
        if mi_net is not None:
            adv_params += list(mi_net.parameters())
        opt_adv = torch.optim.Adam(adv_params, lr=config.lr, betas=betas)

    return TrainState(
        config=config,
        segmenter=segmenter,
        synth_a=synth_a,
        synth_b=synth_b,
        mi_net=mi_net,
        opt_seg=opt_seg,
        opt_adv=opt_adv,
        gen_init=gen_init,
        gen_style=torch_generator(substream(config.seed, "style")),
        rng_view=substream(config.seed, "style", "view"),
        rng_patches=substream(config.seed, "patches"),
        total_steps=total_steps,
    )


def current_lr(state: TrainState) -> float:
    """LR for the upcoming step; the linear schedule decays toward zero."""
    factor = 1.0
    if state.config.lr_schedule == "linear":
        factor = max(0.0, 1.0 - state.step / state.total_steps)
    return state.config.lr * factor * state.lr_scale


def _set_lr(opt: torch.optim.Optimizer | None, lr: float) -> None:
    if opt is None:
        return
    for group in opt.param_groups:
        group["lr"] = lr


def _draw_alpha(state: TrainState, batch: int):
    if state.config.alpha_mode == "per_sample":
        return torch.from_numpy(state.rng_view.uniform(size=batch)).float()
    return float(state.rng_view.uniform())


def _draw_style_pair(state: TrainState) -> tuple[StyleNoise, StyleNoise]:
    counts = state.synth_a.channel_counts
    z_a = sample_style(state.gen_style, counts)
    z_b = sample_style(state.gen_style, counts) if state.config.independent_noise else z_a
    return z_a, z_b


def cutout(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Zero one square per image, side uniform in [S/8, S/4] with S = min(H, W)."""
    if images.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] image, got shape {tuple(images.shape)}")
    out = images.clone()
    h, w = images.shape[2], images.shape[3]
    s = min(h, w)
    for i in range(images.shape[0]):
        side = max(1, int(round(rng.uniform(s / 8.0, s / 4.0))))
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        out[i, :, y0:y0 + side, x0:x0 + side] = 0.0
    return out


def _segmenter_views(state: TrainState,
                     images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
    mode = state.config.train_mode
    if mode.dual_view:
        z_a, z_b = _draw_style_pair(state)
        a1 = _draw_alpha(state, images.shape[0])
        a2 = _draw_alpha(state, images.shape[0])
        with torch.no_grad():
            return state.synth_a(images, z_a, a1), state.synth_b(images, z_b, a2)
    if mode is TrainMode.CUTOUT:
        return cutout(images, state.rng_view), None
    return images, None


def _record_divergence(state: TrainState, phase: str, detail: str) -> None:
    state.lr_scale *= 0.5
    state.divergence_log.append({"step": state.step, "phase": phase, "detail": detail})


def train_step_segmenter(state: TrainState, images: torch.Tensor,
                         labels: torch.Tensor) -> LossReport:
    """One descent update of the segmenter; synthesizer weights are untouched.

    A non-finite loss aborts the update, halves the LR, and retries once with
    fresh style draws; a second failure raises TrainingDiverged.
    """
    cfg = state.config
    mode = cfg.train_mode
    for attempt in (0, 1):
        _set_lr(state.opt_seg, current_lr(state))
        x1, x2 = _segmenter_views(state, images)
        pred1 = state.segmenter(x1)
        sup_1 = cfg.weight_sup * supervised_loss(pred1, labels, cfg.dice_loss_weight)
        zero = sup_1.new_zeros(())
        sup_2 = zero
        cons = zero
        if x2 is not None:
            pred2 = state.segmenter(x2)
            sup_2 = cfg.weight_sup * supervised_loss(pred2, labels, cfg.dice_loss_weight)
            if mode.consistency_active:
                cons = cfg.weight_cons * consistency_loss(pred1, pred2)
        total = sup_1 + sup_2 + cons
        if torch.isfinite(total):
            state.opt_seg.zero_grad(set_to_none=True)
            total.backward()
            state.opt_seg.step()
            return LossReport.build(_scalar(sup_1), _scalar(sup_2), _scalar(cons), 0.0, 0.0)
        _record_divergence(state, "segmenter",
                           f"attempt {attempt}: loss {_scalar(total)!r}")
    raise TrainingDiverged(
        f"segmenter loss non-finite at step {state.step} after LR halving; "
        f"log: {state.divergence_log[-2:]}")


def train_step_adversary(state: TrainState, images: torch.Tensor) -> LossReport:
    """One ascent update of the synthesizers (and patch net in full mode).

    Re-synthesizes both views with gradients on, freezes the segmenter's
    parameters for the backward pass, and descends the negated objective.
    Gradients are clipped by global norm before the update.
    """
    cfg = state.config
    mode = cfg.train_mode
    if not mode.adversary_active:
        raise ValueError(f"adversary step is inactive in mode {mode.value!r}")
    if state.opt_adv is None:
        raise ValueError("state has no adversary optimizer")

    seg_params = [p for p in state.segmenter.parameters() if p.requires_grad]
    for p in seg_params:
        p.requires_grad_(False)
    try:
        for attempt in (0, 1):
            _set_lr(state.opt_adv, current_lr(state))
            z_a, z_b = _draw_style_pair(state)
            a1 = _draw_alpha(state, images.shape[0])
            a2 = _draw_alpha(state, images.shape[0])
            x1 = state.synth_a(images, z_a, a1)
            x2 = state.synth_b(images, z_b, a2)
            cons = cfg.weight_cons * consistency_loss(state.segmenter(x1),
                                                      state.segmenter(x2))
            zero = cons.new_zeros(())
            mi_1 = zero
            mi_2 = zero
            if mode.mi_active:
                hw = state.mi_net.feature_hw(images.shape[2], images.shape[3])
                loc = sample_patch_locations(hw, cfg.num_patches, state.rng_patches)
                f_src = state.mi_net(images, loc)
                mi_1 = cfg.weight_mi * contrastive_mi_loss(
                    f_src, state.mi_net(x1, loc), cfg.tau, cfg.literal_mi_negatives)
                mi_2 = cfg.weight_mi * contrastive_mi_loss(
                    f_src, state.mi_net(x2, loc), cfg.tau, cfg.literal_mi_negatives)
            objective = cons + mi_1 + mi_2
            if torch.isfinite(objective):
                state.opt_adv.zero_grad(set_to_none=True)
                (-objective).backward()
                if cfg.grad_clip > 0:
                    params = [p for g in state.opt_adv.param_groups for p in g["params"]]
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                state.opt_adv.step()
                return LossReport.build(0.0, 0.0, _scalar(cons), _scalar(mi_1), _scalar(mi_2))
            _record_divergence(state, "adversary",
                               f"attempt {attempt}: objective {_scalar(objective)!r}")
        raise TrainingDiverged(
            f"adversary objective non-finite at step {state.step} after LR halving; "
            f"log: {state.divergence_log[-2:]}")
    finally:
        for p in seg_params:
            p.requires_grad_(True)


def refresh_synthesizers_(state: TrainState) -> None:
    """Redraw both synthesizers' weights; the random-synthesis ablations call
    this where the adversary step would have run."""
    init_synthesizer_(state.synth_a, state.gen_init)
    init_synthesizer_(state.synth_b, state.gen_init)


@dataclass
class Checkpoint:
    """A scored snapshot; holds either a path on disk or an in-memory blob."""

    step: int
    val_dice: float
    path: Path | None = None
    blob: dict | None = None


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    step: int
    val_dice: float
    segmenter: Segmenter
    synth_a: DomainSynthesizer
    synth_b: DomainSynthesizer
    mi_net: PatchFeatureExtractor | None


def _cloned_state_dict(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _checkpoint_blob(state: TrainState, val_dice: float, clone: bool) -> dict:
    grab = _cloned_state_dict if clone else (lambda m: m.state_dict())
    flat = train_config_to_flat(state.config)
    return {
        "format_version": CHECKPOINT_FORMAT,
        "config": flat,
        "config_hash": config_hash(flat),
        "step": state.step,
        "val_dice": float(val_dice),
        "segmenter": grab(state.segmenter),
        "synth_a": grab(state.synth_a),
        "synth_b": grab(state.synth_b),
        "mi_net": grab(state.mi_net) if state.mi_net is not None else None,
    }


def save_checkpoint(state: TrainState, val_dice: float, path: str | Path) -> Checkpoint:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(_checkpoint_blob(state, val_dice, clone=False), path)
    return Checkpoint(step=state.step, val_dice=float(val_dice), path=path)


def _read_blob(path: Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except OSError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(source: str | Path | Checkpoint) -> LoadedCheckpoint:
    """Rebuild the nets recorded in a checkpoint; weights load onto CPU."""
    if isinstance(source, Checkpoint):
        blob = source.blob
        if blob is None:
            if source.path is None:
                raise ValueError("checkpoint has neither blob nor path")
            blob = _read_blob(source.path)
    else:
        blob = _read_blob(Path(source))
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {version!r}, "
                         f"expected {CHECKPOINT_FORMAT}")
    config = train_config_from_flat(blob["config"])
    m = config.model
    segmenter = Segmenter(m.in_channels, m.num_classes, m.seg_base_width, m.seg_stages)
    segmenter.load_state_dict(blob["segmenter"])
    synth_a = DomainSynthesizer(m.in_channels, m.synth_hidden_channels, m.synth_num_blocks)
    synth_a.load_state_dict(blob["synth_a"])
    synth_b = DomainSynthesizer(m.in_channels, m.synth_hidden_channels, m.synth_num_blocks)
    synth_b.load_state_dict(blob["synth_b"])
    mi_net = None
    if blob.get("mi_net") is not None:
        mi_net = PatchFeatureExtractor(m.in_channels, m.mi_base_width, m.mi_embed_dim)
        mi_net.load_state_dict(blob["mi_net"])
    return LoadedCheckpoint(config=config, step=int(blob["step"]),
                            val_dice=float(blob["val_dice"]), segmenter=segmenter,
                            synth_a=synth_a, synth_b=synth_b, mi_net=mi_net)


def select_checkpoint(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Best validation Dice; ties go to the later step."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    return max(checkpoints, key=lambda c: (c.val_dice, c.step))


def _assemble_batch(samples: list[Sample], idx: np.ndarray, epoch: int,
                    config: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, masks = [], []
    for i in idx:
        s = samples[int(i)]
        if config.augment_enabled:
            # keyed by (epoch, sample index): reproducible under any loader layout
            s = augment(s, substream(config.seed, "augment", epoch, int(i)), config.augment)
        else:
            s = Sample(image=normalize_zscore(s.image), mask=s.mask,
                       domain_tag=s.domain_tag, volume_id=s.volume_id)
        imgs.append(s.image)
        masks.append(s.mask)
    images = torch.from_numpy(np.stack(imgs)).float().unsqueeze(1)
    labels = torch.from_numpy(np.stack(masks).astype(np.int64))
    return images, labels


def run_training(config: TrainConfig, split: DatasetSplit,
                 out_dir: str | Path | None = None) -> list[Checkpoint]:
    """Full training run; returns the scored checkpoints in step order.

    With `out_dir` set, writes `config.txt`, a JSONL metrics log (one record
    per step plus validation and divergence events), and checkpoint files.
    Without it, checkpoints stay in memory. Validation scores the source-val
    split every `val_every` steps, or at each epoch end when it is zero.
    """
    if not split.train:
        raise ValueError("training split is empty")
    if not split.val:
        raise ValueError("validation split is empty")
    mode = config.train_mode
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(split.train) / bs)
    total_steps = config.epochs * steps_per_epoch
    state = init_state(config, total_steps)
    rng_data = substream(config.seed, "data")

    root = Path(out_dir) if out_dir is not None else None
    metrics = None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.txt").write_text(render_config_text(train_config_to_flat(config)))
        metrics = open(root / "metrics.jsonl", "w")

    def emit(record: dict) -> None:
        if metrics is not None:
            metrics.write(json.dumps(record, sort_keys=True) + "\n")

    def validate_now() -> Checkpoint:
        dice = mean_sample_dice(state.segmenter, split.val, batch_size=bs)
        emit({"event": "val", "step": state.step, "val_dice": dice})
        if root is not None:
            return save_checkpoint(state, dice,
                                   root / "checkpoints" / f"step{state.step:06d}.pt")
        return Checkpoint(step=state.step, val_dice=dice,
                          blob=_checkpoint_blob(state, dice, clone=True))

    checkpoints: list[Checkpoint] = []
    zero_report = LossReport.build()
    try:
        for epoch in range(config.epochs):
            perm = rng_data.permutation(len(split.train))
            for b in range(steps_per_epoch):
                idx = perm[b * bs:(b + 1) * bs]
                images, labels = _assemble_batch(split.train, idx, epoch, config)
                logged = len(state.divergence_log)
                seg_report = train_step_segmenter(state, images, labels)
                if mode.adversary_active:
                    adv_report = train_step_adversary(state, images)
                else:
                    if mode.rerandomize_synthesizers:
                        refresh_synthesizers_(state)
                    adv_report = zero_report
                for event in state.divergence_log[logged:]:
                    emit({"event": "divergence", **event})
                merged = LossReport.build(seg_report.sup_1, seg_report.sup_2,
                                          seg_report.cons, adv_report.mi_1,
                                          adv_report.mi_2)
                emit({"step": state.step, "lr": current_lr(state), **merged.as_dict()})
                state.step += 1
                if config.val_every and state.step % config.val_every == 0:
                    checkpoints.append(validate_now())
            if not config.val_every:
                checkpoints.append(validate_now())
        if config.val_every and (not checkpoints or checkpoints[-1].step != state.step):
            checkpoints.append(validate_now())
    finally:
        if metrics is not None:
            metrics.close()
    return checkpoints
