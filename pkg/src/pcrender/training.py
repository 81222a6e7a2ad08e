"""Losses, image metrics, and the end-to-end optimization loop.

The loss is w_l2 * mse + w_perc * perceptual with defaults 1 and 0.01. The
perceptual term compares features from a frozen convolutional pyramid; by
default its weights are random but seed-deterministic, which keeps the
multi-scale structure of the loss without any pretrained network (weights
can also be loaded from an RMCK file).

Two optimizer groups (MLP and refinement net) run Adam with learning rates
5e-4 and 1.5e-4, each multiplied by 0.9999 per step (applied in closed form,
lr0 * decay**step). Per-step randomness (view choice, crop) is derived from
(seed, step) alone, so resuming from a checkpoint replays the exact stream.

When fit writes a checkpoint it also reloads the float32-rounded state into
the live models, so a resumed run is bit-identical to an uninterrupted run
with the same checkpoint cadence.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .errors import NumericsError, ShapeError, UsageError, ValidationError
from .rasterizer import RasterConfig, rasterize
from .sampling import EncodingConfig, build_query_batch
from .scene_io import load_rmck, save_checkpoint

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# perceptual loss


@dataclass
class PyramidSpec:
    """Configuration of the frozen feature extractor."""

    channels: tuple = (8, 16, 32)
    kernel: int = 3
    seed: int = 0
    weights_path: str = None


class FeaturePyramid:
    """Frozen convolutional pyramid: conv stride 2 + relu per level."""

    def __init__(self, channels=(8, 16, 32), kernel=3, seed=0):
        rng = np.random.default_rng(seed)
        self.kernel = kernel
        self.layers = []
        c_prev = 3
        for c in channels:
            fan_in = c_prev * kernel * kernel
            w = ad.uniform_init(rng, (c, c_prev, kernel, kernel), fan_in)
            b = ad.uniform_init(rng, (c,), fan_in)
            w.requires_grad = False
            b.requires_grad = False
            self.layers.append((w, b))
            c_prev = c

    @classmethod
    def from_spec(cls, spec):
        if spec.weights_path:
            return cls.from_rmck(spec.weights_path, kernel=spec.kernel)
        return cls(channels=spec.channels, kernel=spec.kernel, seed=spec.seed)

    @classmethod
    def from_rmck(cls, path, kernel=3):
        tensors = load_rmck(path)
        n_levels = sum(1 for name in tensors if name.endswith(".w"))
        pyramid = cls.__new__(cls)
        pyramid.kernel = kernel
        pyramid.layers = []
        for i in range(n_levels):
            w = ad.Tensor(tensors[f"perc.l{i}.w"].astype(np.float64))
            b = ad.Tensor(tensors[f"perc.l{i}.b"].astype(np.float64))
            pyramid.layers.append((w, b))
        return pyramid

    def features(self, image):
        """image: (H, W, 3) tensor in [0,1]; returns one tensor per level."""
        x = ad.permute(image, (2, 0, 1))
        out = []
        pad = self.kernel // 2
        for w, b in self.layers:
            x = ad.relu(ad.conv2d(x, w, b, stride=2, padding=pad))
            out.append(x)
        return out


def perceptual_loss(pred, gt, extractor):
    """Sum of per-level feature MSEs; gradient flows to pred only."""
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"perceptual_loss: {pred.data.shape} vs {gt.data.shape}")
    total = None
    for fp, fg in zip(extractor.features(pred), extractor.features(gt)):
        term = ad.mse(fp, fg)
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class LossConfig:
    w_l2: float = 1.0
    w_perc: float = 0.01
    extractor: PyramidSpec = field(default_factory=PyramidSpec)

    def __post_init__(self):
        if self.w_l2 < 0 or self.w_perc < 0:
            raise ValidationError("loss weights must be >= 0")


def loss_terms(pred, gt, cfg, extractor):
    """(total, l2 value, perceptual value); total is the differentiable one."""
    l2 = ad.mse(pred, gt)
    if cfg.w_perc > 0:
        perc = perceptual_loss(pred, gt, extractor)
        total = ad.add(ad.scale(l2, cfg.w_l2), ad.scale(perc, cfg.w_perc))
        return total, l2.item(), perc.item()
    total = ad.scale(l2, cfg.w_l2)
    return total, l2.item(), 0.0


def total_loss(pred, gt, cfg, extractor=None):
    if extractor is None:
        extractor = FeaturePyramid.from_spec(cfg.extractor)
    return loss_terms(pred, gt, cfg, extractor)[0]


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP_DB = 100.0


def psnr(pred, gt):
    """10 * log10(1 / mse) for [0,1] images, capped at 100 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr: shapes {pred.shape} vs {gt.shape}")
    err = float(((pred - gt) ** 2).mean())
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / err))


def _gaussian_kernel1d(size=11, sigma=1.5):
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img, k):
    from numpy.lib.stride_tricks import sliding_window_view

    out = sliding_window_view(img, len(k), axis=0) @ k
    return sliding_window_view(out, len(k), axis=1) @ k


def ssim(pred, gt, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM over a Gaussian window, on the RGB-mean grayscale."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"ssim: shapes {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        pred = pred.mean(axis=2)
        gt = gt.mean(axis=2)
    if min(pred.shape) < window:
        raise UsageError(f"ssim: image {pred.shape} smaller than {window}x{window} window")
    kern = _gaussian_kernel1d(window, sigma)
    mu1 = _filter_valid(pred, kern)
    mu2 = _filter_valid(gt, kern)
    s11 = _filter_valid(pred * pred, kern) - mu1 * mu1
    s22 = _filter_valid(gt * gt, kern) - mu2 * mu2
    s12 = _filter_valid(pred * gt, kern) - mu1 * mu2
    c1 = k1 * k1
    c2 = k2 * k2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# pipeline plumbing


@dataclass
class Pipeline:
    """The rasterize -> rectify -> encode -> MLP -> scatter -> refine chain."""

    cloud: object
    mlp: mdl.RadianceMLP
    refine: mdl.RefineNet
    raster_cfg: RasterConfig
    enc_cfg: EncodingConfig
    use_rectify: bool = True

    def fragments(self, camera):
        return rasterize(self.cloud, camera, self.raster_cfg)

    def render_from_fragments(self, frag):
        """Predicted (H, W, 3) image tensor for precomputed fragments."""
        batch = build_query_batch(
            frag, self.enc_cfg, cloud=self.cloud, use_rectify=self.use_rectify
        )
        feats = mdl.radiance_forward(self.mlp, batch)
        fmap = mdl.scatter_features(feats, batch.pixel_ids, frag.height, frag.width)
        return mdl.refine_forward_padded(self.refine, fmap)

    def render(self, camera):
        return self.render_from_fragments(self.fragments(camera))

    def param_groups(self):
        return mdl.radiance_params(self.mlp), mdl.refine_params(self.refine)


# ---------------------------------------------------------------------------
# training configuration and state


@dataclass
class TrainConfig:
    lr_mlp: float = 5e-4
    lr_refine: float = 1.5e-4
    lr_decay_per_step: float = 0.9999
    batch_size: int = 1
    max_steps: int = 3000
    window: int = 48
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    scale_augment: tuple = None  # (lo, hi) factors; None disables

    def __post_init__(self):
        if self.lr_mlp <= 0 or self.lr_refine <= 0:
            raise ValidationError("learning rates must be positive")
        if not 0 < self.lr_decay_per_step <= 1:
            raise ValidationError("decay must lie in (0, 1]")
        if self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0")
        if self.window < 16:
            raise ValidationError("window must be at least 16 pixels")


@dataclass
class TrainState:
    step: int = 0
    adam_mlp: ad.AdamState = field(default_factory=ad.AdamState)
    adam_refine: ad.AdamState = field(default_factory=ad.AdamState)
    loss_trace: list = field(default_factory=list)


def step_rng(seed, step):
    """Counter-based per-step RNG: a pure function of (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))


def lr_at(lr0, decay, step):
    """Closed form lr0 * decay**step (equals iterated multiplication)."""
    return lr0 * decay**step


def augment(gt, frag, window, rng):
    """Random axis-aligned crop of the image and pixel-aligned fragments."""
    h, w = gt.shape[:2]
    if window > h or window > w:
        raise UsageError(f"window {window} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - window + 1))
    left = int(rng.integers(0, w - window + 1))
    gt_crop = gt[top : top + window, left : left + window]
    return gt_crop, frag.crop(top, left, window, window), (top, left)


def train_step(state, views, frags, pipeline, loss_cfg, extractor, cfg):
    """One optimization step: sample a view, crop, render, descend.

    views: list of (camera, gt image); frags: matching FragmentBuffers.
    Returns the total loss value. Raises NumericsError on non-finite loss.
    """
    rng = step_rng(cfg.seed, state.step)
    view_id = int(rng.integers(len(views)))
    camera, gt = views[view_id]
    frag = frags[view_id]
    if cfg.scale_augment is not None:
        factor = float(rng.uniform(*cfg.scale_augment))
        camera = camera.scaled(factor)
        # the scaled view needs its own rasterization and ground truth grid
        frag = pipeline.fragments(camera)
        gt = _rescale_nearest(gt, camera.height, camera.width)
    window = min(cfg.window, gt.shape[0], gt.shape[1])
    gt_crop, frag_crop, _ = augment(gt, frag, window, rng)

    with ad.Tape() as tape:
        pred = pipeline.render_from_fragments(frag_crop)
        total, l2_val, perc_val = loss_terms(
            pred, ad.Tensor(gt_crop), loss_cfg, extractor
        )
    loss_val = total.item()
    if not math.isfinite(loss_val):
        raise NumericsError(
            f"non-finite loss {loss_val} at step {state.step} on view {view_id}"
        )
    ad.backward(tape, total)

    mlp_params, refine_params = pipeline.param_groups()
    decay = cfg.lr_decay_per_step
    for params, adam_state, lr0 in (
        (mlp_params, state.adam_mlp, cfg.lr_mlp),
        (refine_params, state.adam_refine, cfg.lr_refine),
    ):
        tensors = list(params.values())
        grads = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
        ]
        ad.adam_step(tensors, grads, adam_state, lr_at(lr0, decay, state.step))
        for t in tensors:
            t.zero_grad()
    state.loss_trace.append((state.step, loss_val, l2_val, perc_val))
    state.step += 1
    return loss_val


def _rescale_nearest(img, new_h, new_w):
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(new_h) * h // new_h), h - 1)
    cols = np.minimum((np.arange(new_w) * w // new_w), w - 1)
    return img[rows[:, None], cols[None, :]]


def evaluate(pipeline, views, frags):
    """Mean PSNR/SSIM over views at full resolution, no augmentation."""
    psnrs, ssims = [], []
    for (camera, gt), frag in zip(views, frags):
        pred = pipeline.render_from_fragments(frag).data
        psnrs.append(psnr(pred, gt))
        ssims.append(ssim(pred, gt))
    if not psnrs:
        return float("nan"), float("nan")
    return float(np.mean(psnrs)), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# checkpoint assembly


def state_tensors(pipeline, state):
    """(params, opt) dicts of float64 arrays describing the live state."""
    mlp_params, refine_params = pipeline.param_groups()
    params = {name: t.data for name, t in {**mlp_params, **refine_params}.items()}
    opt = {}
    for group_name, group, adam_state in (
        ("mlp", mlp_params, state.adam_mlp),
        ("refine", refine_params, state.adam_refine),
    ):
        if adam_state.m:
            for (name, _), m, v in zip(group.items(), adam_state.m, adam_state.v):
                opt[name + ".m"] = m
                opt[name + ".v"] = v
        opt[f"adam.{group_name}.steps"] = np.asarray(
            [float(adam_state.step_count)]
        )
    return params, opt


def load_into(pipeline, state, checkpoint):
    """Restore live parameters and optimizer state from a Checkpoint."""
    mlp_params, refine_params = pipeline.param_groups()
    mdl.set_params({**mlp_params, **refine_params}, checkpoint.params)
    for group_name, group, adam_state in (
        ("mlp", mlp_params, state.adam_mlp),
        ("refine", refine_params, state.adam_refine),
    ):
        key = f"adam.{group_name}.steps"
        if key in checkpoint.opt:
            adam_state.step_count = int(checkpoint.opt[key][0])
        names = list(group)
        if all(n + ".m" in checkpoint.opt for n in names):
            adam_state.m = [
                checkpoint.opt[n + ".m"].astype(np.float64) for n in names
            ]
            adam_state.v = [
                checkpoint.opt[n + ".v"].astype(np.float64) for n in names
            ]
    state.step = checkpoint.step


def write_checkpoint(path, pipeline, state, config_echo):
    """Save the state and round the live copy to its float32 image.

    Reloading the saved bytes into the live models makes resumed runs
    bit-identical to uninterrupted ones (same cadence), since both continue
    from the rounded values.
    """
    params, opt = state_tensors(pipeline, state)
    save_checkpoint(path, params, opt=opt, step=state.step, config=config_echo)
    mlp_params, refine_params = pipeline.param_groups()
    for t in list(mlp_params.values()) + list(refine_params.values()):
        t.data[...] = t.data.astype(np.float32)
    for adam_state in (state.adam_mlp, state.adam_refine):
        for arr in adam_state.m + adam_state.v:
            arr[...] = arr.astype(np.float32)


# ---------------------------------------------------------------------------
# the fit loop


def fit(pipeline, dataset, loss_cfg, train_cfg, out_dir=None, config_echo=None,
        resume_from=None, frag_provider=None):
    """Train for max_steps, periodically evaluating on the test split.

    Writes checkpoint.rmck and metrics.csv under out_dir when given. Returns
    a report dict with the final test metrics and the loss trace.
    """
    from pathlib import Path

    from .scene_io import load_checkpoint

    train_views = dataset.views("train")
    test_views = dataset.views("test")
    if not train_views:
        raise ValidationError("dataset has no training views")

    logger.info("rasterizing %d train + %d test views once",
                len(train_views), len(test_views))
    if frag_provider is None:
        frag_provider = pipeline.fragments
    train_frags = [frag_provider(cam) for cam, _ in train_views]
    test_frags = [frag_provider(cam) for cam, _ in test_views]

    extractor = FeaturePyramid.from_spec(loss_cfg.extractor)
    state = TrainState()
    if resume_from is not None:
        load_into(pipeline, state, load_checkpoint(resume_from))
        logger.info("resumed from %s at step %d", resume_from, state.step)

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_file = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["step", "loss", "l2", "perceptual",
                         "lr_mlp", "lr_refine", "test_psnr", "test_ssim"])

    echo = dict(config_echo or {})
    report = {"eval_history": [], "final_psnr": None, "final_ssim": None}
    t_start = time.time()
    try:
        while state.step < train_cfg.max_steps:
            step_before = state.step
            loss_val = train_step(state, train_views, train_frags, pipeline,
                                  loss_cfg, extractor, train_cfg)
            _, _, l2_val, perc_val = state.loss_trace[-1]
            done = state.step
            ran_eval = (
                train_cfg.eval_every > 0
                and done % train_cfg.eval_every == 0
                and test_views
            )
            test_p = test_s = ""
            if ran_eval:
                test_p, test_s = evaluate(pipeline, test_views, test_frags)
                report["eval_history"].append((done, test_p, test_s))
                logger.info("step %d: loss %.5f, test psnr %.2f dB, ssim %.4f",
                            done, loss_val, test_p, test_s)
            if writer is not None:
                writer.writerow([
                    step_before, f"{loss_val:.10g}", f"{l2_val:.10g}",
                    f"{perc_val:.10g}",
                    f"{lr_at(train_cfg.lr_mlp, train_cfg.lr_decay_per_step, step_before):.10g}",
                    f"{lr_at(train_cfg.lr_refine, train_cfg.lr_decay_per_step, step_before):.10g}",
                    test_p if test_p == "" else f"{test_p:.6f}",
                    test_s if test_s == "" else f"{test_s:.6f}",
                ])
            if (
                out_dir is not None
                and train_cfg.checkpoint_every > 0
                and done % train_cfg.checkpoint_every == 0
            ):
                write_checkpoint(out_dir / "checkpoint.rmck", pipeline, state, echo)

        final_p, final_s = evaluate(pipeline, test_views, test_frags)
        report["final_psnr"] = final_p
        report["final_ssim"] = final_s
        report["loss_trace"] = list(state.loss_trace)
        report["steps"] = state.step
        report["wall_seconds"] = time.time() - t_start
        if writer is not None:
            writer.writerow([
                state.step, "", "", "",
                f"{lr_at(train_cfg.lr_mlp, train_cfg.lr_decay_per_step, state.step):.10g}",
                f"{lr_at(train_cfg.lr_refine, train_cfg.lr_decay_per_step, state.step):.10g}",
                f"{final_p:.6f}", f"{final_s:.6f}",
            ])
        if out_dir is not None:
            write_checkpoint(out_dir / "checkpoint.rmck", pipeline, state, echo)
        logger.info("done: %d steps, final test psnr %.2f dB, ssim %.4f",
                    state.step, final_p, final_s)
    finally:
        if csv_file is not None:
            csv_file.close()
    return report
