"""Training loop for the three regimes: supervised, plain L2, and curious.

The curious regime alternates one critic update with one generator update
per step; the generator minimizes lambda_img * MSE plus lambda_c times the
non-saturating critic term.  Gradients accumulate over micro-batches and
are jointly clipped before each Adam step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from . import render as rn
from .errors import (
    CapabilityError,
    CountMismatch,
    FormatError,
    InvalidConfig,
    NumericError,
    ShapeMismatch,
)
from .nn import (
    Critic,
    Encoder,
    Heads,
    NetworkConfig,
    SceneCode,
    build_critic,
    build_encoder,
    build_heads,
    collect_grads,
    encode,
)
from .rng import derive_rng

_TRAIN_STREAM = 3

MODES = ("supervised", "noncur", "curious")

_LOG_COLUMNS = ("epoch", "split", "image_mse", "d_loss", "g_loss", "eq1_error")

_CKPT_HEADER = "curioscene-ckpt 1"


@dataclass
class TrainConfig:
    mode: str = "curious"
    supervision_frac: float = 1.0
    batch_size: int = 128
    virtual_batch: int = 32
    gen_lr: float = 1e-4
    critic_lr: float = 1e-6
    image_loss_weight: float = 0.01
    critic_loss_weight: float = 10.0
    grad_clip: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 200
    convergence_threshold: float = 0.01
    convergence_window: int = 20
    val_images: int = 100
    checkpoint_every: int = 25
    blur: bool = False
    blur_sigma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.supervision_frac <= 1.0:
            raise InvalidConfig(
                f"supervision_frac must be in (0, 1], got {self.supervision_frac}"
            )
        if self.batch_size < 1 or self.virtual_batch < 1:
            raise InvalidConfig("batch sizes must be positive")
        if self.batch_size % self.virtual_batch != 0:
            raise InvalidConfig(
                f"virtual_batch {self.virtual_batch} must divide batch_size {self.batch_size}"
            )
        for name in ("image_loss_weight", "critic_loss_weight", "grad_clip"):
            if getattr(self, name) < 0.0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.gen_lr <= 0.0 or self.critic_lr <= 0.0:
            raise InvalidConfig("learning rates must be positive")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if not 0.0 < self.convergence_threshold < 1.0:
            raise InvalidConfig("convergence_threshold is a relative improvement in (0, 1)")
        if self.convergence_window < 1 or self.val_images < 1:
            raise InvalidConfig("convergence_window and val_images must be >= 1")


@dataclass
class TrainState:
    """Everything the loop mutates; checkpoints are snapshots of this."""

    world: object
    net_cfg: NetworkConfig
    encoder: Encoder
    heads: Heads
    critic: Critic | None
    opt_gen: ad.Adam
    opt_critic: ad.Adam | None
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = 0


def network_for_world(
    world,
    image_size: int,
    width_scale: float = 0.5,
    latent_dim: int = 64,
) -> NetworkConfig:
    """Network sizes matching a world: heads mirror its parameter groups."""
    heads = {"center"}
    if "color" in world.groups:
        heads.add("rgb")
    if "rotation" in world.groups:
        heads.add("rotation")
    if "confidence" in world.groups:
        heads.add("confidence")
    if "light" in world.groups:
        heads.add("light")
    return NetworkConfig(
        image_size=image_size,
        width_scale=width_scale,
        latent_dim=latent_dim,
        n_proposals=world.object_count[1],
        enabled_heads=frozenset(heads),
        center_dim=world.dims,
    )


def init_state(world, net_cfg: NetworkConfig, config: TrainConfig) -> TrainState:
    """Fresh networks and optimizers; the critic exists only in curious mode."""
    config.validate()
    net_cfg.validate()
    encoder = build_encoder(net_cfg, config.seed)
    heads = build_heads(net_cfg, config.seed)
    critic = build_critic(net_cfg, config.seed) if config.mode == "curious" else None
    opt_gen = ad.Adam(config.gen_lr, config.beta1, config.beta2)
    opt_critic = ad.Adam(config.critic_lr, config.beta1, config.beta2) if critic else None
    return TrainState(world, net_cfg, encoder, heads, critic, opt_gen, opt_critic)


# -- losses ------------------------------------------------------------


def l2_image_loss(rendered, target):
    """Mean squared pixel error; a Tensor when `rendered` is on a tape."""
    shape_r = rendered.data.shape if isinstance(rendered, ad.Tensor) else np.shape(rendered)
    shape_t = target.data.shape if isinstance(target, ad.Tensor) else np.shape(target)
    if shape_r != shape_t:
        raise ShapeMismatch(f"image shapes differ: {shape_r} vs {shape_t}")
    if isinstance(rendered, ad.Tensor):
        return ad.mse(rendered, target)
    return float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))


def critic_losses(critic, real_batch, fake_batch, tape=None, handles=None, training=False):
    """(d_loss, g_loss) tensors for one real/fake batch pair.

    d_loss sees the fakes detached, so its gradient stays inside the critic;
    g_loss runs the attached fakes and is what the generator descends.
    """
    real_shape = real_batch.data.shape if isinstance(real_batch, ad.Tensor) else np.shape(real_batch)
    fake_shape = fake_batch.data.shape if isinstance(fake_batch, ad.Tensor) else np.shape(fake_batch)
    if len(real_shape) != 4 or len(fake_shape) != 4 or real_shape[1:] != fake_shape[1:]:
        raise ShapeMismatch(f"batch shapes differ: {real_shape} vs {fake_shape}")
    if real_shape[0] == 0 or fake_shape[0] == 0:
        raise ShapeMismatch("critic batches must be nonempty")
    tape = tape or ad.Tape()
    handles = handles if handles is not None else critic.lift(tape)
    logits_real = critic.forward(tape, handles, real_batch, training)
    if isinstance(fake_batch, ad.Tensor):
        detached = tape.constant(fake_batch.data)
        logits_fake_d = critic.forward(tape, handles, detached, training)
        logits_fake_g = critic.forward(tape, handles, fake_batch, training)
    else:
        logits_fake_d = critic.forward(tape, handles, fake_batch, training)
        logits_fake_g = logits_fake_d
    d_loss = ad.bce_with_logits(logits_real, 1.0) + ad.bce_with_logits(logits_fake_d, 0.0)
    g_loss = ad.bce_with_logits(logits_fake_g, 1.0)
    return d_loss, g_loss


def supervised_loss(pred, gt: SceneCode, weights: mt.MetricWeights | None = None):
    """Assignment-based parameter distance, shared with the eval metric.

    `pred` may be a SceneCode or a dict of tensors straight from the heads;
    the assignment always runs on detached positions.
    """
    weights = weights or mt.MetricWeights()
    weights.validate()
    pred_vals = mt.code_values(pred) if isinstance(pred, SceneCode) else dict(pred)
    centers = pred_vals["centers"]
    pos = centers.data if isinstance(centers, ad.Tensor) else np.asarray(centers)
    if len(pos) != gt.n_objects:
        raise CountMismatch(f"{len(pos)} predictions vs {gt.n_objects} objects")
    perm = mt.optimal_assignment(pos, gt.centers)
    gt_vals = mt.code_values(gt)
    common = {k: v for k, v in pred_vals.items() if k in gt_vals}
    total = mt.eq1_total(common, gt_vals, perm, weights)
    return total if isinstance(total, ad.Tensor) else float(total)


# -- gaussian blur hook ------------------------------------------------


def _blur_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise InvalidConfig(f"kernel_size must be odd and positive, got {kernel_size}")
    if sigma <= 0.0:
        raise InvalidConfig(f"sigma must be positive, got {sigma}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    if n < pad + 1:
        raise InvalidConfig(f"image extent {n} too small for reflect pad {pad}")
    return np.concatenate(
        [np.arange(pad, 0, -1), np.arange(n), np.arange(n - 2, n - 2 - pad, -1)]
    )


def gaussian_blur(image, kernel_size: int = 9, sigma: float = 2.0):
    """Gaussian low-pass with reflect padding; optional critic preprocessing.

    Accepts (H, W), (C, H, W), or (B, C, H, W) arrays, or a tape tensor of
    rank 3 or 4 (kept differentiable via gather + convolution).
    """
    g = _blur_kernel(kernel_size, sigma)
    if isinstance(image, ad.Tensor):
        return _blur_tensor(image, g)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 2:
        raise ShapeMismatch(f"need at least (H, W), got {img.shape}")
    pad = kernel_size // 2
    _reflect_indices(img.shape[-1], pad)
    _reflect_indices(img.shape[-2], pad)
    widths = [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(img, widths, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel_size, kernel_size), axis=(-2, -1))
    return np.tensordot(windows, np.outer(g, g), axes=([-2, -1], [0, 1]))


def _blur_tensor(image: ad.Tensor, g: np.ndarray) -> ad.Tensor:
    squeeze = image.data.ndim == 3
    x = image.reshape(1, *image.data.shape) if squeeze else image
    if x.data.ndim != 4:
        raise ShapeMismatch(f"need (C, H, W) or (B, C, H, W), got {image.data.shape}")
    b, c, h, w = x.data.shape
    pad = (len(g) - 1) // 2
    rows = _reflect_indices(h, pad)
    cols = _reflect_indices(w, pad)
    x = x[:, :, rows][:, :, :, cols]
    flat = x.reshape(b * c, 1, h + 2 * pad, w + 2 * pad)
    kernel = image.tape.constant(np.outer(g, g)[None, None])
    out = ad.conv2d(flat, kernel).reshape(b, c, h, w)
    return out.reshape(c, h, w) if squeeze else out


# -- one optimization step ---------------------------------------------


def _micro_slices(batch_size: int, virtual_batch: int):
    return [slice(i, i + virtual_batch) for i in range(0, batch_size, virtual_batch)]


def _gen_params(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"encoder.{k}": v for k, v in state.encoder.params.items()}
    out.update({f"heads.{k}": v for k, v in state.heads.params.items()})
    return out


def _render_batch_tensors(state: TrainState, tape, outputs, count: int) -> ad.Tensor:
    world = state.world
    size = state.net_cfg.image_size
    frames = []
    for i in range(count):
        values = {key: outputs[key][i] for key in outputs}
        frames.append(rn.render_scene(tape, values, world, size))
    return ad.stack(frames, axis=0)


def _render_codes(state: TrainState, images: np.ndarray) -> np.ndarray:
    """Eval-mode re-renders of the current predictions, as plain arrays."""
    codes = encode(images, state.encoder, state.heads)
    size = state.net_cfg.image_size
    tape = ad.Tape()
    return np.stack(
        [rn.render_scene(tape, code, state.world, size).data for code in codes]
    )


def train_step(state: TrainState, batch: dict, config: TrainConfig, frozen_norm: bool = False) -> dict:
    """One full step: critic update (curious only), then generator update.

    Gradients accumulate over virtual micro-batches; the generator's are
    clipped to config.grad_clip before Adam.  With frozen_norm, batch
    normalization runs in eval mode so micro-batching cannot change stats.
    """
    images = np.asarray(batch["images"], dtype=np.float64)
    if images.shape[0] != config.batch_size:
        raise InvalidConfig(
            f"batch has {images.shape[0]} images, config.batch_size is {config.batch_size}"
        )
    training = not frozen_norm
    slices = _micro_slices(config.batch_size, config.virtual_batch)
    metrics = {"image_mse": None, "d_loss": None, "g_loss": None, "grad_norm": None}

    if config.mode == "curious":
        grads_acc: dict[str, np.ndarray] = {}
        d_vals = []
        for sl in slices:
            real = images[sl]
            fakes = _render_codes(state, real)
            if config.blur:
                real = gaussian_blur(real, sigma=config.blur_sigma)
                fakes = gaussian_blur(fakes, sigma=config.blur_sigma)
            tape = ad.Tape()
            handles = state.critic.lift(tape)
            d_loss, _ = critic_losses(
                state.critic, real, fakes, tape=tape, handles=handles, training=training
            )
            grads = collect_grads(handles, tape.backward(d_loss))
            _accumulate(grads_acc, grads)
            d_vals.append(float(d_loss.data))
        _scale(grads_acc, 1.0 / len(slices))
        state.opt_critic.step(state.critic.params, grads_acc)
        metrics["d_loss"] = float(np.mean(d_vals))

    grads_acc = {}
    g_vals = []
    mse_vals = []
    for sl in slices:
        real = images[sl]
        tape = ad.Tape()
        enc_handles = state.encoder.lift(tape)
        head_handles = state.heads.lift(tape)
        latent = state.encoder.forward(tape, enc_handles, real, training)
        outputs = state.heads.forward(tape, head_handles, latent, training)
        if config.mode == "supervised":
            labels = batch["labels"][sl]
            terms = []
            for i, gt in enumerate(labels):
                values = {key: outputs[key][i] for key in outputs}
                terms.append(supervised_loss(values, gt))
            loss = _mean_terms(terms)
        else:
            fakes = _render_batch_tensors(state, tape, outputs, real.shape[0])
            img_loss = l2_image_loss(fakes, real)
            mse_vals.append(float(img_loss.data))
            loss = img_loss * config.image_loss_weight
            if config.mode == "curious":
                frozen = {k: tape.constant(v) for k, v in state.critic.params.items()}
                critic_in = fakes
                if config.blur:
                    critic_in = gaussian_blur(fakes, sigma=config.blur_sigma)
                # Training-mode stats here as well: the generator must see the
                # same critic view the critic update just trained, or the
                # curiosity gradient reads from stale running statistics.
                logits = state.critic.forward(tape, frozen, critic_in, training)
                loss = loss + ad.bce_with_logits(logits, 1.0) * config.critic_loss_weight
        handles = {f"encoder.{k}": t for k, t in enc_handles.items()}
        handles.update({f"heads.{k}": t for k, t in head_handles.items()})
        grads = collect_grads(handles, tape.backward(loss))
        _accumulate(grads_acc, grads)
        g_vals.append(float(loss.data))
    _scale(grads_acc, 1.0 / len(slices))
    metrics["grad_norm"] = ad.clip_grad_l2(grads_acc, config.grad_clip)
    state.opt_gen.step(_gen_params(state), grads_acc)
    metrics["g_loss"] = float(np.mean(g_vals))
    if mse_vals:
        metrics["image_mse"] = float(np.mean(mse_vals))
    return metrics


def _mean_terms(terms: list) -> ad.Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _accumulate(acc: dict, grads: dict) -> None:
    for name, g in grads.items():
        if name in acc:
            acc[name] = acc[name] + g
        else:
            acc[name] = np.array(g, dtype=np.float64)


def _scale(acc: dict, factor: float) -> None:
    for g in acc.values():
        g *= factor


# -- the loop ----------------------------------------------------------


def _validation_metrics(state: TrainState, dataset, config: TrainConfig) -> dict:
    indices = dataset.split["val"][: config.val_images]
    images = dataset.images[indices]
    codes = encode(images, state.encoder, state.heads)
    size = state.net_cfg.image_size
    tape = ad.Tape()
    renders = np.stack(
        [rn.render_scene(tape, code, state.world, size).data for code in codes]
    )
    out = {"image_mse": float(np.mean((renders - images) ** 2)), "eq1_error": None}
    if dataset.labels_allowed:
        variable = state.world.object_count[0] != state.world.object_count[1]
        errors = []
        for code, index in zip(codes, indices):
            record = mt.evaluate_pair(
                code, dataset.label(int(index)), variable_count=variable
            )
            if record["param_error"] is not None:
                errors.append(record["param_error"])
        if errors:
            out["eq1_error"] = float(np.mean(errors))
    return out


def train(
    dataset,
    world,
    config: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    state: TrainState | None = None,
    log_path=None,
    checkpoint_path=None,
) -> tuple[TrainState, list[dict]]:
    """Run to convergence or max_epochs; returns final state and log rows.

    Convergence: no relative improvement >= convergence_threshold of the
    running-best validation image MSE for convergence_window epochs.
    """
    config.validate()
    if world.name != dataset.spec.name:
        raise InvalidConfig(f"dataset is for {dataset.spec.name!r}, not {world.name!r}")
    if state is None:
        net_cfg = net_cfg or network_for_world(world, dataset.image_size)
        state = init_state(world, net_cfg, config)
    if state.net_cfg.image_size != dataset.image_size:
        raise InvalidConfig(
            f"network expects {state.net_cfg.image_size}px images, "
            f"dataset has {dataset.image_size}px"
        )

    train_idx = np.array(dataset.split["train"])
    if config.mode == "supervised":
        n_labeled = max(1, int(round(config.supervision_frac * len(train_idx))))
        train_idx = train_idx[:n_labeled]
        if world.object_count[0] != world.object_count[1]:
            raise InvalidConfig(
                "supervised training needs a fixed object count; "
                f"world {world.name!r} has {world.object_count}"
            )
    steps_per_epoch = len(train_idx) // config.batch_size
    if steps_per_epoch == 0:
        raise InvalidConfig(
            f"batch_size {config.batch_size} exceeds the {len(train_idx)} usable "
            "training images"
        )

    rows: list[dict] = []
    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        order = derive_rng(config.seed, _TRAIN_STREAM, epoch).permutation(len(train_idx))
        reads_before = dataset.label_reads
        step_metrics = []
        for step in range(steps_per_epoch):
            chosen = train_idx[order[step * config.batch_size : (step + 1) * config.batch_size]]
            batch: dict = {"images": dataset.images[chosen]}
            if config.mode == "supervised":
                batch["labels"] = [dataset.label(int(i)) for i in chosen]
            try:
                step_metrics.append(train_step(state, batch, config))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
        if config.mode != "supervised" and dataset.label_reads != reads_before:
            raise CapabilityError(
                f"{config.mode} training read labels during epoch {epoch}"
            )
        state.epoch = epoch
        rows.append({"epoch": epoch, "split": "train", **_mean_metrics(step_metrics)})
        val = _validation_metrics(state, dataset, config)
        rows.append(
            {
                "epoch": epoch,
                "split": "val",
                "image_mse": val["image_mse"],
                "d_loss": None,
                "g_loss": None,
                "eq1_error": val["eq1_error"],
            }
        )
        if val["image_mse"] < state.best_val * (1.0 - config.convergence_threshold):
            state.best_val = val["image_mse"]
            state.best_epoch = epoch
        converged = epoch - state.best_epoch >= config.convergence_window
        if checkpoint_path and (epoch % config.checkpoint_every == 0 or converged):
            save_checkpoint(checkpoint_path, state, config)
        if converged:
            break
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, config)
    if log_path:
        append_log(log_path, rows)
    return state, rows


def _mean_metrics(step_metrics: list[dict]) -> dict:
    out = {}
    for key in ("image_mse", "d_loss", "g_loss"):
        vals = [m[key] for m in step_metrics if m[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["eq1_error"] = None
    return out


def append_log(path, rows: list[dict]) -> None:
    """CSV rows (epoch, split, image_mse, d_loss, g_loss, eq1_error)."""
    import os

    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(_LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                ["" if row.get(col) is None else row[col] for col in _LOG_COLUMNS]
            )


# -- checkpoints -------------------------------------------------------


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    """Single-file snapshot: text header, blank line, one parameter block."""
    cfg = state.net_cfg
    lines = [
        _CKPT_HEADER,
        f"mode={config.mode}",
        f"world={state.world.name}",
        f"epoch={state.epoch}",
        f"seed={config.seed}",
        f"best_val={state.best_val!r}",
        f"best_epoch={state.best_epoch}",
        f"image_size={cfg.image_size}",
        f"width_scale={cfg.width_scale!r}",
        f"latent_dim={cfg.latent_dim}",
        f"n_proposals={cfg.n_proposals}",
        "enabled_heads=" + ",".join(sorted(cfg.enabled_heads)),
        f"center_dim={cfg.center_dim}",
    ]
    arrays: dict[str, np.ndarray] = {}
    for prefix, net in (("encoder", state.encoder), ("heads", state.heads)):
        for name, arr in net.state_arrays().items():
            arrays[f"{prefix}.{name}"] = arr
    for name, arr in state.opt_gen.state_arrays().items():
        arrays[f"opt_gen.{name}"] = arr
    if state.critic is not None:
        for name, arr in state.critic.state_arrays().items():
            arrays[f"critic.{name}"] = arr
        for name, arr in state.opt_critic.state_arrays().items():
            arrays[f"opt_critic.{name}"] = arr
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        ad.save_param_block(fh, arrays)


def load_checkpoint(path, config: TrainConfig | None = None) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from disk; returns (state, meta).

    Optimizer learning rates come from `config` (they are not stored), so
    pass the same TrainConfig when resuming.
    """
    from . import worlds

    with open(path, "rb") as fh:
        lines = []
        while True:
            raw = fh.readline()
            if not raw:
                raise FormatError("truncated checkpoint: no parameter block")
            text = raw.decode("utf-8").rstrip("\n")
            if not text:
                break
            lines.append(text)
        arrays = ad.load_param_block(fh)
    if not lines or lines[0] != _CKPT_HEADER:
        raise FormatError(f"not a training checkpoint: {lines[:1]}")
    meta = {}
    for line in lines[1:]:
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"malformed checkpoint header line {line!r}")
        meta[key] = val
    try:
        net_cfg = NetworkConfig(
            image_size=int(meta["image_size"]),
            width_scale=float(meta["width_scale"]),
            latent_dim=int(meta["latent_dim"]),
            n_proposals=int(meta["n_proposals"]),
            enabled_heads=frozenset(meta["enabled_heads"].split(",")),
            center_dim=int(meta["center_dim"]),
        )
        mode = meta["mode"]
        world = worlds.get_world(meta["world"])
        epoch = int(meta["epoch"])
    except KeyError as exc:
        raise FormatError(f"checkpoint header is missing {exc}") from exc
    net_cfg.validate()

    if config is None:
        config = TrainConfig(mode=mode, seed=int(meta["seed"]))
    encoder = build_encoder(net_cfg, config.seed)
    heads = build_heads(net_cfg, config.seed)
    encoder.load_state(_sub_block(arrays, "encoder."))
    heads.load_state(_sub_block(arrays, "heads."))
    opt_gen = ad.Adam(config.gen_lr, config.beta1, config.beta2)
    opt_gen.load_state(_sub_block(arrays, "opt_gen."))
    critic = None
    opt_critic = None
    if any(name.startswith("critic.") for name in arrays):
        critic = build_critic(net_cfg, config.seed)
        critic.load_state(_sub_block(arrays, "critic."))
        opt_critic = ad.Adam(config.critic_lr, config.beta1, config.beta2)
        opt_critic.load_state(_sub_block(arrays, "opt_critic."))
    state = TrainState(
        world,
        net_cfg,
        encoder,
        heads,
        critic,
        opt_gen,
        opt_critic,
        epoch=epoch,
        best_val=float(meta.get("best_val", "inf")),
        best_epoch=int(meta.get("best_epoch", "0")),
    )
    return state, meta


def _sub_block(arrays: dict, prefix: str) -> dict:
    return {name[len(prefix) :]: arr for name, arr in arrays.items() if name.startswith(prefix)}
