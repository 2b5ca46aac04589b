"""Training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as lio
from .configs import NetworkConfig
from .experiment import ExperimentConfig
from .hollow import HollowMask, MaskedOptimizer, crop_to_object, make_annulus_mask, mask_from_annotation
from .losses import CLASS_NAMES, ClassWeights, a1_losses, combined_loss, dice_metric
from .networks import Network, build_network, resize_image
from .synth import PhantomDataset, gen_dataset
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "split", "class", "dice")
LOSS_HEADER = ("iteration", "lr", "loss")


class DataError(RuntimeError):
    pass


class NumericalAbort(RuntimeError):
    pass


def load_dataset(cfg: ExperimentConfig) -> PhantomDataset:
    if cfg.dataset:
        try:
            return PhantomDataset.load(cfg.dataset)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load dataset {cfg.dataset}: {exc}") from exc
    return gen_dataset(cfg.n_train, cfg.n_test, cfg.seq_len, cfg.size, cfg.phantom, cfg.data_seed)


def reference_annotation(data: PhantomDataset) -> np.ndarray:
    """Outer-wall mask of the middle slice of the first training stack."""
    masks = data.masks[0, :, 0]
    t = masks.shape[0] // 2
    if not masks[t].any():
        nonempty = np.flatnonzero(masks.reshape(masks.shape[0], -1).any(axis=1))
        if nonempty.size == 0:
            raise DataError("first training stack has no outer-wall annotation to derive hollow masks from")
        t = int(nonempty[0])
    return masks[t]


def hollow_masks(config: NetworkConfig, data: PhantomDataset | None, source: str = "annotation") -> dict[int, HollowMask]:
    """One mask per hollow kernel size, cut from a ground-truth outer wall.

    Sizes too small for the resampled band to stay closed fall back to a
    circular annulus.
    """
    out = {}
    crop = crop_to_object(reference_annotation(data)) if source == "annotation" and data is not None else None
    for k in config.hollow_sizes():
        if crop is not None:
            try:
                out[k] = mask_from_annotation(crop, k)
                continue
            except ValueError:
                log.info("annotation mask broke at %dx%d, using an annulus", k, k)
        out[k] = make_annulus_mask(k, (k / 2, k / 2), max(1.0, min(k / 5, k / 2 - 0.5)))
    return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    index: list[tuple[int, int]]


def sample_batch(data: PhantomDataset, cfg: ExperimentConfig, iteration: int) -> Batch:
    """Stateless sampler: the draw depends only on (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, iteration])
    n_train, T = data.n_train, data.images.shape[1]
    if cfg.spatiotemporal:
        s = int(rng.integers(n_train))
        idx = [(s, t) for t in range(T)]
    else:
        flat = rng.integers(n_train * T, size=cfg.batch)
        idx = [(int(i) // T, int(i) % T) for i in flat]
    x = np.stack([data.images[s, t] for s, t in idx])
    y = np.stack([data.masks[s, t] for s, t in idx])
    x = ((x - data.mean) / data.std).astype(np.float32)
    return Batch(x, y.astype(np.float32), idx)


def compute_loss(net: Network, cfg: ExperimentConfig, pred: Tensor, y: np.ndarray) -> Tensor:
    weights = ClassWeights(cfg.alpha, cfg.class_weights, cfg.pos_weights)
    mode = cfg.loss_mode
    if mode == "combined" or net.tiny is None:
        return combined_loss(y, pred, weights)
    kernels = net.generated_kernels
    k = kernels.shape[-1]
    y_ow = (resize_image(y[:, :1], k) > 0.5).astype(np.float32)
    return a1_losses(pred, y, kernels, y_ow, mode, weights, net.channel_logits)


def make_optimizer(net: Network, cfg: ExperimentConfig) -> MaskedOptimizer:
    mode = "adam" if cfg.optimizer == "masked-adam" else "sgd"
    return MaskedOptimizer(net.parameters(), cfg.lr, net.parameter_masks(), mode)


# ------------------------------------------------------------- evaluation
def predict_stack(net: Network, images: np.ndarray, mean: float, std: float) -> np.ndarray:
    """(T, 1, H, W) raw slices -> (T, C, H, W) probabilities, eval mode."""
    was = net.training
    net.eval()
    try:
        with no_grad():
            x = Tensor(((images - mean) / std).astype(np.float32))
            return net(x).data
    finally:
        net.train(was)


@dataclass
class EvalResult:
    per_stack: np.ndarray          # (S, C) Dice
    absent: list[str]

    @property
    def mean(self) -> np.ndarray:
        return self.per_stack.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.per_stack.std(axis=0)

    def table(self) -> str:
        head = f"{'class':<12}{'dice mean':>10}{'std':>8}"
        rows = [head] + [
            f"{name:<12}{m:>10.3f}{s:>8.3f}" for name, m, s in zip(CLASS_NAMES, self.mean, self.std)
        ]
        return "\n".join(rows)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("stack", "class", "dice"))
            for s, row in enumerate(self.per_stack):
                for name, d in zip(CLASS_NAMES, row):
                    w.writerow((s, name, f"{d:.6f}"))


def evaluate_predictions(preds: list[np.ndarray], truths: list[np.ndarray]) -> EvalResult:
    per_stack = np.array([dice_metric(p, y) for p, y in zip(preds, truths)])
    present = np.array([[y[:, c].any() for c in range(y.shape[1])] for y in truths])
    absent = [CLASS_NAMES[c] for c in range(present.shape[1]) if not present[:, c].any()]
    for name in absent:
        log.warning("class %s is absent from every evaluated stack; Dice reported as 1.0 (empty vs empty)", name)
    return EvalResult(per_stack, absent)


def evaluate(net: Network, data: PhantomDataset, split: str = "test") -> EvalResult:
    stacks = data.split(split)
    if len(stacks) == 0:
        raise DataError(f"split {split!r} is empty")
    preds = [predict_stack(net, data.images[s], data.mean, data.std) for s in stacks]
    return evaluate_predictions(preds, [data.masks[s] for s in stacks])


# ------------------------------------------------------------- checkpoints
def checkpoint_state(net: Network, opt: MaskedOptimizer, iteration: int, cfg: ExperimentConfig) -> dict:
    state = dict(net.state_dict())
    for name, mask in net.masks.items():
        state[f"mask.{name}"] = np.ascontiguousarray(mask).astype(np.uint8)
    state.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
    state["iteration"] = np.array([iteration], dtype=np.float64)
    state["config_hash"] = np.frombuffer(cfg.hash().encode("ascii"), dtype=np.uint8)
    return state


def save_checkpoint(path: str | os.PathLike, net: Network, opt: MaskedOptimizer, iteration: int,
                    cfg: ExperimentConfig) -> None:
    lio.save_bundle(path, checkpoint_state(net, opt, iteration, cfg))


def restore_checkpoint(path: str | os.PathLike, net: Network, opt: MaskedOptimizer | None = None) -> int:
    state = lio.load_bundle(path)
    net.load_state_dict(state)
    for name in net.masks:
        stored = state.get(f"mask.{name}")
        if stored is None or not np.array_equal(stored.astype(bool), net.masks[name]):
            raise DataError(f"checkpoint mask for {name} does not match the rebuilt model")
    if opt is not None:
        opt.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("opt.")})
    return int(state["iteration"][0])


def checkpoint_hash(path: str | os.PathLike) -> str:
    return lio.load_bundle(path)["config_hash"].tobytes().decode("ascii")


# ------------------------------------------------------------------ train
@dataclass
class TrainResult:
    net: Network
    optimizer: MaskedOptimizer
    iteration: int
    losses: list[float]
    run_dir: Path
    checkpoint: Path | None
    data: PhantomDataset


def _append_rows(path: Path, header, rows) -> None:
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerows(rows)


def build_for(cfg: ExperimentConfig, data: PhantomDataset | None) -> Network:
    ncfg = cfg.network_config()
    masks = hollow_masks(ncfg, data, cfg.mask_source) if ncfg.hollow_layers else {}
    net = build_network(ncfg, masks, seed=cfg.seed)
    if cfg.init_sigma > 0 or cfg.init_mu != 0:
        reinit_hollow(net, cfg)
    return net


def reinit_hollow(net: Network, cfg: ExperimentConfig) -> None:
    from .hollow import init_hollow_kernel

    params = dict(net.named_parameters())
    rng = np.random.default_rng([cfg.seed, 1])
    for name, mask in net.masks.items():
        w = params[name]
        hm = HollowMask(mask[0, 0].astype(np.uint8))
        sigma = cfg.init_sigma if cfg.init_sigma > 0 else None
        w.data[...] = init_hollow_kernel(hm, w.shape[:2], rng, cfg.init_mu, sigma, w.dtype)


def train(cfg: ExperimentConfig, data: PhantomDataset | None = None, resume: str | os.PathLike | None = None,
          stop_at: int | None = None, write: bool = True) -> TrainResult:
    """Run (or continue) training up to ``stop_at`` (default: cfg.iterations)."""
    data = data if data is not None else load_dataset(cfg)
    if data.images.shape[1] != cfg.seq_len and cfg.spatiotemporal:
        raise DataError(f"dataset stacks have {data.images.shape[1]} slices, config expects {cfg.seq_len}")
    net = build_for(cfg, data)
    opt = make_optimizer(net, cfg)
    start = 0
    if resume is not None:
        if checkpoint_hash(resume) != cfg.hash():
            log.warning("checkpoint %s was written by a different configuration", resume)
        start = restore_checkpoint(resume, net, opt)
    end = cfg.iterations if stop_at is None else stop_at

    run = Path(cfg.out)
    if write:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.resolved").write_text(cfg.resolved(), encoding="utf-8")
    losses: list[float] = []
    loss_rows: list[tuple] = []
    ckpt = None
    net.train()
    for it in range(start, end):
        opt.lr = cfg.lr_at(it)
        batch = sample_batch(data, cfg, it)
        pred = net(Tensor(batch.x))
        loss = compute_loss(net, cfg, pred, batch.y)
        value = loss.item()
        if not math.isfinite(value):
            dump = run / f"nan-batch-{it}.lorck"
            if write:
                lio.save_bundle(dump, {"x": batch.x, "y": batch.y,
                                       "index": np.array(batch.index, dtype=np.float64)})
            raise NumericalAbort(
                f"non-finite loss {value} at iteration {it}, batch index {batch.index}"
                + (f"; batch dumped to {dump}" if write else "")
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        loss_rows.append((it, repr(opt.lr), f"{value:.9g}"))
        done = it + 1
        if write and cfg.eval_every and (done % cfg.eval_every == 0 or done == end):
            _append_rows(run / "loss.csv", LOSS_HEADER, loss_rows)
            loss_rows = []
            result = evaluate(net, data, "test")
            _append_rows(run / "metrics.csv", METRICS_HEADER,
                         [(done, "test", n, f"{d:.6f}") for n, d in zip(CLASS_NAMES, result.mean)])
            log.info("iteration %d loss %.4f test dice %s", done, value, np.round(result.mean, 3))
        if write and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != end:
            save_checkpoint(run / f"ckpt-{done:06d}.lorck", net, opt, done, cfg)
    if write:
        if loss_rows:
            _append_rows(run / "loss.csv", LOSS_HEADER, loss_rows)
        ckpt = run / f"ckpt-{end:06d}.lorck"
        save_checkpoint(ckpt, net, opt, end, cfg)
    return TrainResult(net, opt, end, losses, run, ckpt, data)
