"""Synthetic data, Dice+CE loss, SGD/Adam, DSC/HD95 metrics and the train loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import functional as F
from .errors import ConfigError, DataError, FormatError, NumericalError
from .formats import read_json, read_pgm, to_uint8, write_json, write_pgm
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# synthetic dataset

@dataclass
class SegmentationSample:
    image: np.ndarray   # [1, C, S, S] float32 in [0, 1]
    mask: np.ndarray    # [S, S] int64 labels

    def __post_init__(self):
        if not np.all(np.isfinite(self.image)):
            raise DataError("sample image has non-finite values")


def _shape_mask(rng, size):
    """One random ellipse or rotated rectangle, rasterized at pixel centres."""
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    a, b = rng.uniform(0.06, 0.18, size=2) * size
    theta = rng.uniform(0.0, math.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    if rng.random() < 0.5:
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def intensity_bands(num_classes, half_width=0.05):
    """(lo, hi) intensity band per label, background first, centres evenly in [0.15, 0.85]."""
    centres = np.linspace(0.15, 0.85, num_classes)
    return [(c - half_width, c + half_width) for c in centres]


FG_FRACTION_RANGE = (0.02, 0.5)
NOISE_SIGMA = 0.05


def generate_synthetic_dataset(seed, n, size, num_classes, max_tries=100):
    if size < 32 or size % 32:
        raise ConfigError(f"size must be >= 32 and divisible by 32, got {size}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    bands = intensity_bands(num_classes)
    lo, hi = FG_FRACTION_RANGE
    samples = []
    for _ in range(n):
        for _ in range(max_tries):
            mask = np.zeros((size, size), dtype=np.int64)
            for cls in range(1, num_classes):
                for _ in range(rng.integers(1, 4)):
                    mask[_shape_mask(rng, size)] = cls
            frac = np.bincount(mask.ravel(), minlength=num_classes)[1:] / mask.size
            if np.all((frac >= lo) & (frac <= hi)):
                break
        else:
            raise ConfigError("could not draw a sample within the foreground-fraction bounds")
        levels = np.array([rng.uniform(*band) for band in bands])
        img = levels[mask] + rng.normal(0.0, NOISE_SIGMA, size=mask.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(SegmentationSample(img[None, None], mask))
    return samples


def save_dataset(samples, directory, meta=None):
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name, mask_name = f"images/{i:05d}.pgm", f"masks/{i:05d}.pgm"
        write_pgm(d / img_name, to_uint8(s.image[0, 0]))
        write_pgm(d / mask_name, s.mask.astype(np.uint8))
        entries.append({"image": img_name, "mask": mask_name})
    index = {"format": "msa2net-dataset", "version": 1, "samples": entries}
    index.update(meta or {})
    write_json(d / "index.json", index)
    return d


def load_dataset(directory):
    d = Path(directory)
    index_path = d / "index.json"
    if not index_path.exists():
        raise FormatError("dataset index.json missing", index_path)
    index = read_json(index_path)
    num_classes = index.get("num_classes")
    samples = []
    for entry in index["samples"]:
        img = read_pgm(d / entry["image"]).astype(np.float32) / 255.0
        mask = read_pgm(d / entry["mask"]).astype(np.int64)
        if num_classes is not None and mask.max() >= num_classes:
            raise DataError(f"{entry['mask']}: label {mask.max()} >= num_classes {num_classes}")
        samples.append(SegmentationSample(img[None, None], mask))
    return samples, index


def stack_batch(samples):
    x = np.concatenate([s.image for s in samples], axis=0)
    y = np.stack([s.mask for s in samples], axis=0)
    return x, y


# ---------------------------------------------------------------------------
# loss

def one_hot(mask, num_classes, dtype=np.float32):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= num_classes:
        raise DataError(f"label out of range 0..{num_classes - 1}")
    out = np.zeros((mask.shape[0], num_classes) + mask.shape[1:], dtype=dtype)
    np.put_along_axis(out, mask[:, None], 1.0, axis=1)
    return out


def dice_ce_loss(logits, mask, smooth=1.0):
    """0.5 * soft multi-class Dice loss + 0.5 * pixel cross-entropy.

    ``mask`` is ``[N, H, W]`` integer labels. Dice sums over the batch and
    pixels per class, then averages classes.
    """
    n, k, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise DataError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    target = Tensor(one_hot(mask, k, logits.dtype))
    logp = F.log_softmax(logits, axis=1)
    ce = -(logp * target).sum(axis=1).mean()
    probs = F.softmax(logits, axis=1)
    inter = (probs * target).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + target.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return (1.0 - dice.mean()) * 0.5 + ce * 0.5


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimState:
    kind: str
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)


def sgd_state(lr=0.05, momentum=0.9, weight_decay=1e-4):
    return OptimState("sgd", lr, momentum=momentum, weight_decay=weight_decay)


def adam_state(lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    return OptimState("adam", lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)


def sgd_update(params, grads, st: OptimState):
    """``v <- mu v + g + wd theta``; ``theta <- theta - lr v`` (in place)."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        d = g + st.weight_decay * p if st.weight_decay else g
        v = st.buffers.get(i)
        v = d.copy() if v is None else st.momentum * v + d
        st.buffers[i] = v
        p -= st.lr * v
    st.step += 1


def adam_update(params, grads, st: OptimState):
    st.step += 1
    t = st.step
    c1 = 1.0 - st.beta1 ** t
    c2 = 1.0 - st.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if st.weight_decay:
            g = g + st.weight_decay * p
        m, v = st.buffers.get(i, (np.zeros_like(p), np.zeros_like(p)))
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        st.buffers[i] = (m, v)
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def optimizer_step(model, st: OptimState):
    params = model.parameters()
    arrays = [p.data for p in params]
    grads = [p.grad for p in params]
    if st.kind == "sgd":
        sgd_update(arrays, grads, st)
    elif st.kind == "adam":
        adam_update(arrays, grads, st)
    else:
        raise ConfigError(f"unknown optimizer {st.kind!r}")


# ---------------------------------------------------------------------------
# metrics

def dsc(pred_mask, true_mask, cls):
    p = np.asarray(pred_mask) == cls
    t = np.asarray(true_mask) == cls
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


def boundary(region):
    """Foreground pixels with a 4-neighbour outside the region (image edge counts as outside)."""
    r = np.pad(np.asarray(region, dtype=bool), 1)
    inner = r[1:-1, 1:-1] & r[:-2, 1:-1] & r[2:, 1:-1] & r[1:-1, :-2] & r[1:-1, 2:]
    return np.asarray(region, dtype=bool) & ~inner


def hd95(pred_mask, true_mask, cls):
    """95th percentile of symmetric boundary distances; ``None`` when either side is empty."""
    bp = boundary(np.asarray(pred_mask) == cls)
    bt = boundary(np.asarray(true_mask) == cls)
    if not bp.any() or not bt.any():
        return None
    to_t = ndimage.distance_transform_edt(~bt)[bp]
    to_p = ndimage.distance_transform_edt(~bp)[bt]
    return float(np.percentile(np.concatenate([to_t, to_p]), 95))


@dataclass
class MetricReport:
    classes: list
    dsc: dict
    hd95: dict
    mean_dsc: float
    mean_hd95: float | None
    hd95_excluded: int = 0

    def as_dict(self):
        return {
            "classes": self.classes,
            "dsc": {str(k): v for k, v in self.dsc.items()},
            "hd95": {str(k): v for k, v in self.hd95.items()},
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
            "hd95_excluded": self.hd95_excluded,
        }


def score_masks(preds, truths, num_classes):
    """Per-class metrics averaged over samples; background (label 0) is not scored."""
    classes = list(range(1, num_classes))
    per_dsc = {c: [] for c in classes}
    per_hd = {c: [] for c in classes}
    excluded = 0
    for p, t in zip(preds, truths):
        for c in classes:
            per_dsc[c].append(dsc(p, t, c))
            h = hd95(p, t, c)
            if h is None:
                excluded += 1
            else:
                per_hd[c].append(h)
    dsc_c = {c: float(np.mean(v)) for c, v in per_dsc.items()}
    hd_c = {c: (float(np.mean(v)) if v else None) for c, v in per_hd.items()}
    hd_vals = [v for v in hd_c.values() if v is not None]
    return MetricReport(classes, dsc_c, hd_c, float(np.mean(list(dsc_c.values()))),
                        float(np.mean(hd_vals)) if hd_vals else None, excluded)


def predict(model, images, batch_size=8):
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(Tensor(np.asarray(images[i:i + batch_size], dtype=model.head.weight.dtype)))
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds, axis=0)


def evaluate(model, dataset, batch_size=8):
    x, y = stack_batch(dataset)
    preds = predict(model, x, batch_size)
    return score_masks(preds, y, model.cfg.num_classes)


# ---------------------------------------------------------------------------
# training loop

def _first_nonfinite(model, logits, loss):
    if not np.all(np.isfinite(logits.data)):
        return "logits"
    if not np.all(np.isfinite(loss.data)):
        return "loss"
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name + ".grad"
    return None


def train(model, dataset, epochs, optimizer: OptimState, seed=0, batch_size=4, on_epoch=None):
    """Minibatch training; returns ``(model, per-epoch mean loss list)``."""
    if not dataset:
        raise DataError("training dataset is empty")
    rng = np.random.default_rng(seed)
    x_all, y_all = stack_batch(dataset)
    x_all = x_all.astype(model.head.weight.dtype)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            model.zero_grad()
            logits = model(Tensor(x_all[idx]))
            loss = dice_ce_loss(logits, y_all[idx])
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}; first bad tensor: "
                                     f"{_first_nonfinite(model, logits, loss)}")
            backward(loss)
            optimizer_step(model, optimizer)
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
        log.debug("epoch %d loss %.5f", epoch, curve[-1])
    bad = _first_nonfinite(model, Tensor(np.zeros(1)), Tensor(np.zeros(1)))
    if bad is not None:
        raise NumericalError(f"non-finite values after training in {bad}")
    return model, curve
