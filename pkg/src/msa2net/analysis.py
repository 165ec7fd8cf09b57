"""Analysis experiments: spectra of feature maps, GradCAM, count tables, ablation sweep.

Each experiment returns plain data and has a matching writer producing CSV
and/or JSON, plus a reader so every emitted file can be loaded back.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, Msa2NetError
from .formats import read_json, to_uint8, write_json, write_msat, write_pgm
from .network import (ABLATION_ROWS, FULL_SCALE_PARAMS_M, CountReport, NetworkConfig, build_model,
                      estimate_flops, make_ablation_variant)
from .spectrum import (HF_THRESHOLD, fft2_radial_spectrum, high_frequency_ratio, spatial_energy,
                       spectral_energy)
from .tensor import Tensor, backward, no_grad, take_slice
from .training import adam_state, evaluate, train

log = logging.getLogger(__name__)

SPECTRUM_CONVENTION = (f"DC-centred 2-D DFT per channel; |X| averaged over batch and channels; "
                       f"radius normalized by the corner distance to [0, 1]; value = mean of "
                       f"ln(1 + |X|) per equal-width bin (empty bins report 0); "
                       f"high-frequency ratio = power at r > {HF_THRESHOLD} / total power incl. DC")

# full-scale reference numbers, printed only next to desk results
FULL_SCALE_DSC = 84.75
FULL_SCALE_HD95 = 13.29


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def read_csv(path):
    """Rows as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _check_layers(model, layers):
    valid = model.feature_names()
    unknown = [name for name in layers if name not in valid]
    if unknown:
        raise ConfigError(f"unknown layer(s) {unknown}; valid names: {', '.join(valid)}")


# ---------------------------------------------------------------------------
# frequency response

@dataclass
class LayerSpectrum:
    layer: str
    radii: list
    log_amplitude: list
    hf_ratio: float
    spatial_energy: float
    spectral_energy: float

    @property
    def parseval_rel_err(self):
        if self.spatial_energy == 0:
            return abs(self.spectral_energy)
        return abs(self.spectral_energy - self.spatial_energy) / self.spatial_energy


@dataclass
class FreqReport:
    label: str
    bins: int
    layers: list = field(default_factory=list)   # LayerSpectrum

    def layer(self, name):
        for entry in self.layers:
            if entry.layer == name:
                return entry
        raise KeyError(name)


def freq_report(model, x, layers=None, bins=16, label="model"):
    """Radial spectrum and high-frequency ratio of captured feature maps."""
    explicit = bool(layers)
    layers = list(layers) if layers else model.feature_names()
    _check_layers(model, layers)
    with no_grad():
        model.forward(Tensor(np.asarray(x, dtype=model.head.weight.dtype)), capture=True)
    if not explicit:
        # a 1x1 map has no radial structure; skip it unless asked for by name
        layers = [n for n in layers if min(model.features[n].shape[2:]) >= 2]
    report = FreqReport(label, bins)
    for name in layers:
        feat = model.features[name].data
        spec = fft2_radial_spectrum(feat, bins)
        report.layers.append(LayerSpectrum(
            name, spec.radii.tolist(), spec.log_amplitude.tolist(), high_frequency_ratio(feat),
            spatial_energy(feat), spectral_energy(feat)))
    model.features = {}
    return report


def deepest_decoder_layer(layers):
    decs = sorted((name for name in layers if name.startswith("dec")), key=lambda s: int(s[3:]))
    return decs[-1] if decs else None


def compare_freq(a: FreqReport, b: FreqReport):
    """Joined summary of two reports; ``delta`` is ``a - b`` per shared layer."""
    shared = [entry.layer for entry in a.layers if entry.layer in {e.layer for e in b.layers}]
    deltas = {name: a.layer(name).hf_ratio - b.layer(name).hf_ratio for name in shared}
    head = deepest_decoder_layer(shared)
    return {
        "labels": [a.label, b.label],
        "hf_ratio_delta": deltas,
        "headline_layer": head,
        "headline_hf_ratio_delta": deltas.get(head) if head else None,
    }


def write_freq_reports(reports, out_dir, comparison=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rep in reports:
        for entry in rep.layers:
            for i, (r, v) in enumerate(zip(entry.radii, entry.log_amplitude)):
                rows.append([rep.label, entry.layer, i, f"{r:.6f}", repr(float(v))])
    write_csv(out / "freq.csv", ["model", "layer", "bin", "radius", "log_amplitude"], rows)
    summary = {
        "convention": SPECTRUM_CONVENTION,
        "models": {
            rep.label: {
                "bins": rep.bins,
                "layers": {
                    e.layer: {"hf_ratio": e.hf_ratio, "spatial_energy": e.spatial_energy,
                              "spectral_energy": e.spectral_energy,
                              "parseval_rel_err": e.parseval_rel_err}
                    for e in rep.layers
                },
            }
            for rep in reports
        },
    }
    if comparison is not None:
        summary["comparison"] = comparison
    write_json(out / "freq.json", summary)
    return out / "freq.csv", out / "freq.json"


# ---------------------------------------------------------------------------
# GradCAM

@dataclass
class CamMap:
    layer: str
    class_index: int
    heatmap: np.ndarray     # [H', W'] in [0, 1]
    upsampled: np.ndarray   # [H, W] in [0, 1]


def _minmax(m):
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def cam_from_activations(acts, grads):
    """``minmax(relu(sum_k w_k A_k))`` with ``w_k`` the spatial mean of ``grads[k]``; inputs ``[K, H, W]``."""
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    return _minmax(np.maximum(np.tensordot(weights, acts, axes=1), 0.0))


def gradcam(model, x, class_index, layer="dec4"):
    """Grad-CAM on one image ``[1, C, S, S]`` for the mean logit of ``class_index``."""
    if not 0 <= class_index < model.cfg.num_classes:
        raise ConfigError(f"class_index {class_index} outside 0..{model.cfg.num_classes - 1}")
    _check_layers(model, [layer])
    x = np.asarray(x, dtype=model.head.weight.dtype)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ContractError(f"gradcam takes a single image [1, C, H, W], got {x.shape}")
    logits = model.forward(Tensor(x), capture=True)
    feat = model.features[layer].retain_grad()
    score = take_slice(logits, (slice(None), slice(class_index, class_index + 1))).mean()
    backward(score)
    grad = feat.grad if feat.grad is not None else np.zeros_like(feat.data)
    heat = cam_from_activations(feat.data[0], grad[0])
    factor = x.shape[2] // heat.shape[0]
    with no_grad():
        up = F.upsample_bilinear(Tensor(heat[None, None]), factor).data[0, 0]
    model.zero_grad()
    model.features = {}
    return CamMap(layer, class_index, heat, np.clip(up, 0.0, 1.0))


def write_cam(cam: CamMap, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"gradcam_{cam.layer}_c{cam.class_index}"
    write_pgm(out / f"{stem}.pgm", to_uint8(cam.upsampled))
    write_msat(out / f"{stem}.msat", cam.heatmap[None, None])
    return out / f"{stem}.pgm", out / f"{stem}.msat"


# ---------------------------------------------------------------------------
# parameter / FLOP tables

def count_table(model) -> CountReport:
    return estimate_flops(model)


def format_count_table(rep: CountReport, what="params"):
    lines = []
    if what == "params":
        lines.append(f"{'module':<14} {'params':>10} {'full-scale ref (M)':>20}")
        for g, p, _ in rep.rows:
            ref = FULL_SCALE_PARAMS_M.get(g)
            ref = "n/a" if ref is None else f"{ref:.2f}"
            lines.append(f"{g:<14} {p:>10d} {ref:>20}")
        lines.append(f"{'Total':<14} {rep.total_params:>10d} {FULL_SCALE_PARAMS_M['Total']:>20.2f}")
    else:
        lines.append(f"{'module':<14} {'MACs':>12} {'FLOPs':>12}")
        for g, _, m in rep.rows:
            lines.append(f"{g:<14} {m:>12d} {2 * m:>12d}")
        lines.append(f"{'Total':<14} {rep.total_macs:>12d} {rep.total_flops:>12d}")
    return "\n".join(lines)


def write_count_table(rep: CountReport, out_dir, what="params"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if what == "params":
        write_csv(out / "params.csv", ["module", "params"], [[g, p] for g, p, _ in rep.rows])
    else:
        write_csv(out / "flops.csv", ["module", "macs", "flops"],
                  [[g, m, 2 * m] for g, _, m in rep.rows])
    write_json(out / f"{what}.json", rep.as_dict())
    return out / f"{what}.csv"


# ---------------------------------------------------------------------------
# ablation sweep

class AblationFailed(Msa2NetError):
    """Raised after a sweep in which some rows failed; carries the first row's exit code."""

    def __init__(self, rows, exit_code=1):
        super().__init__(f"ablation rows {rows} failed (see ablation.json)")
        self.rows = rows
        self.exit_code = exit_code


@dataclass
class AblationRow:
    row: int
    use_masag: bool
    use_lka: bool
    use_dae: bool
    dsc: float | None = None
    hd95: float | None = None
    error: str | None = None
    exit_code: int = 0


def run_ablation(base: NetworkConfig, train_set, eval_set, epochs, seed=0, lr=1e-3,
                 batch_size=4, rows=None, on_model=None):
    """Train and score every ablation row on identical data and sample order.

    A failing row records its error and the sweep continues. ``on_model(row,
    model)`` is called with each trained model.
    """
    results = []
    for row in rows or sorted(ABLATION_ROWS):
        flags = ABLATION_ROWS[row]
        entry = AblationRow(row, *flags)
        try:
            cfg = dataclasses.replace(make_ablation_variant(base, row), seed=seed)
            model = build_model(cfg)
            train(model, train_set, epochs, adam_state(lr), seed=seed, batch_size=batch_size)
            rep = evaluate(model, eval_set)
            entry.dsc, entry.hd95 = rep.mean_dsc, rep.mean_hd95
            if on_model is not None:
                on_model(row, model)
        except (Msa2NetError, FloatingPointError) as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
            entry.exit_code = getattr(exc, "exit_code", 3)
            log.warning("ablation row %d failed: %s", row, entry.error)
        results.append(entry)
    return results


def _flag(b):
    return "1" if b else "0"


def write_ablation(rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = [[_flag(r.use_masag), _flag(r.use_lka), _flag(r.use_dae),
              "" if r.dsc is None else f"{100 * r.dsc:.2f}",
              "" if r.hd95 is None else f"{r.hd95:.2f}"] for r in rows]
    write_csv(out / "ablation.csv", ["MASAG", "LKA", "DAE", "DSC", "HD95"], table)
    write_json(out / "ablation.json", {
        "rows": [vars(r) for r in rows],
        "full_scale_reference": {"dsc": FULL_SCALE_DSC, "hd95": FULL_SCALE_HD95,
                                 "comparable": False},
    })
    return out / "ablation.csv"


def format_ablation(rows):
    lines = [f"{'MASAG':>5} {'LKA':>4} {'DAE':>4} {'DSC %':>7} {'HD95':>7}"]
    mark = {True: "yes", False: "-"}
    for r in rows:
        dsc = "error" if r.error else f"{100 * r.dsc:.2f}"
        hd = "" if r.error or r.hd95 is None else f"{r.hd95:.2f}"
        lines.append(f"{mark[r.use_masag]:>5} {mark[r.use_lka]:>4} {mark[r.use_dae]:>4} {dsc:>7} {hd:>7}")
    lines.append(f"reference only, NOT comparable (full-scale clinical model): "
                 f"DSC {FULL_SCALE_DSC} / HD95 {FULL_SCALE_HD95}")
    return "\n".join(lines)


def read_ablation(out_dir):
    return read_csv(Path(out_dir) / "ablation.csv"), read_json(Path(out_dir) / "ablation.json")
