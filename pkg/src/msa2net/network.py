"""MSA2Net assembly: 4-stage encoder, three gated skips, hybrid 4-layer decoder.

Layout for stage channels ``c1 < c2 < c3 < c4`` (strides 4, 8, 16, 32)::

    enc1..enc4                      encoder stage outputs
    dec1 = B_deep(enc4)             stride 32, then up1 -> stride 16, c3
    dec2 = B_deep(skip3 + up1)      stride 16, then up2 -> stride 8, c2
    dec3 = B_shallow(skip2 + up2)   stride 8,  then up3 -> stride 4, c1
    dec4 = B_shallow(skip1 + up3)   stride 4
    logits = upsample4(head(dec4))

``skip_i`` is the gate output when MASAG is enabled, else the raw encoder map.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .blocks import BlockConfig, DAEBlock, LKABlock, MBConv, PatchExpand
from .errors import ConfigError, ContractError, FormatError
from .formats import read_json, read_msat, write_json, write_msat
from .masag import MasagConfig, MasagParams
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor

CHECKPOINT_VERSION = 1
GROUPS = ("Encoder", "Skip (MASAG)", "Decoder-LKA", "Decoder-DAE", "Head")

# ablation switch pattern per row (use_masag, use_lka, use_dae)
ABLATION_ROWS = {
    1: (False, True, False),
    2: (False, False, True),
    3: (False, True, True),
    4: (True, True, False),
    5: (True, False, True),
    6: (True, True, True),
}

# full-scale figures, for labelled reference output only
FULL_SCALE_PARAMS_M = {"Encoder": 64.12, "Skip (MASAG)": 9.44, "Decoder-LKA": 1.37,
                  "Decoder-DAE": 37.84, "Total": 112.77}
FULL_SCALE_GFLOPS = 15.56


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 3
    stage_channels: tuple = (16, 32, 64, 128)
    image_size: int = 64
    use_masag: bool = True
    use_lka: bool = True
    use_dae: bool = True
    seed: int = 0
    ffn_expand: int = 4
    attn_heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        problems = []
        if self.in_channels < 1:
            problems.append("in_channels >= 1")
        if self.num_classes < 1:
            problems.append("num_classes >= 1")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            problems.append("stage_channels must be 4 positive integers")
        elif any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            problems.append("stage_channels strictly increasing")
        elif any(c % self.attn_heads for c in self.stage_channels):
            problems.append("stage_channels divisible by attn_heads")
        if self.image_size < 32 or self.image_size % 32:
            problems.append("image_size >= 32 and divisible by 32")
        if self.seed < 0:
            problems.append("seed is unsigned")
        if problems:
            raise ConfigError("invalid NetworkConfig: " + "; ".join(problems))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def deep_block(self):
        return "dae" if self.use_dae else "lka"

    @property
    def shallow_block(self):
        return "lka" if self.use_lka else "dae"


def make_ablation_variant(cfg: NetworkConfig, row: int) -> NetworkConfig:
    if row not in ABLATION_ROWS:
        raise ConfigError(f"ablation row must be in 1..6, got {row}")
    m, l, d = ABLATION_ROWS[row]
    return dataclasses.replace(cfg, use_masag=m, use_lka=l, use_dae=d)


def _rng(seed, *key):
    return np.random.default_rng([seed, *key])


class Encoder(Module):
    """Conv stem to stride 4, then one MBConv per stage (stride 2 between stages)."""

    def __init__(self, cfg: NetworkConfig):
        c1, c2, c3, c4 = cfg.stage_channels
        rng = _rng(cfg.seed, 0)
        self.stem1 = Conv2d(cfg.in_channels, c1, 3, stride=2, padding=1, rng=rng)
        self.stem2 = Conv2d(c1, c1, 3, stride=2, padding=1, rng=rng)
        self.stages = [
            MBConv(c1, c1, 1, rng=rng),
            MBConv(c1, c2, 2, rng=rng),
            MBConv(c2, c3, 2, rng=rng),
            MBConv(c3, c4, 2, rng=rng),
        ]

    def forward(self, x):
        h = self.stem2(F.gelu(self.stem1(x)))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def macs(self, n, s):
        total = self.stem1.macs(n, s, s)
        h = self.stem1.out_size(s)
        total += n * self.stem1.c_out * h * h + self.stem2.macs(n, h, h)
        h = self.stem2.out_size(h)
        for stage in self.stages:
            total += stage.macs(n, h, h)
            h = stage.dw.out_size(h)
        return total


class DecoderLayer(Module):
    """One decoder stage: optional skip fusion, block, optional upward expand."""

    def __init__(self, kind, channels, cfg: NetworkConfig, rng, fuse_skip, expand_to=None):
        bcfg = BlockConfig(channels, cfg.ffn_expand, cfg.attn_heads)
        self.kind = kind
        self.channels = channels
        self.fuse_skip = fuse_skip
        self.block = DAEBlock(bcfg, rng) if kind == "dae" else LKABlock(bcfg, rng)
        self.up = PatchExpand(channels, expand_to, rng) if expand_to else None

    def macs(self, n, h):
        total = n * self.channels * h * h if self.fuse_skip else 0
        total += self.block.macs(n, h, h)
        if self.up is not None:
            total += self.up.macs(n, h, h)
        return total


class MSA2Net(Module):
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        self.encoder = Encoder(cfg)
        if cfg.use_masag:
            # gates[0] sits at stride 16, gates[2] at stride 4
            self.gates = [MasagParams(MasagConfig(c), _rng(cfg.seed, 1, i))
                          for i, c in enumerate((c3, c2, c1))]
        else:
            self.gates = []
        deep, shallow = cfg.deep_block, cfg.shallow_block
        self.decoder = [
            DecoderLayer(deep, c4, cfg, _rng(cfg.seed, 2, 0), False, c3),
            DecoderLayer(deep, c3, cfg, _rng(cfg.seed, 2, 1), True, c2),
            DecoderLayer(shallow, c2, cfg, _rng(cfg.seed, 2, 2), True, c1),
            DecoderLayer(shallow, c1, cfg, _rng(cfg.seed, 2, 3), True, None),
        ]
        self.head = Conv2d(c1, cfg.num_classes, 1, rng=_rng(cfg.seed, 3))
        self.features = {}

    def feature_names(self):
        names = [f"enc{i}" for i in range(1, 5)]
        names += [f"gate{i}" for i in range(1, 4)] if self.cfg.use_masag else []
        names += [f"dec{i}" for i in range(1, 5)]
        return names

    def forward(self, x, capture=False):
        x = as_tensor(x)
        cfg = self.cfg
        s = cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, s, s):
            raise ContractError(f"expected input [N, {cfg.in_channels}, {s}, {s}], got {x.shape}")
        feats = {}
        enc = self.encoder(x)
        for i, e in enumerate(enc, 1):
            feats[f"enc{i}"] = e
        skips = enc[:3][::-1]   # stride 16, 8, 4
        h = None
        for i, layer in enumerate(self.decoder):
            if i == 0:
                h = enc[3]
            else:
                skip = skips[i - 1]
                if self.gates:
                    skip = self.gates[i - 1](skip, h)
                    feats[f"gate{i}"] = skip
                h = skip + h
            h = layer.block(h)
            feats[f"dec{i + 1}"] = h
            if layer.up is not None:
                h = layer.up(h)
        logits = F.upsample_bilinear(self.head(h), 4)
        if capture:
            self.features = feats
        return logits

    def group_of(self, name):
        top = name.split(".")[0]
        if top == "encoder":
            return "Encoder"
        if top == "gates":
            return "Skip (MASAG)"
        if top == "decoder":
            kind = self.decoder[int(name.split(".")[1])].kind
            return "Decoder-LKA" if kind == "lka" else "Decoder-DAE"
        return "Head"


def build_model(cfg: NetworkConfig) -> MSA2Net:
    if not isinstance(cfg, NetworkConfig):
        raise ConfigError("build_model expects a NetworkConfig")
    return MSA2Net(cfg)


def model_forward(m: MSA2Net, x, capture=False):
    return m.forward(x, capture=capture)


# ---------------------------------------------------------------------------
# accounting

@dataclass
class CountReport:
    rows: list = field(default_factory=list)   # (group, params, macs)

    @property
    def total_params(self):
        return sum(r[1] for r in self.rows)

    @property
    def total_macs(self):
        return sum(r[2] for r in self.rows)

    @property
    def total_flops(self):
        return 2 * self.total_macs

    def as_dict(self):
        return {
            "rows": [{"module": g, "params": p, "macs": m, "flops": 2 * m} for g, p, m in self.rows],
            "total": {"params": self.total_params, "macs": self.total_macs, "flops": self.total_flops},
        }


def count_parameters(m: MSA2Net) -> CountReport:
    counts = dict.fromkeys(GROUPS, 0)
    for name, p in m.named_parameters():
        counts[m.group_of(name)] += p.size
    return CountReport([(g, counts[g], 0) for g in GROUPS])


def estimate_flops(m: MSA2Net, image_size=None, batch=1) -> CountReport:
    """Closed-form MACs per group; FLOPs are 2 x MACs."""
    s = m.cfg.image_size if image_size is None else image_size
    if s % 32:
        raise ConfigError("image_size must be divisible by 32")
    params = count_parameters(m)
    macs = dict.fromkeys(GROUPS, 0)
    macs["Encoder"] = m.encoder.macs(batch, s)
    for i, layer in enumerate(m.decoder):
        side = s // (32 >> i)
        group = "Decoder-LKA" if layer.kind == "lka" else "Decoder-DAE"
        macs[group] += layer.macs(batch, side)
        if i > 0 and m.gates:
            macs["Skip (MASAG)"] += m.gates[i - 1].macs(batch, side, side)
    side = s // 4
    macs["Head"] = m.head.macs(batch, side, side) + batch * m.cfg.num_classes * s * s
    return CountReport([(g, p, macs[g]) for g, p, _ in params.rows])


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(m: MSA2Net, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, (name, p) in enumerate(m.named_parameters()):
        fname = f"{i:04d}_{name}.msat"
        write_msat(d / fname, p.data)
        tensors.append({"name": name, "shape": list(p.shape), "file": fname})
    write_json(d / "manifest.json", {
        "format": "msa2net-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "config": m.cfg.to_dict(),
        "tensors": tensors,
    })
    return d


def load_checkpoint(directory) -> MSA2Net:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError("checkpoint manifest missing", manifest_path)
    manifest = read_json(manifest_path)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}",
                          manifest_path)
    cfg = NetworkConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    expected = dict(model.named_parameters())
    listed = {t["name"]: t for t in manifest["tensors"]}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise FormatError(f"checkpoint tensor set mismatch; missing={missing[:3]} extra={extra[:3]}",
                          manifest_path)
    for name, p in expected.items():
        entry = listed[name]
        if tuple(entry["shape"]) != p.shape:
            raise FormatError(f"tensor {name}: manifest shape {entry['shape']} != expected {list(p.shape)}",
                              manifest_path)
        path = d / entry["file"]
        try:
            arr = read_msat(path)
        except FileNotFoundError:
            raise FormatError(f"tensor {name}: file missing", path) from None
        except FormatError as exc:
            raise FormatError(f"tensor {name}: {exc.message}", path, exc.offset) from None
        if arr.size != p.size:
            raise FormatError(f"tensor {name}: {arr.size} elements, expected {p.size}", path)
        p.data = arr.reshape(p.shape).astype(p.dtype)
    return model
