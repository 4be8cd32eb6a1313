"""3D network definitions: tissue Dense-Unet, patch classifier, switch-gated CF generator,
and the lesion segmentation backbones of increasing size."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

KINDS = ("tseg", "cls", "cmg", "pseg")
PSEG_VARIANTS = ("conv4", "dense1", "dense2", "dunet_d1", "dunet_d2", "dunet_full")
# initial lesion probability of P-SEG; lesions fill well under 1% of a patch and a Dice loss
# starting from 0.5 everywhere gives lesion voxels almost no gradient
PSEG_PRIOR = 0.01


class NetworkConfigError(ValueError):
    pass


class SwitchState(enum.IntEnum):
    REMOVE = 0
    SEED = 1


@dataclass
class NetworkSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 3
    growth: int = 16
    init_channels: int = 32
    layers_per_block: int = 2
    variant: str | None = None
    hidden: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NetworkConfigError(f"unknown network kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise NetworkConfigError("in/out channels must be >= 1")
        if self.depth < 0:
            raise NetworkConfigError("depth must be >= 0")
        if self.variant is not None and self.kind != "pseg":
            raise NetworkConfigError("variant is only meaningful for pseg")
        if self.kind == "pseg" and self.variant not in PSEG_VARIANTS:
            raise NetworkConfigError(f"unknown pseg variant {self.variant!r}; expected one of {PSEG_VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- building blocks


class DenseLayer(nn.Module):
    def __init__(self, in_ch, growth):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_ch)
        self.conv = nn.Conv3d(in_ch, growth, 3, padding=1)

    def forward(self, x):
        return self.conv(F.relu(self.norm(x)))


class DenseBlock(nn.Module):
    def __init__(self, in_ch, growth, n_layers):
        super().__init__()
        self.layers = nn.ModuleList(DenseLayer(in_ch + i * growth, growth) for i in range(n_layers))
        self.out_channels = in_ch + n_layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class TransitionDown(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = nn.BatchNorm3d(ch)
        self.conv = nn.Conv3d(ch, ch, 1)

    def forward(self, x):
        return F.avg_pool3d(self.conv(F.relu(self.norm(x))), 2)


class DenseEncoder(nn.Module):
    """Stem conv, ``depth`` dense blocks each followed by down-sampling, then a bottleneck block."""

    def __init__(self, in_ch, depth, growth, init_ch, n_layers):
        super().__init__()
        self.stem = nn.Conv3d(in_ch, init_ch, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.skip_channels = []
        ch = init_ch
        for _ in range(depth):
            block = DenseBlock(ch, growth, n_layers)
            self.blocks.append(block)
            ch = block.out_channels
            self.skip_channels.append(ch)
            self.downs.append(TransitionDown(ch))
        self.bottleneck = DenseBlock(ch, growth, n_layers)
        self.out_channels = self.bottleneck.out_channels

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return self.bottleneck(x), skips


class DenseDecoder(nn.Module):
    def __init__(self, in_ch, skip_channels, growth, n_layers, out_ch):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = in_ch
        for skip_ch in reversed(skip_channels):
            up_ch = 2 * growth
            self.ups.append(nn.ConvTranspose3d(ch, up_ch, 2, stride=2))
            block = DenseBlock(up_ch + skip_ch, growth, n_layers)
            self.blocks.append(block)
            ch = block.out_channels
        self.norm = nn.BatchNorm3d(ch)
        self.head = nn.Conv3d(ch, out_ch, 1)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(F.relu(self.norm(x)))


# ---------------------------------------------------------------- networks


class DenseUNet(nn.Module):
    def __init__(self, spec: NetworkSpec, depth: int | None = None):
        super().__init__()
        self.spec = spec
        depth = spec.depth if depth is None else depth
        self.encoder = DenseEncoder(spec.in_channels, depth, spec.growth, spec.init_channels, spec.layers_per_block)
        self.decoder = DenseDecoder(
            self.encoder.out_channels, self.encoder.skip_channels, spec.growth, spec.layers_per_block, spec.out_channels
        )

    def logits(self, x):
        return self.decoder(*self.encoder(x))

    def forward(self, x):
        z = self.logits(x)
        return torch.softmax(z, dim=1) if self.spec.out_channels > 1 else torch.sigmoid(z)


class Classifier(nn.Module):
    """Dense encoder, global average and max pooling, two fully connected layers.

    Pooling runs over every encoder level, not just the bottleneck: a lesion of a few
    voxels is mostly averaged away after three down-samplings, but still shows up in the
    full-resolution features."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = DenseEncoder(spec.in_channels, spec.depth, spec.growth, spec.init_channels, spec.layers_per_block)
        self.pooled_channels = sum(self.encoder.skip_channels) + self.encoder.out_channels
        self.fc = nn.Sequential(
            nn.Linear(2 * self.pooled_channels, spec.hidden), nn.ReLU(), nn.Linear(spec.hidden, spec.out_channels)
        )

    def logits(self, x):
        bottleneck, skips = self.encoder(x)
        levels = [*skips, bottleneck]
        pooled = [f.mean(dim=(2, 3, 4)) for f in levels] + [f.amax(dim=(2, 3, 4)) for f in levels]
        return self.fc(torch.cat(pooled, dim=1))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


@dataclass
class LatentCode:
    bottleneck: torch.Tensor
    skips: list = field(default_factory=list)


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1), nn.ReLU(), nn.Conv3d(out_ch, out_ch, 3, padding=1), nn.ReLU()
    )


def switch_tensor(switch, batch: int, device=None) -> torch.Tensor:
    """Per-sample switch values as a float tensor of shape (batch,)."""
    if isinstance(switch, torch.Tensor):
        s = switch.to(dtype=torch.get_default_dtype(), device=device)
        if s.ndim == 0:
            s = s.expand(batch)
        if s.shape != (batch,):
            raise NetworkConfigError(f"switch tensor must have shape ({batch},), got {tuple(s.shape)}")
        if not s.requires_grad and not bool(((s == 0) | (s == 1)).all()):
            raise NetworkConfigError("switch values must be 0 (remove) or 1 (seed)")
        return s
    try:
        if isinstance(switch, str) or int(switch) != switch:
            raise ValueError(switch)
        value = SwitchState(int(switch))
    except (ValueError, TypeError) as exc:
        raise NetworkConfigError(f"invalid switch value {switch!r}") from exc
    return torch.full((batch,), float(value), device=device)


class CounterfactualGenerator(nn.Module):
    """U-Net whose bottleneck and skip features get a constant switch tensor added
    (0 = remove lesions, 1 = seed lesions) before decoding; ReLU output."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.init_channels * 2**i for i in range(spec.depth + 1)]
        self.down = nn.ModuleList()
        ch = spec.in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(ch, w))
            ch = w
        self.bottleneck = _double_conv(ch, widths[-1])
        self.ups = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for w_skip, w_below in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.ups.append(nn.ConvTranspose3d(w_below, w_skip, 2, stride=2))
            self.up_convs.append(_double_conv(2 * w_skip, w_skip))
        self.head = nn.Conv3d(widths[0], spec.out_channels, 1)
        # the head sees ReLU features; a mostly negative random init leaves the output ReLU
        # dead everywhere with no gradient, so start it non-negative
        with torch.no_grad():
            self.head.weight.abs_()
            self.head.bias.zero_()

    def encode(self, x) -> LatentCode:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        return LatentCode(self.bottleneck(x), skips)

    @staticmethod
    def inject(code: LatentCode, switch) -> LatentCode:
        s = switch_tensor(switch, code.bottleneck.shape[0], code.bottleneck.device).view(-1, 1, 1, 1, 1)
        return LatentCode(code.bottleneck + s, [f + s for f in code.skips])

    def decode(self, code: LatentCode):
        x = code.bottleneck
        for up, conv, skip in zip(self.ups, self.up_convs, reversed(code.skips)):
            x = conv(torch.cat([up(x), skip], dim=1))
        return F.relu(self.head(x))

    def forward(self, x, switch=SwitchState.REMOVE):
        return self.decode(self.inject(self.encode(x), switch))


class ConvStack(nn.Module):
    """Resolution-preserving plain convolutions."""

    def __init__(self, spec: NetworkSpec, n_layers=4):
        super().__init__()
        w = spec.growth
        layers = []
        ch = spec.in_channels
        for _ in range(n_layers - 1):
            layers += [nn.Conv3d(ch, w, 3, padding=1), nn.ReLU()]
            ch = w
        layers.append(nn.Conv3d(ch, spec.out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def logits(self, x):
        return self.net(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class DenseStack(nn.Module):
    """Stem conv followed by full-resolution dense blocks."""

    def __init__(self, spec: NetworkSpec, n_blocks):
        super().__init__()
        self.stem = nn.Conv3d(spec.in_channels, spec.init_channels, 3, padding=1)
        blocks = []
        ch = spec.init_channels
        for _ in range(n_blocks):
            blocks.append(DenseBlock(ch, spec.growth, spec.layers_per_block))
            ch = blocks[-1].out_channels
        self.blocks = nn.Sequential(*blocks)
        self.norm = nn.BatchNorm3d(ch)
        self.head = nn.Conv3d(ch, spec.out_channels, 1)

    def logits(self, x):
        return self.head(F.relu(self.norm(self.blocks(self.stem(x)))))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


# ---------------------------------------------------------------- builders


def build_tseg(spec: NetworkSpec) -> DenseUNet:
    if spec.kind != "tseg":
        raise NetworkConfigError(f"build_tseg needs kind 'tseg', got {spec.kind!r}")
    if spec.in_channels != 1 or spec.out_channels != 4:
        raise NetworkConfigError(
            f"tissue network maps 1 channel to 4 classes, got {spec.in_channels} -> {spec.out_channels}"
        )
    return DenseUNet(spec)


def encoder_matches(cls_spec: NetworkSpec, tseg_spec: NetworkSpec) -> bool:
    keys = ("in_channels", "depth", "growth", "init_channels", "layers_per_block")
    return all(getattr(cls_spec, k) == getattr(tseg_spec, k) for k in keys)


def build_cls(spec: NetworkSpec, tseg_encoder_spec: NetworkSpec) -> Classifier:
    if spec.kind != "cls":
        raise NetworkConfigError(f"build_cls needs kind 'cls', got {spec.kind!r}")
    if spec.out_channels != 2:
        raise NetworkConfigError("classifier has exactly two outputs")
    if tseg_encoder_spec.kind != "tseg" or not encoder_matches(spec, tseg_encoder_spec):
        raise NetworkConfigError("classifier encoder must share the tissue network encoder topology")
    return Classifier(spec)


def build_cmg(spec: NetworkSpec) -> CounterfactualGenerator:
    if spec.kind != "cmg":
        raise NetworkConfigError(f"build_cmg needs kind 'cmg', got {spec.kind!r}")
    if spec.in_channels != spec.out_channels:
        raise NetworkConfigError("CF map must have the same channel count as the input patch")
    return CounterfactualGenerator(spec)


def build_pseg(spec: NetworkSpec, full_depth: int = 3) -> nn.Module:
    if spec.kind != "pseg":
        raise NetworkConfigError(f"build_pseg needs kind 'pseg', got {spec.kind!r}")
    if spec.out_channels != 1:
        raise NetworkConfigError("lesion network has a single output channel")
    v = spec.variant
    if v == "conv4":
        model = ConvStack(spec)
        head = model.net[-1]
    elif v in ("dense1", "dense2"):
        model = DenseStack(spec, int(v[-1]))
        head = model.head
    else:
        depth = {"dunet_d1": 1, "dunet_d2": 2, "dunet_full": full_depth}[v]
        model = DenseUNet(spec, depth=depth)
        head = model.decoder.head
    with torch.no_grad():
        head.bias.fill_(math.log(PSEG_PRIOR / (1 - PSEG_PRIOR)))
    return model


def build(spec: NetworkSpec, tseg_spec: NetworkSpec | None = None) -> nn.Module:
    if spec.kind == "tseg":
        return build_tseg(spec)
    if spec.kind == "cls":
        return build_cls(spec, tseg_spec if tseg_spec is not None else _tseg_twin(spec))
    if spec.kind == "cmg":
        return build_cmg(spec)
    return build_pseg(spec)


def _tseg_twin(cls_spec: NetworkSpec) -> NetworkSpec:
    d = cls_spec.to_dict()
    d.update(kind="tseg", out_channels=4, variant=None)
    return NetworkSpec(**d)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def parameter_hash(network: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(network.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def checkpoint_paths(directory, stage: str, epoch: int) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{stage}.{epoch}.ckpt", directory / f"{stage}.{epoch}.json"


def save_checkpoint(network: nn.Module, spec: NetworkSpec, directory, stage: str, epoch: int, seed: int, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob(f"{stage}.*.ckpt"):
        if old.name.split(".")[0] == stage:
            old.unlink()
            old.with_suffix(".json").unlink(missing_ok=True)
    ckpt, sidecar = checkpoint_paths(directory, stage, epoch)
    state = {k: v.detach().cpu().clone() for k, v in network.state_dict().items()}
    torch.save(state, ckpt)
    meta = {"stage": stage, "epoch": epoch, "seed": seed, "spec": spec.to_dict(), "param_hash": parameter_hash(network)}
    if extra:
        meta.update(extra)
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ckpt


def find_checkpoint(directory, stage: str) -> Path | None:
    hits = [p for p in Path(directory).glob(f"{stage}.*.ckpt") if p.name.split(".")[0] == stage]
    if not hits:
        return None
    return max(hits, key=lambda p: int(p.name.split(".")[1]))


def load_checkpoint(directory, stage: str) -> tuple[nn.Module, dict]:
    ckpt = find_checkpoint(directory, stage)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoint for stage {stage!r} in {directory}")
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    spec = NetworkSpec(**meta["spec"])
    net = build(spec)
    net.load_state_dict(torch.load(ckpt, weights_only=True))
    net.eval()
    return net, meta


# ---------------------------------------------------------------- P-SEG input fusion

FUSION_ORDER = ("t1", "sp", "cf")
FUSION_WIDTH = {"t1": 1, "sp": 4, "cf": 1}
ABLATION_FUSIONS = (("sp",), ("cf",), ("sp", "t1"), ("cf", "t1"), ("sp", "cf"), ("sp", "cf", "t1"))
BASELINE_FUSION = ("t1",)


def parse_fusion(fusion) -> tuple[str, ...]:
    """Canonical channel tuple from a string like ``"sp,cf,t1"`` or any iterable of names."""
    if isinstance(fusion, str):
        fusion = [f for f in fusion.replace("+", ",").split(",") if f.strip()]
    names = {f.strip().lower() for f in fusion}
    unknown = names - set(FUSION_ORDER)
    if unknown or not names:
        raise NetworkConfigError(f"fusion must be a non-empty subset of {FUSION_ORDER}, got {sorted(names)}")
    return tuple(n for n in FUSION_ORDER if n in names)


def fusion_tag(fusion) -> str:
    return "+".join(parse_fusion(fusion))


def fusion_channels(fusion) -> int:
    return sum(FUSION_WIDTH[n] for n in parse_fusion(fusion))


def fuse(t1, sp, cf, fusion):
    """Concatenate (B,1,..) t1, (B,4,..) SP map and (B,1,..) CF map along channels."""
    parts = {"t1": t1, "sp": sp, "cf": cf}
    chosen = [parts[n] for n in parse_fusion(fusion)]
    if any(c is None for c in chosen):
        raise NetworkConfigError("fusion requests a channel that was not computed")
    return torch.cat(chosen, dim=1)
