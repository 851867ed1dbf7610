"""TraNet encoder-decoder and the CNN6 baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError
from ..patches import PatchLayout


@dataclass(frozen=True)
class NetConfig:
    """Structure of a TraNet.

    Filter counts are multiplied by ``scale``. The encoder pools once per
    entry of ``enc_filters``; the decoder mirrors it and ends on the L x L
    output window.
    """

    k_t: int = 64
    k_x: int = 64
    l_t: int = 32
    l_x: int = 32
    stem_filters: tuple[int, ...] = (4, 4)
    stem_kernel: int = 5
    enc_filters: tuple[int, ...] = (8, 16, 32, 64)
    bottleneck_filters: int = 128
    bottleneck_convs: int = 2
    dec_filters: tuple[int, ...] = (64, 32, 16, 8)
    convs_per_stage: int = 1
    head_filters: int = 8
    head_convs: int = 4
    kernel: int = 3
    scale: float = 1.0

    def width(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    @property
    def layout(self) -> PatchLayout:
        return PatchLayout(self.k_t, self.k_x, self.l_t, self.l_x)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stem_filters", "enc_filters", "dec_filters"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("stem_filters", "enc_filters", "dec_filters"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def toy_config(layout: PatchLayout = PatchLayout()) -> NetConfig:
    return NetConfig(k_t=layout.k_t, k_x=layout.k_x, l_t=layout.l_t, l_x=layout.l_x)


def paper_config(layout: PatchLayout = PatchLayout()) -> NetConfig:
    """Full-size network: three 3D stem layers, two convolutions per stage."""
    return replace(
        toy_config(layout),
        stem_filters=(32, 32, 32),
        enc_filters=(48, 96, 192, 384),
        bottleneck_filters=384,
        bottleneck_convs=2,
        dec_filters=(256, 128, 64, 32),
        convs_per_stage=2,
        head_filters=32,
    )


PRESETS = {"toy": toy_config, "paper": paper_config}


def _conv_block(cin: int, cout: int, k: int, n: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for m in range(n):
        layers += [nn.Conv2d(cin if m == 0 else cout, cout, k, padding=k // 2),
                   nn.ReLU(inplace=True), nn.BatchNorm2d(cout)]
    return nn.Sequential(*layers)


def _center(x: torch.Tensor, start: tuple[int, int], size: tuple[int, int]) -> torch.Tensor:
    return x[..., start[0]:start[0] + size[0], start[1]:start[1] + size[1]]


class DepthConv(nn.Module):
    """3D convolution with kernel (2, k, k) over a depth-2 volume, depth padded at the end.

    Same result as ``nn.Conv3d`` on ``F.pad(x, (0, 0, 0, 0, 0, 1))``, computed
    as two 2D convolutions, which is several times faster on CPU.
    """

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, 2, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.k = k
        nn.init.xavier_uniform_(self.weight)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h0, h1 = h[:, :, 0], h[:, :, 1]
        w0, w1 = self.weight[:, :, 0], self.weight[:, :, 1]
        pad = self.k // 2
        y0 = F.conv2d(torch.cat([h0, h1], 1), torch.cat([w0, w1], 1), self.bias, padding=pad)
        y1 = F.conv2d(h1, w0, self.bias, padding=pad)
        return torch.stack([y0, y1], 2)


def glorot_init(model: nn.Module):
    """Glorot-uniform weights and zero biases.

    TraNet's 1x1 output layer starts at zero: it reads batch-normalized
    features, and Glorot weights there spread the first predictions over
    roughly +-115 km/h, most of them pinned at the speed limits.
    """
    for mod in model.modules():
        if isinstance(mod, DepthConv):
            nn.init.xavier_uniform_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, (nn.Conv2d, nn.Conv3d)):
            nn.init.xavier_uniform_(mod.weight)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
    if isinstance(model, TraNet):
        nn.init.zeros_(model.out.weight)


class TraNet(nn.Module):
    """(B, 2, K_T, K_X) speed/occupancy patches -> (B, L_T, L_X) normalized speeds.

    The 3D stem convolves speed and occupancy jointly (depth 2) before a
    max-pool over depth. A U-net style encoder/decoder follows; the last
    upsampling step works on the centered output window only, so output cell
    (a, b) lines up with input cell (a + margin, b + margin).
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        depth = len(cfg.enc_filters)
        if depth < 1 or len(cfg.dec_filters) != depth:
            raise ValidationError("dec_filters must mirror enc_filters")
        layout = cfg.layout  # validates K >= L and even margins
        step = 2 ** depth
        for k, l in ((layout.k_t, layout.l_t), (layout.k_x, layout.l_x)):
            if k % step:
                raise ValidationError(f"input size {k} not divisible by 2^{depth}")
            if l % 2 or ((k - l) // 2) % 2:
                raise ValidationError(f"output size {l} / margin {(k - l) // 2} must be even")
        w = cfg.width

        stem = []
        cin = 1
        for f in cfg.stem_filters:
            stem.append(DepthConv(cin, w(f), cfg.stem_kernel))
            stem.append(nn.BatchNorm3d(w(f)))
            cin = w(f)
        self.stem = nn.ModuleList(stem)

        self.encoder = nn.ModuleList()
        skips = []
        for f in cfg.enc_filters:
            self.encoder.append(_conv_block(cin, w(f), cfg.kernel, cfg.convs_per_stage))
            cin = w(f)
            skips.append(cin)
        self.bottleneck = _conv_block(cin, w(cfg.bottleneck_filters), cfg.kernel, cfg.bottleneck_convs)
        cin = w(cfg.bottleneck_filters)

        self.decoder = nn.ModuleList()
        for f, skip in zip(cfg.dec_filters, reversed(skips)):
            self.decoder.append(_conv_block(cin + skip, w(f), cfg.kernel, cfg.convs_per_stage))
            cin = w(f)
        self.head = _conv_block(cin, w(cfg.head_filters), cfg.kernel, cfg.head_convs)
        self.out = nn.Conv2d(w(cfg.head_filters), 1, 1)
        glorot_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        h = x.unsqueeze(1)  # (B, 1, depth=2, K_T, K_X)
        for k in range(0, len(self.stem), 2):
            h = self.stem[k + 1](F.relu(self.stem[k](h)))
        h = h.amax(dim=2)  # max-pool over depth

        feats = []
        for block in self.encoder:
            h = block(h)
            feats.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)

        m_t, m_x = (cfg.k_t - cfg.l_t) // 2, (cfg.k_x - cfg.l_x) // 2
        for s, block in zip(range(len(feats) - 1, -1, -1), self.decoder):
            skip = feats[s]
            if s == 0:
                # crop to the output window (plus one cell of context) before upsampling
                pad_t, pad_x = min(1, m_t // 2), min(1, m_x // 2)
                h = _center(h, (m_t // 2 - pad_t, m_x // 2 - pad_x),
                            (cfg.l_t // 2 + 2 * pad_t, cfg.l_x // 2 + 2 * pad_x))
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
                h = _center(h, (2 * pad_t, 2 * pad_x), (cfg.l_t, cfg.l_x))
                skip = _center(skip, (m_t, m_x), (cfg.l_t, cfg.l_x))
            else:
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        h = self.head(h)
        return self.out(h).squeeze(1)


class CNN6(nn.Module):
    """Three conv/pool encoder stages, three decoder convs with two
    nearest-neighbour upsamplings, and a linear single-channel head.

    The K x K input is mapped to a K/2 x K/2 output covering the whole input
    window at half resolution, as in the original design.
    """

    def __init__(self, layout: PatchLayout = PatchLayout()):
        super().__init__()
        if layout.k_t != 2 * layout.l_t or layout.k_x != 2 * layout.l_x:
            raise ValidationError("CNN6 maps K x K inputs to K/2 x K/2 outputs")
        if layout.k_t % 8 or layout.k_x % 8:
            raise ValidationError("CNN6 input size must be divisible by 8")
        self.layout = layout
        self.enc = nn.ModuleList([
            nn.Conv2d(2, 8, 5, padding=2),
            nn.Conv2d(8, 32, 5, padding=2),
            nn.Conv2d(32, 64, 5, padding=2),
        ])
        self.dec = nn.ModuleList([
            nn.Conv2d(64, 64, 3, padding=1),
            nn.Conv2d(64, 32, 3, padding=1),
            nn.Conv2d(32, 8, 5, padding=2),
        ])
        self.out = nn.Conv2d(8, 1, 5, padding=2)
        glorot_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.enc:
            h = F.max_pool2d(F.relu(conv(h)), 2)
        h = F.relu(self.dec[0](h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec[1](h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec[2](h))
        return self.out(h).squeeze(1)


def build_tranet(cfg: NetConfig = NetConfig()) -> TraNet:
    return TraNet(cfg)


def build_cnn6(layout: PatchLayout = PatchLayout()) -> CNN6:
    return CNN6(layout)


def build(net: str, preset: str = "toy", layout: PatchLayout = PatchLayout()) -> nn.Module:
    if net == "tranet":
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}")
        return build_tranet(PRESETS[preset](layout))
    if net == "cnn6":
        return build_cnn6(layout)
    raise ValidationError(f"unknown network {net!r}")


def model_layout(model: nn.Module) -> PatchLayout:
    return model.cfg.layout if isinstance(model, TraNet) else model.layout


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
