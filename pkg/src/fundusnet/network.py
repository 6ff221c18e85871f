"""The multi-task model: a U-net-style encoder/decoder emitting soft disc
and cup masks, plus a classification branch that pools appearance features
(taken from the encoder bottleneck) together with structural features
(computed from the two soft masks) into a single sigmoid neuron.

Shape ledger for the default 400-input config:
  encoder 400 -> 200 -> 100 -> 50 -> 25 (bottleneck 25 x 25 x 128)
  appearance: one valid 3x3 stride-2 conv, 25 -> 12 (12 x 12 x 5)
  structural: five 3x3 stride-2 convs on the 2-channel mask stack,
              400 -> 200 -> 100 -> 50 -> 25 -> 12 (12 x 12 x 48)
  global average pooling over 5 + 48 = 53 channels -> one neuron
"""

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigShapeError, ShapeError

OUTPUT_CLAMP = 1e-7  # keeps public outputs strictly inside (0, 1)


@dataclass(frozen=True)
class ArchitectureConfig:
    input_side: int = 400
    encoder_widths: tuple = (16, 32, 64, 128)
    decoder_widths: tuple = (64, 32, 16, 16)
    appearance_filters: int = 5
    structural_widths: tuple = (8, 16, 24, 32, 48)
    bottleneck_channels: int = 128
    parameter_budget: int = 700_000
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        object.__setattr__(self, "structural_widths", tuple(self.structural_widths))

    def validate(self):
        if self.input_side % 16 != 0 or self.input_side < 48:
            raise ConfigShapeError("input_side must be a multiple of 16 and at least 48")
        if len(self.encoder_widths) != 4 or len(self.decoder_widths) != 4:
            raise ConfigShapeError("encoder and decoder need exactly four stages")
        if self.encoder_widths[-1] != self.bottleneck_channels:
            raise ConfigShapeError("last encoder width must equal bottleneck_channels")
        if len(self.structural_widths) != 5:
            raise ConfigShapeError("structural path needs five stride-2 convolutions")
        if min(self.encoder_widths + self.decoder_widths + self.structural_widths) < 1:
            raise ConfigShapeError("channel widths must be positive")
        if self.appearance_filters < 1:
            raise ConfigShapeError("appearance_filters must be positive")

    @property
    def bottleneck_side(self):
        return self.input_side // 16

    @property
    def feature_side(self):
        # one unpadded 3x3 stride-2 convolution from the bottleneck
        return (self.bottleneck_side - 3) // 2 + 1

    @property
    def pooled_features(self):
        return self.appearance_filters + self.structural_widths[-1]

    def shape_ledger(self):
        s, f = self.bottleneck_side, self.feature_side
        return {
            "bottleneck": (s, s, self.bottleneck_channels),
            "appearance": (f, f, self.appearance_filters),
            "structural": (f, f, self.structural_widths[-1]),
            "pooled": self.pooled_features,
        }

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        d["structural_widths"] = list(self.structural_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelOutputs:
    """Soft masks and glaucoma probabilities for a batch (numpy arrays)."""

    od_soft: np.ndarray  # B x H x W in (0, 1)
    oc_soft: np.ndarray
    p_glaucoma: np.ndarray  # (B,) in (0, 1)

    def __post_init__(self):
        self.od_soft = np.asarray(self.od_soft)
        self.oc_soft = np.asarray(self.oc_soft)
        self.p_glaucoma = np.asarray(self.p_glaucoma)


def _maybe_bn(channels, enabled):
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


class _EncoderStage(nn.Module):
    def __init__(self, cin, cout, bn):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = _maybe_bn(cout, bn)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = _maybe_bn(cout, bn)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class _DecoderStage(nn.Module):
    """Nearest x2 upsample + conv, skip concatenation, then two convs."""

    def __init__(self, cin, skip, cout, bn):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = _maybe_bn(cout, bn)
        self.conv2 = nn.Conv2d(cout + skip, cout, 3, padding=1)
        self.bn2 = _maybe_bn(cout, bn)
        self.conv3 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn3 = _maybe_bn(cout, bn)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.bn1(self.conv1(x)))
        x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn2(self.conv2(x)))
        return F.relu(self.bn3(self.conv3(x)))


class _Heads(nn.Module):
    def __init__(self, cin):
        super().__init__()
        self.od = nn.Conv2d(cin, 1, 3, padding=1)
        self.oc = nn.Conv2d(cin, 1, 3, padding=1)


class _Appearance(nn.Module):
    def __init__(self, cin, filters, bn):
        super().__init__()
        self.conv = nn.Conv2d(cin, filters, 3, stride=2, padding=0)
        self.bn = _maybe_bn(filters, bn)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class _Structural(nn.Module):
    """Stride-2 convolution stack over the 2-channel soft-mask map; the
    last convolution is unpadded to land on the feature grid."""

    def __init__(self, widths, bn):
        super().__init__()
        cin = 2
        for i, w in enumerate(widths, start=1):
            padding = 1 if i < len(widths) else 0
            setattr(self, f"conv{i}", nn.Conv2d(cin, w, 3, stride=2, padding=padding))
            setattr(self, f"bn{i}", _maybe_bn(w, bn))
            cin = w
        self.depth = len(widths)

    def forward(self, x):
        for i in range(1, self.depth + 1):
            x = F.relu(getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(x)))
        return x


class _Classifier(nn.Module):
    def __init__(self, cin):
        super().__init__()
        self.fc = nn.Linear(cin, 1)


class MultiTaskModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        bn = cfg.batch_norm
        e = cfg.encoder_widths
        d = cfg.decoder_widths

        self.enc1 = _EncoderStage(3, e[0], bn)
        self.enc2 = _EncoderStage(e[0], e[1], bn)
        self.enc3 = _EncoderStage(e[1], e[2], bn)
        self.enc4 = _EncoderStage(e[2], e[3], bn)
        self.pool = nn.MaxPool2d(2)

        self.dec1 = _DecoderStage(e[3], e[3], d[0], bn)
        self.dec2 = _DecoderStage(d[0], e[2], d[1], bn)
        self.dec3 = _DecoderStage(d[1], e[1], d[2], bn)
        self.dec4 = _DecoderStage(d[2], e[0], d[3], bn)

        self.head = _Heads(d[3])
        self.appear = _Appearance(cfg.bottleneck_channels, cfg.appearance_filters, bn)
        self.struct = _Structural(cfg.structural_widths, bn)
        self.cls = _Classifier(cfg.pooled_features)

    def _check_input(self, x):
        side = self.cfg.input_side
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != side or x.shape[3] != side:
            raise ShapeError(f"expected B x 3 x {side} x {side}, got {tuple(x.shape)}")

    def forward_features(self, x):
        """Full forward pass returning outputs and named intermediates."""
        self._check_input(x)
        s1 = self.enc1(x)
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        s4 = self.enc4(self.pool(s3))
        bottleneck = self.pool(s4)

        y = self.dec1(bottleneck, s4)
        y = self.dec2(y, s3)
        y = self.dec3(y, s2)
        y = self.dec4(y, s1)

        od = torch.sigmoid(self.head.od(y))
        oc = torch.sigmoid(self.head.oc(y))

        appearance = self.appear(bottleneck)
        structural = self.struct(torch.cat([od, oc], dim=1))
        pooled = torch.cat([appearance, structural], dim=1).mean(dim=(2, 3))
        p = torch.sigmoid(self.cls.fc(pooled)).squeeze(1)
        return {
            "od": od[:, 0],
            "oc": oc[:, 0],
            "p": p,
            "bottleneck": bottleneck,
            "appearance": appearance,
            "structural": structural,
            "pooled": pooled,
        }

    def forward(self, x):
        feats = self.forward_features(x)
        return feats["od"], feats["oc"], feats["p"]


def _init_arrays(model, seed):
    """Deterministic fan-in variance-scaling init, drawn from one numpy
    stream in registration order."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim >= 2:  # conv / linear weights
                fan_in = int(np.prod(param.shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
            elif "bn" in name and name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


def build_model(cfg=None, seed=0):
    """Construct the model with deterministic initial weights (eval mode)."""
    cfg = cfg or ArchitectureConfig()
    model = MultiTaskModel(cfg)
    _init_arrays(model, seed)
    budget = cfg.parameter_budget
    n = count_parameters(model)
    if n > budget:
        raise ConfigShapeError(f"{n} learnable parameters exceed the budget of {budget}")
    model.eval()
    return model


def count_parameters(model):
    """Number of learnable scalars (BN running stats excluded)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_parameters_by_prefix(model, prefix):
    return sum(
        p.numel()
        for name, p in model.named_parameters()
        if p.requires_grad and name.startswith(prefix)
    )


def to_batch_tensor(images):
    """Normalize a B x H x W x 3 (or H x W x 3) array in [0,1] or uint8 to
    the model's B x 3 x H x W float tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32)
    return torch.from_numpy(arr)


def forward(model, batch):
    """Run the model on a normalized B x H x W x 3 batch.

    Returns ModelOutputs with values clamped strictly inside (0, 1).
    """
    x = to_batch_tensor(batch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        od, oc, p = model(x)
    if was_training:
        model.train()
    clamp = lambda a: np.clip(a, OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP)
    return ModelOutputs(
        clamp(od.numpy()), clamp(oc.numpy()), clamp(p.numpy())
    )
