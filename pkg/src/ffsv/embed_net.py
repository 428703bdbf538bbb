"""ResNet speaker-embedding networks with global statistics pooling.

Two variants are provided:

* ``resnet34``: basic two-conv residual blocks, base width 32, blocks
  (3, 4, 6, 3), mean+std pooling (2 x 256 = 512), 128-d embedding.
* ``resnet50``: bottleneck blocks, base width 64 (x4 expansion), blocks
  (3, 4, 6, 5), mean-only pooling (2048), 1024-d embedding.

Inputs are (batch, frames, features) matrices; internally they are laid out
as single-channel images of shape (batch, 1, features, frames).
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.overrides import TorchFunctionMode

from . import _binio
from .errors import DimensionMismatchError, TooShortError

log = logging.getLogger(__name__)

GSP_EPS = 1e-5
MODEL_MAGIC = b"FFSVMODL"


@dataclass
class NetworkConfig:
    variant: str = "resnet34"
    width_multiplier: float = 1.0
    block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    embedding_dim: int = 128
    n_classes: int = 10544
    pooling: str = "mean_std"
    input_dim: int = 64

    def __post_init__(self):
        if self.variant not in ("resnet34", "resnet50"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.pooling not in ("mean_std", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        self.block_counts = tuple(int(b) for b in self.block_counts)
        if len(self.block_counts) != 4 or min(self.block_counts) < 1:
            raise ValueError("block_counts must be four positive integers")

    @classmethod
    def resnet34(cls, **overrides) -> "NetworkConfig":
        return cls(**{**dict(variant="resnet34", block_counts=(3, 4, 6, 3), embedding_dim=128,
                             n_classes=10544, pooling="mean_std", input_dim=64), **overrides})

    @classmethod
    def resnet50(cls, **overrides) -> "NetworkConfig":
        return cls(**{**dict(variant="resnet50", block_counts=(3, 4, 6, 5), embedding_dim=1024,
                             n_classes=2447, pooling="mean", input_dim=30), **overrides})

    @property
    def base_channels(self) -> int:
        base = 32 if self.variant == "resnet34" else 64
        return max(1, int(round(base * self.width_multiplier)))

    @property
    def min_frames(self) -> int:
        return 8 if self.variant == "resnet34" else 16

    def to_json(self) -> str:
        d = asdict(self)
        d["width_multiplier"] = str(Fraction(self.width_multiplier).limit_denominator(1 << 16))
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["width_multiplier"] = float(Fraction(d["width_multiplier"]))
        return cls(**d)


@dataclass
class TrainSchedule:
    initial_lr: float = 0.1
    epochs: int = 50
    decay_every: int = 20
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    crop_frames: int = 300

    def lr(self, epoch: int) -> float:
        # exact decimal arithmetic, one rounding: lr(20) is 0.01, not 0.010000000000000002
        steps = epoch // self.decay_every
        return float(Fraction(repr(self.initial_lr)) * Fraction(repr(self.decay_factor)) ** steps)

    @classmethod
    def resnet34_pretrain(cls, **overrides) -> "TrainSchedule":
        return cls(**{**dict(initial_lr=0.1, epochs=50, decay_every=20, decay_factor=0.1), **overrides})

    @classmethod
    def resnet50(cls, **overrides) -> "TrainSchedule":
        return cls(**{**dict(initial_lr=0.1, epochs=25, decay_every=5, decay_factor=0.1), **overrides})

    @classmethod
    def constant(cls, lr: float, epochs: int, **overrides) -> "TrainSchedule":
        return cls(**{**dict(initial_lr=lr, epochs=epochs, decay_every=max(epochs, 1), decay_factor=1.0),
                      **overrides})


def gsp(feature_map: torch.Tensor, pooling: str = "mean_std") -> torch.Tensor:
    """Global statistics pooling over all frequency x time positions.

    ``feature_map`` is (C, F, T) or (B, C, F, T). ``mean_std`` concatenates the
    per-channel mean and sqrt(population variance + 1e-5).
    """
    squeeze = feature_map.dim() == 3
    x = feature_map.unsqueeze(0) if squeeze else feature_map
    flat = x.flatten(2)
    mean = flat.mean(dim=2)
    if pooling == "mean":
        out = mean
    elif pooling == "mean_std":
        if flat.shape[2] < 2:
            raise TooShortError("mean+std pooling needs at least two spatial positions")
        var = ((flat - mean.unsqueeze(2)) ** 2).mean(dim=2)
        out = torch.cat([mean, torch.sqrt(var + GSP_EPS)], dim=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return out.squeeze(0) if squeeze else out


def _conv_bn(c_in, c_out, kernel, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2 if isinstance(kernel, int) else
                  tuple(k // 2 for k in kernel), bias=False),
        nn.BatchNorm2d(c_out),
    )


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, c_in: int, width: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv_bn(c_in, width, 3, stride)
        self.conv2 = _conv_bn(width, width, 3, 1)
        self.shortcut = None
        if stride != 1 or c_in != width:
            self.shortcut = _conv_bn(c_in, width, 1, stride)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in: int, width: int, stride: int = 1):
        super().__init__()
        c_out = width * self.expansion
        self.conv1 = _conv_bn(c_in, width, 1, 1)
        self.conv2 = _conv_bn(width, width, 3, stride)
        self.conv3 = _conv_bn(width, c_out, 1, 1)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = _conv_bn(c_in, c_out, 1, stride)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        out = self.conv3(out)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class SpeakerResNet(nn.Module):
    """Front-end ResNet, statistics pooling, embedding FC and classifier FC."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        base = config.base_channels
        if config.variant == "resnet34":
            block, strides = BasicBlock, (1, 2, 2, 2)
            self.stem = _conv_bn(1, base, 3, 1)
        else:
            # 7x7 stem halves frequency only; every residual layer halves both axes
            block, strides = Bottleneck, (2, 2, 2, 2)
            self.stem = nn.Sequential(
                nn.Conv2d(1, base, 7, stride=(2, 1), padding=3, bias=False),
                nn.BatchNorm2d(base),
            )
        layers = []
        c_in = base
        for i, (n_blocks, stride) in enumerate(zip(config.block_counts, strides)):
            width = base * 2**i
            blocks = []
            for j in range(n_blocks):
                blocks.append(block(c_in, width, stride if j == 0 else 1))
                c_in = width * block.expansion
            layers.append(nn.Sequential(*blocks))
        self.layers = nn.ModuleList(layers)
        self.encoding_dim = c_in * (2 if config.pooling == "mean_std" else 1)
        self.embedding = nn.Linear(self.encoding_dim, config.embedding_dim)
        self.classifier = nn.Linear(config.embedding_dim, config.n_classes)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        self.reset_classifier(self.config.n_classes)

    def reset_classifier(self, n_classes: int) -> None:
        """Fresh classifier with near-zero logits, so the initial loss is ~log(n_classes)."""
        if n_classes != self.classifier.out_features:
            self.classifier = nn.Linear(self.config.embedding_dim, n_classes).to(
                self.embedding.weight.dtype
            )
            self.config = replace(self.config, n_classes=n_classes)
        nn.init.normal_(self.classifier.weight, std=0.01)
        nn.init.zeros_(self.classifier.bias)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.dim() != 3:
            raise DimensionMismatchError("expected (batch, frames, features) input")
        if x.shape[2] != self.config.input_dim:
            raise DimensionMismatchError(
                f"network expects {self.config.input_dim}-d features, got {x.shape[2]}"
            )
        if x.shape[1] < self.config.min_frames:
            raise TooShortError(f"need at least {self.config.min_frames} frames, got {x.shape[1]}")
        return x.transpose(1, 2).unsqueeze(1)

    def frame_level(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        out = F.relu(self.stem(self._check_input(x)))
        if trace is not None:
            trace.append(tuple(out.shape[1:]))
        for layer in self.layers:
            out = layer(out)
            if trace is not None:
                trace.append(tuple(out.shape[1:]))
        return out

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (embedding, logits)."""
        encoding = gsp(self.frame_level(x), self.config.pooling)
        emb = self.embedding(encoding)
        return emb, self.classifier(emb)

    def trace_shapes(self, x: torch.Tensor) -> dict[str, tuple[int, ...]]:
        """Per-stage output shapes (without batch dim) for one forward pass."""
        trace: list = []
        with torch.no_grad():
            fmap = self.frame_level(x, trace)
            enc = gsp(fmap, self.config.pooling)
            emb = self.embedding(enc)
            logits = self.classifier(emb)
        names = ["conv1", "layer1", "layer2", "layer3", "layer4"]
        shapes = dict(zip(names, trace))
        shapes["encoding"] = tuple(enc.shape[1:])
        shapes["embedding"] = tuple(emb.shape[1:])
        shapes["classifier"] = tuple(logits.shape[1:])
        return shapes


def build_model(config: NetworkConfig, seed: int = 0) -> SpeakerResNet:
    torch.manual_seed(seed)
    return SpeakerResNet(config)


def _as_tensor(f, dtype=torch.float32) -> torch.Tensor:
    data = f.data if hasattr(f, "data") and not isinstance(f, torch.Tensor) else f
    return torch.as_tensor(np.asarray(data), dtype=dtype)


def forward(m: SpeakerResNet, f, mode: str = "eval") -> tuple[np.ndarray, np.ndarray]:
    """Single-utterance forward pass returning numpy (embedding, logits)."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    was_training = m.training
    m.train(mode == "train")
    dtype = next(m.parameters()).dtype
    try:
        with torch.no_grad():
            emb, logits = m(_as_tensor(f, dtype).unsqueeze(0))
    finally:
        m.train(was_training)
    return emb[0].double().numpy(), logits[0].double().numpy()


def extract_embedding(m: SpeakerResNet, f) -> np.ndarray:
    """Eval-mode embedding of the whole utterance (no cropping)."""
    return forward(m, f, "eval")[0]


def embed_waveform(m: SpeakerResNet, w, kind: str | None = None) -> np.ndarray:
    from .features import compute_features

    kind = kind or ("logmel" if m.config.variant == "resnet34" else "mfcc")
    return extract_embedding(m, compute_features(w, kind))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.6g}\t{self.loss:.6f}"


def _crop(data: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    t = data.shape[0]
    if t < length:
        data = np.tile(data, (int(math.ceil(length / t)), 1))
        t = data.shape[0]
    start = int(rng.integers(0, t - length + 1))
    return data[start:start + length]


def train(
    m: SpeakerResNet,
    dataset: Sequence[tuple[object, int]],
    sched: TrainSchedule,
    rng: np.random.Generator | None = None,
) -> tuple[SpeakerResNet, list[EpochLog]]:
    """Minibatch SGD with momentum on speaker cross-entropy.

    ``dataset`` is a sequence of (features, label) pairs. A trained copy is
    returned; ``m`` is left untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n_classes = m.config.n_classes
    labels = np.array([int(lbl) for _, lbl in dataset], dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    feats = [np.asarray(f.data if hasattr(f, "data") else f, dtype=np.float32) for f, _ in dataset]
    crop = max(sched.crop_frames, m.config.min_frames)

    model = copy.deepcopy(m)
    dtype = next(model.parameters()).dtype
    torch.manual_seed(int(rng.integers(2**31)))
    opt = torch.optim.SGD(model.parameters(), lr=sched.initial_lr, momentum=sched.momentum,
                          weight_decay=sched.weight_decay)
    history: list[EpochLog] = []
    for epoch in range(sched.epochs):
        lr = sched.lr(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(feats))
        total, count = 0.0, 0
        for start in range(0, len(order), sched.batch_size):
            idx = order[start:start + sched.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # batch norm needs more than one sample per batch
            batch = np.stack([_crop(feats[i], crop, rng) for i in idx])
            x = torch.as_tensor(batch, dtype=dtype)
            y = torch.as_tensor(labels[idx])
            _, logits = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        entry = EpochLog(epoch, lr, total / max(count, 1))
        log.info("epoch %d lr %.6g loss %.4f", entry.epoch, entry.lr, entry.loss)
        history.append(entry)
    model.eval()
    return model, history


def fine_tune(
    m: SpeakerResNet,
    dataset: Sequence[tuple[object, int]],
    epochs: int,
    lr: float = 1e-3,
    rng: np.random.Generator | None = None,
    n_classes: int | None = None,
    **sched_overrides,
) -> tuple[SpeakerResNet, list[EpochLog]]:
    """Continue training at a constant learning rate (0.001 by default).

    The classifier is re-initialized when the class count changes.
    """
    model = copy.deepcopy(m)
    n_classes = n_classes if n_classes is not None else len({int(lbl) for _, lbl in dataset})
    if n_classes != model.config.n_classes:
        model.reset_classifier(n_classes)
    if epochs == 0:
        return model, []
    return train(model, dataset, TrainSchedule.constant(lr, epochs, **sched_overrides), rng)


class _ReluSigns(TorchFunctionMode):
    """Records which ReLU inputs are positive during a forward pass."""

    def __init__(self):
        super().__init__()
        self.signs: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if getattr(func, "__name__", "") in ("relu", "relu_"):
            self.signs.append(args[0].detach() > 0)
        return func(*args, **(kwargs or {}))


def _same_signs(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(
    m: nn.Module,
    sample: tuple[object, int] | Sequence[tuple[object, int]],
    epsilon: float = 1e-4,
    n_params: int = 200,
    seed: int = 0,
    floor: float = 1e-7,
    min_epsilon: float = 1e-8,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 eval-mode copy of ``m`` (``m(x)`` must return
    ``(embedding, logits)``). Entries are sampled round-robin over parameter
    tensors so small tensors are covered too. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps gradients below the
    finite-difference resolution from dominating.

    When the +/- step flips the sign of any ReLU input the difference
    straddles a kink and is meaningless, so that entry is re-measured with
    a 10x smaller step (down to ``min_epsilon``).
    """
    model = copy.deepcopy(m).double().eval()
    samples = [sample] if isinstance(sample[1], (int, np.integer)) else list(sample)
    x = torch.stack([_as_tensor(f, torch.float64) for f, _ in samples])
    y = torch.as_tensor([int(lbl) for _, lbl in samples])

    def loss_fn():
        with _ReluSigns() as rec:
            loss = float(F.cross_entropy(model(x)[1], y))
        return loss, rec.signs

    model.zero_grad()
    F.cross_entropy(model(x)[1], y).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    picks: list[tuple[int, int]] = []
    while len(picks) < n_params:
        for k, p in enumerate(params):
            picks.append((k, int(rng.integers(p.numel()))))
    worst = 0.0
    with torch.no_grad():
        for k, i in picks:
            flat = params[k].view(-1)
            analytic = float(params[k].grad.view(-1)[i])
            orig = float(flat[i])
            eps = epsilon
            while True:
                flat[i] = orig + eps
                up, s_up = loss_fn()
                flat[i] = orig - eps
                down, s_down = loss_fn()
                flat[i] = orig
                if _same_signs(s_up, s_down) or eps / 10 < min_epsilon:
                    break
                eps /= 10
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)
    return worst


def save_model(path: str | Path, m: SpeakerResNet) -> None:
    state = m.state_dict()
    with open(path, "wb") as fh:
        _binio.write_header(fh, MODEL_MAGIC)
        _binio.write_str(fh, m.config.to_json())
        _binio.write_u32(fh, len(state))
        for name in sorted(state):
            tensor = state[name].detach().cpu().numpy()
            _binio.write_str(fh, name)
            _binio.write_u32(fh, tensor.ndim)
            for dim in tensor.shape:
                _binio.write_u32(fh, dim)
            _binio.write_array(fh, tensor, "<f4")


def load_model(path: str | Path) -> SpeakerResNet:
    with open(path, "rb") as fh:
        _binio.read_header(fh, MODEL_MAGIC)
        config = NetworkConfig.from_json(_binio.read_str(fh))
        count = _binio.read_u32(fh)
        tensors = {}
        for _ in range(count):
            name = _binio.read_str(fh)
            rank = _binio.read_u32(fh)
            shape = tuple(_binio.read_u32(fh) for _ in range(rank))
            tensors[name] = _binio.read_array(fh, shape, "<f4")
    model = SpeakerResNet(config)
    ref = model.state_dict()
    state = {k: torch.as_tensor(v).to(ref[k].dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model.eval()
