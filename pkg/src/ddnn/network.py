"""Depth-level dynamic networks: one full net containing weight-sharing sub-nets.

A ``Ddnn`` owns a single parameter set (stem, stages of blocks, classifier).
Each sub-net view keeps the FIRST ``prefix_blocks[i]`` blocks of every stage
and jumps straight to the next stage, so switching depth is pure control
flow over shared weights. Attention tap points sit on the output of every
stage that some sub-net truncates; all nets emit features there at the same
resolution.

``extract_subnet`` materialises a view as a standalone net (depth-level
pruning): same blocks, copied weights, bit-identical eval forward.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Linear, ResidualBlock, global_avg_pool
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, max_pool2d

FAMILIES = ("resnet-basic", "resnet-bottleneck", "vgg")


@dataclass(frozen=True)
class NetConfig:
    """Architecture of a full net (one row of a structure-configuration table)."""

    family: str
    stage_blocks: tuple
    stage_channels: tuple
    num_classes: int
    input_shape: tuple = (3, 32, 32)
    stem: str = "auto"           # conv3 | conv7pool | none | auto
    block_variant: str = "post"  # post | pre activation ordering

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if len(self.stage_blocks) != len(self.stage_channels):
            raise ValueError(f"{len(self.stage_blocks)} stage block counts vs "
                             f"{len(self.stage_channels)} stage channels")
        if not self.stage_blocks or any(b < 1 for b in self.stage_blocks):
            raise ValueError(f"stage block counts must all be >= 1, got {self.stage_blocks}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.stem not in ("auto", "conv3", "conv7pool", "none"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.block_variant not in ("post", "pre"):
            raise ValueError(f"unknown block variant {self.block_variant!r}")

    @property
    def resolved_stem(self) -> str:
        if self.family == "vgg":
            return "none"
        if self.stem != "auto":
            return self.stem
        return "conv7pool" if self.input_shape[1] >= 64 else "conv3"

    @property
    def expansion(self) -> int:
        return 4 if self.family == "resnet-bottleneck" else 1

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1] * self.expansion

    def stage_stride(self, stage: int) -> int:
        if self.family == "vgg":
            return 1  # vgg downsamples with the pool after each stage
        return 1 if stage == 0 else 2


@dataclass(frozen=True)
class SubnetSpec:
    """A depth view: per-stage prefix of blocks kept, plus classifier sharing."""

    prefix_blocks: tuple
    classifier_mode: str = "shared"

    def __post_init__(self):
        object.__setattr__(self, "prefix_blocks", tuple(int(b) for b in self.prefix_blocks))
        if self.classifier_mode not in ("shared", "private"):
            raise ValueError(f"classifier_mode must be shared|private, got {self.classifier_mode!r}")

    def validate_against(self, cfg: NetConfig) -> None:
        full = cfg.stage_blocks
        if len(self.prefix_blocks) != len(full):
            raise ValueError(f"sub-net has {len(self.prefix_blocks)} stages, full net has {len(full)}")
        for i, (m, n) in enumerate(zip(self.prefix_blocks, full)):
            if not 1 <= m <= n:
                raise ValueError(f"sub-net stage {i + 1} keeps {m} of {n} blocks; need 1 <= kept <= {n}")
        if self.prefix_blocks == full:
            raise ValueError("sub-net equals the full net; at least one stage must be strictly smaller")


# ---------------------------------------------------------------------------


class _Stem:
    def __init__(self, kind: str, in_channels: int, out_channels: int, rng, dtype):
        self.kind = kind
        if kind == "conv3":
            self.conv = Conv2d(in_channels, out_channels, 3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.bn = BatchNorm2d(out_channels, dtype=dtype)
        elif kind == "conv7pool":
            self.conv = Conv2d(in_channels, out_channels, 7, stride=2, padding=3, rng=rng, dtype=dtype)
            self.bn = BatchNorm2d(out_channels, dtype=dtype)
        elif kind == "none":
            self.conv = None
            self.bn = None
        else:
            raise ValueError(f"unknown stem kind {kind!r}")

    def forward(self, x: Tensor, mode: str, stats_cache=None) -> Tensor:
        if self.conv is None:
            return x
        h = self.bn.forward(self.conv.forward(x), mode, stats_cache).relu()
        if self.kind == "conv7pool":
            h = max_pool2d(h, 3, stride=2, padding=1)
        return h

    def named_parameters(self, prefix: str = ""):
        if self.conv is not None:
            yield from self.conv.named_parameters(prefix + "conv.")
            yield from self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix: str = ""):
        if self.conv is not None:
            yield from self.bn.named_buffers(prefix + "bn.")


class Ddnn:
    """Full net plus K sub-net views over one shared parameter registry.

    Net index 0 is the full net; 1..K follow ``subnets`` order. Use
    ``build_ddnn`` to construct.
    """

    def __init__(self, cfg: NetConfig, subnets: Sequence[SubnetSpec], seed: int = 0,
                 dtype=DEFAULT_DTYPE, tap_stages: Optional[Sequence[int]] = None):
        cfg = cfg if isinstance(cfg, NetConfig) else NetConfig(**cfg)
        subnets = tuple(subnets)
        for spec in subnets:
            spec.validate_against(cfg)
        if len(set(subnets)) != len(subnets):
            raise ValueError("duplicate sub-net specs")
        self.cfg = cfg
        self.subnets = subnets
        self.dtype = dtype

        split_stages = tuple(sorted({i for spec in subnets
                                     for i, (m, n) in enumerate(zip(spec.prefix_blocks, cfg.stage_blocks))
                                     if m < n}))
        if tap_stages is None:
            self.tap_stages = split_stages
        else:
            self.tap_stages = tuple(sorted(int(i) for i in tap_stages))
            bad = set(self.tap_stages) - set(split_stages)
            if bad:
                raise ValueError(f"tap stages {sorted(bad)} have no split in any sub-net")

        rng = np.random.default_rng(seed)
        in_ch = cfg.input_shape[0]
        stem_out = cfg.stage_channels[0] if cfg.resolved_stem != "none" else in_ch
        self.stem = _Stem(cfg.resolved_stem, in_ch, stem_out, rng, dtype)

        self.stages: list = []
        ch = stem_out
        for si, (count, width) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            blocks = []
            for j in range(count):
                stride = cfg.stage_stride(si) if j == 0 else 1
                if cfg.family == "vgg":
                    block = ConvBnRelu(ch, width, stride=stride, rng=rng, dtype=dtype)
                else:
                    kind = "basic" if cfg.family == "resnet-basic" else "bottleneck"
                    block = ResidualBlock(kind, ch, width, stride=stride,
                                          variant=cfg.block_variant, rng=rng, dtype=dtype)
                ch = block.out_channels
                blocks.append(block)
            self.stages.append(blocks)

        self.classifier = Linear(cfg.feature_dim, cfg.num_classes, rng=rng, dtype=dtype)
        self.private_classifiers: dict = {}
        for k, spec in enumerate(subnets, start=1):
            if spec.classifier_mode == "private":
                self.private_classifiers[k] = Linear(cfg.feature_dim, cfg.num_classes,
                                                     rng=rng, dtype=dtype)

    # -- views ---------------------------------------------------------------

    @property
    def num_subnets(self) -> int:
        return len(self.subnets)

    @property
    def net_names(self) -> list:
        return ["full"] + [f"sub{k}" for k in range(1, len(self.subnets) + 1)]

    def prefixes_of(self, net_index: int) -> tuple:
        if not 0 <= net_index <= len(self.subnets):
            raise IndexError(f"net index {net_index} out of range 0..{len(self.subnets)}")
        if net_index == 0:
            return self.cfg.stage_blocks
        return self.subnets[net_index - 1].prefix_blocks

    def classifier_for(self, net_index: int) -> Linear:
        return self.private_classifiers.get(net_index, self.classifier)

    def _check_batch(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match input shape "
                             f"N×{self.cfg.input_shape}")

    def _transition(self, h: Tensor) -> Tensor:
        return max_pool2d(h, 2) if self.cfg.family == "vgg" else h

    def forward_net(self, net_index: int, x: Tensor, mode: str,
                    stats_cache: Optional[dict] = None) -> tuple:
        """Run one net view; returns (logits, tapped stage features in stage order)."""
        self._check_batch(x)
        prefixes = self.prefixes_of(net_index)
        h = self.stem.forward(x, mode, stats_cache)
        feats = []
        for si, stage in enumerate(self.stages):
            for block in stage[:prefixes[si]]:
                h = block.forward(h, mode, stats_cache)
            if si in self.tap_stages:
                feats.append(h)
            h = self._transition(h)
        logits = self.classifier_for(net_index).forward(global_avg_pool(h))
        return logits, feats

    def forward_all(self, x: Tensor, mode: str, stats_cache: Optional[dict] = None,
                    reuse: bool = True) -> list:
        """Forward every net view; returns [(logits, feats), ...] for nets 0..K.

        With ``reuse`` each sub-net adopts the full net's activations up to
        the first stage where its block prefix is shorter, then recomputes.
        Combined with a shared ``stats_cache`` this keeps one set of BN batch
        statistics per step and updates the running buffers exactly once.
        """
        self._check_batch(x)
        stage_in: list = []
        block_out: dict = {}
        h = self.stem.forward(x, mode, stats_cache)
        feats0 = []
        for si, stage in enumerate(self.stages):
            stage_in.append(h)
            for j, block in enumerate(stage):
                h = block.forward(h, mode, stats_cache)
                block_out[(si, j)] = h
            if si in self.tap_stages:
                feats0.append(h)
            h = self._transition(h)
        logits0 = self.classifier_for(0).forward(global_avg_pool(h))
        results = [(logits0, feats0)]

        for k, spec in enumerate(self.subnets, start=1):
            if not reuse:
                results.append(self.forward_net(k, x, mode, stats_cache))
                continue
            feats = []
            h = None
            diverged = False
            for si, stage in enumerate(self.stages):
                m = spec.prefix_blocks[si]
                if diverged:
                    for block in stage[:m]:
                        h = block.forward(h, mode, stats_cache)
                    out = h
                else:
                    out = block_out[(si, m - 1)]
                    if m < self.cfg.stage_blocks[si]:
                        diverged = True
                if si in self.tap_stages:
                    feats.append(out)
                if diverged:
                    h = self._transition(out)
            logits = self.classifier_for(k).forward(global_avg_pool(h))
            results.append((logits, feats))
        return results

    # -- registry --------------------------------------------------------------

    def named_parameters(self):
        yield from self.stem.named_parameters("stem.")
        for si, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage, start=1):
                yield from block.named_parameters(f"stage{si}.block{j}.")
        yield from self.classifier.named_parameters("classifier.")
        for k in sorted(self.private_classifiers):
            yield from self.private_classifiers[k].named_parameters(f"sub{k}.classifier.")

    def named_buffers(self):
        yield from self.stem.named_buffers("stem.")
        for si, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage, start=1):
                yield from block.named_buffers(f"stage{si}.block{j}.")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def named_state(self) -> dict:
        """Every learnable tensor plus BN running buffers, as numpy arrays."""
        state = {name: t.data for name, t in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state(self, state: dict) -> None:
        own = self.named_state()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, dst in own.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src.astype(dst.dtype, copy=False)


def build_ddnn(cfg: NetConfig, subnets: Sequence[SubnetSpec] = (), seed: int = 0,
               dtype=DEFAULT_DTYPE, tap_stages: Optional[Sequence[int]] = None) -> Ddnn:
    """Instantiate a DDNN: shared parameters plus K+1 runnable views."""
    return Ddnn(cfg, subnets, seed=seed, dtype=dtype, tap_stages=tap_stages)


def extract_subnet(ddnn: Ddnn, k: int) -> Ddnn:
    """Materialise net view k (0 = full) as a standalone K=0 net.

    The result holds copies of exactly the blocks the view executes; its
    eval-mode forward matches ``forward_net(ddnn, k, ...)`` bit for bit.
    """
    if not 0 <= k <= len(ddnn.subnets):
        raise IndexError(f"sub-net index {k} out of range 0..{len(ddnn.subnets)}")
    prefixes = ddnn.prefixes_of(k)
    cfg = ddnn.cfg if k == 0 else dataclasses.replace(ddnn.cfg, stage_blocks=prefixes)
    out = Ddnn(cfg, (), seed=0, dtype=ddnn.dtype)

    _copy_layer(ddnn.stem, out.stem)
    for si, count in enumerate(prefixes):
        for j in range(count):
            _copy_layer(ddnn.stages[si][j], out.stages[si][j])
    _copy_layer(ddnn.classifier_for(k), out.classifier)
    return out


def _copy_layer(src, dst) -> None:
    for (sn, sp), (dn, dp) in zip(src.named_parameters(), dst.named_parameters()):
        if sn != dn or sp.shape != dp.shape:
            raise ShapeError(f"layer copy mismatch: {sn}{sp.shape} -> {dn}{dp.shape}")
        dp.data[...] = sp.data
    for (sn, sb), (dn, db) in zip(src.named_buffers(), dst.named_buffers()):
        db[...] = sb


# -- structural accounting ----------------------------------------------------


def _architecture_ops(cfg: NetConfig, prefix_blocks: Optional[Sequence[int]] = None,
                      input_shape: Optional[Sequence[int]] = None):
    """Yield ("conv", oc, ic, k, oh, ow) / ("bn", c) / ("linear", fin, fout) in
    forward order for one net view, with output spatial sizes resolved
    (the residual shortcut branch starts from the block input resolution)."""
    blocks = tuple(prefix_blocks) if prefix_blocks is not None else cfg.stage_blocks
    ch, h, w = tuple(input_shape) if input_shape is not None else cfg.input_shape

    def down(n, k, stride, pad):
        return (n + 2 * pad - k) // stride + 1

    stem = cfg.resolved_stem
    if stem in ("conv3", "conv7pool"):
        k, stride, pad = (3, 1, 1) if stem == "conv3" else (7, 2, 3)
        h, w = down(h, k, stride, pad), down(w, k, stride, pad)
        yield ("conv", cfg.stage_channels[0], ch, k, h, w)
        yield ("bn", cfg.stage_channels[0])
        ch = cfg.stage_channels[0]
        if stem == "conv7pool":
            h, w = down(h, 3, 2, 1), down(w, 3, 2, 1)

    for si, (count, width) in enumerate(zip(blocks, cfg.stage_channels)):
        for j in range(count):
            stride = cfg.stage_stride(si) if j == 0 else 1
            if cfg.family == "vgg":
                h, w = down(h, 3, stride, 1), down(w, 3, stride, 1)
                yield ("conv", width, ch, 3, h, w)
                yield ("bn", width)
                ch = width
                continue
            out = width * cfg.expansion
            in_h, in_w = h, w
            h, w = down(h, 3, stride, 1), down(w, 3, stride, 1)
            if cfg.family == "resnet-basic":
                yield ("conv", width, ch, 3, h, w)
                yield ("bn", width)
                yield ("conv", width, width, 3, h, w)
                yield ("bn", width)
            else:
                yield ("conv", width, ch, 1, in_h, in_w)
                yield ("bn", width)
                yield ("conv", width, width, 3, h, w)
                yield ("bn", width)
                yield ("conv", out, width, 1, h, w)
                yield ("bn", out)
            if stride != 1 or ch != out:
                yield ("conv", out, ch, 1, h, w)
                yield ("bn", out)
            ch = out
        if cfg.family == "vgg":
            h, w = down(h, 2, 2, 0), down(w, 2, 2, 0)
    yield ("linear", ch, cfg.num_classes)


def count_params(cfg: NetConfig, prefix_blocks: Optional[Sequence[int]] = None) -> int:
    """Trainable scalar count of one net view (convs, BN affine, classifier)."""
    total = 0
    for op in _architecture_ops(cfg, prefix_blocks):
        if op[0] == "conv":
            _, oc, ic, k, _, _ = op
            total += oc * ic * k * k
        elif op[0] == "bn":
            total += 2 * op[1]
        elif op[0] == "linear":
            total += op[1] * op[2] + op[2]
    return total


def count_flops(cfg: NetConfig, input_shape: Optional[Sequence[int]] = None,
                prefix_blocks: Optional[Sequence[int]] = None) -> int:
    """Per-image forward multiply-accumulate count over convs and linear layers."""
    total = 0
    for op in _architecture_ops(cfg, prefix_blocks, input_shape):
        if op[0] == "conv":
            _, oc, ic, k, oh, ow = op
            total += oc * ic * k * k * oh * ow
        elif op[0] == "linear":
            total += op[1] * op[2]
    return total


def ddnn_param_count(cfg: NetConfig, subnets: Sequence[SubnetSpec] = ()) -> int:
    """Distinct trainable parameters of a whole DDNN (weight sharing honoured)."""
    total = count_params(cfg)
    private = sum(1 for s in subnets if s.classifier_mode == "private")
    total += private * (cfg.feature_dim * cfg.num_classes + cfg.num_classes)
    return total


def human_count(n: int) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.1f}G"
    if n >= 1e6:
        return f"{n / 1e6:.1f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return str(n)


# -- common configurations ----------------------------------------------------


def cifar_basic(stage_blocks: Sequence[int], num_classes: int = 10,
                input_shape=(3, 32, 32), block_variant: str = "post") -> NetConfig:
    return NetConfig("resnet-basic", tuple(stage_blocks), (16, 32, 64)[:len(stage_blocks)],
                     num_classes, input_shape, stem="conv3", block_variant=block_variant)


def imagenet_basic(stage_blocks: Sequence[int], num_classes: int = 1000) -> NetConfig:
    return NetConfig("resnet-basic", tuple(stage_blocks), (64, 128, 256, 512),
                     num_classes, (3, 224, 224), stem="conv7pool")


def imagenet_bottleneck(stage_blocks: Sequence[int], num_classes: int = 1000) -> NetConfig:
    return NetConfig("resnet-bottleneck", tuple(stage_blocks), (64, 128, 256, 512),
                     num_classes, (3, 224, 224), stem="conv7pool")


def cifar_vgg(stage_blocks: Sequence[int], num_classes: int = 10) -> NetConfig:
    return NetConfig("vgg", tuple(stage_blocks), (64, 128, 256, 512, 512)[:len(stage_blocks)],
                     num_classes, (3, 32, 32))
