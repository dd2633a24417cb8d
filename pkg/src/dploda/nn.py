"""Mini classifier-free U-Net and a small CNN classifier.

Every layer's parameters sit in a :class:`ParamStore` under a stable dotted
name, and every convolution is additionally registered in ``conv_layers`` so
adapters can enumerate and wrap them.

U-Net layout (driven by :class:`UNetConfig`; L = len(channel_mults) levels,
R = res_blocks per level, ch_i = base_channels * channel_mults[i]):

    temb.fc1 / temb.fc2   time MLP as 1x1 convs on [N, temb_dim, 1, 1]
    cls_embed             [num_classes + 1, temb_dim] embedding; last row is
                          the null (unconditional) token
    in.conv               3x3 conv, 1 -> ch_0
    down{i}.res{j}        R residual blocks per level (j in 0..R-1),
    down{i}.attn{j}         each followed by attention at the lowest level
    (avg-pool x2 between levels; no parameters)
    mid.res0, mid.attn, mid.res1
    up{i}.res{j}          R+1 skip-concat residual blocks per level
    up{i}.attn{j}           (attention again at the lowest level)
    up{i}.upconv          3x3 conv after nearest x2 upsample, ch_i -> ch_{i-1}
    out.gn, out.conv      final norm + 3x3 conv back to 1 channel

Residual block: GN-SiLU-conv3x3, plus a 1x1 conv projecting the time/class
embedding onto the channels, then GN-SiLU-conv3x3, with an identity or 1x1
conv skip. Attention: GN -> fused qkv 1x1 conv -> softmax over spatial
positions -> 1x1 projection, residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered name -> (tensor, trainable) map; the single home of all weights."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = trainable
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return [(n, self._params[n], self._trainable[n]) for n in self._params]

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool):
        self._trainable[name] = bool(flag)
        self._params[name].requires_grad = bool(flag)

    def freeze_all(self):
        for n in self._params:
            self.set_trainable(n, False)

    def trainable_items(self):
        return [(n, self._params[n]) for n in self._params if self._trainable[n]]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def param_count(self):
        """(trainable, total) element counts."""
        trainable = sum(t.size for n, t in self._params.items() if self._trainable[n])
        total = sum(t.size for t in self._params.values())
        return trainable, total

    def copy_values_from(self, other: "ParamStore", strict: bool = True):
        """Copy matching tensors' values in place (trainable flags unchanged)."""
        for name, t, _ in other.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"no parameter named {name!r} in target store")
                continue
            dst = self._params[name]
            if dst.shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {dst.shape} vs {t.shape}")
            np.copyto(dst.data, t.data)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one registered conv layer (adapters read this)."""

    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _Conv:
    """3x3 / 1x1 conv layer; adapters may hook a parallel path or weight delta."""

    def __init__(self, model, name, cin, cout, k, stride=1, padding=0, gain=1.0, dtype=np.float32):
        self.spec = ConvSpec(name, cin, cout, k, stride, padding)
        bound = gain / math.sqrt(cin * k * k)
        w = model.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.w = model.store.add(name + ".w", T.tensor(w, True, dtype=dtype))
        self.b = model.store.add(name + ".b", T.tensor(np.zeros(cout), True, dtype=dtype))
        self.parallel = None      # set by LoDA attachment: callable(x) -> Tensor
        self.weight_delta = None  # set by reshaped-LoRA attachment: callable() -> Tensor
        model.conv_layers[name] = self

    def __call__(self, x: Tensor) -> Tensor:
        w = self.w if self.weight_delta is None else self.w + self.weight_delta()
        y = T.conv2d(x, w, self.b, stride=self.spec.stride, padding=self.spec.padding)
        if self.parallel is not None:
            y = y + self.parallel(x)
        return y


class _GroupNorm:
    def __init__(self, model, name, channels, dtype=np.float32):
        self.groups = _norm_groups(channels)
        self.g = model.store.add(name + ".g", T.tensor(np.ones(channels), True, dtype=dtype))
        self.b = model.store.add(name + ".b", T.tensor(np.zeros(channels), True, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.g, self.b, self.groups)


class _ResBlock:
    def __init__(self, model, name, cin, cout, emb_dim, dtype=np.float32):
        self.gn1 = _GroupNorm(model, name + ".gn1", cin, dtype)
        self.conv1 = _Conv(model, name + ".conv1", cin, cout, 3, padding=1, dtype=dtype)
        self.emb_proj = _Conv(model, name + ".emb_proj", emb_dim, cout, 1, dtype=dtype)
        self.gn2 = _GroupNorm(model, name + ".gn2", cout, dtype)
        self.conv2 = _Conv(model, name + ".conv2", cout, cout, 3, padding=1, gain=0.2, dtype=dtype)
        self.skip = _Conv(model, name + ".skip", cin, cout, 1, dtype=dtype) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.gn1(x)))
        h = h + self.emb_proj(T.silu(emb))
        h = self.conv2(T.silu(self.gn2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class _Attention:
    def __init__(self, model, name, channels, dtype=np.float32):
        self.c = channels
        self.gn = _GroupNorm(model, name + ".gn", channels, dtype)
        self.qkv = _Conv(model, name + ".qkv", channels, 3 * channels, 1, dtype=dtype)
        self.proj = _Conv(model, name + ".proj", channels, channels, 1, gain=0.2, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        qkv = self.qkv(self.gn(x))
        q = qkv.narrow(1, 0, c).reshape((n, c, h * w))
        k = qkv.narrow(1, c, c).reshape((n, c, h * w))
        v = qkv.narrow(1, 2 * c, c).reshape((n, c, h * w))
        scores = T.matmul(q.transpose((0, 2, 1)), k) * (c ** -0.5)
        attn = T.softmax(scores)                       # [n, hw, hw]
        out = T.matmul(v, attn.transpose((0, 2, 1)))   # [n, c, hw]
        return x + self.proj(out.reshape((n, c, h, w)))


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 16
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    res_blocks: int = 2
    attn_lowest: bool = True
    num_classes: int = 4
    time_embed_dim: int = 128

    @property
    def null_class(self) -> int:
        return self.num_classes

    def validate(self):
        levels = len(self.channel_mults)
        if self.image_size % (2 ** (levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1} (levels={levels})"
            )
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")


def sinusoidal_time_embed(t, dim: int) -> np.ndarray:
    """[N, dim] embedding: sin block then cos block of t * geometric freqs (base 10000)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class UNet:
    """Noise-prediction network: forward(x_t, t, class_id) -> eps-hat."""

    def __init__(self, cfg: UNetConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.conv_layers: dict[str, _Conv] = {}
        self.adapter_mode = None
        d = cfg.time_embed_dim
        chs = [cfg.base_channels * m for m in cfg.channel_mults]
        lowest = len(chs) - 1

        self.temb_fc1 = _Conv(self, "temb.fc1", d, d, 1, dtype=dtype)
        self.temb_fc2 = _Conv(self, "temb.fc2", d, d, 1, dtype=dtype)
        emb_table = self.rng.normal(0.0, 0.02, size=(cfg.num_classes + 1, d))
        self.cls_embed = self.store.add("cls_embed", T.tensor(emb_table, True, dtype=dtype))

        self.conv_in = _Conv(self, "in.conv", 1, chs[0], 3, padding=1, dtype=dtype)

        # down path; skip channel bookkeeping mirrors forward()
        self.down = []
        skip_chs = [chs[0]]
        ch = chs[0]
        for i, cout in enumerate(chs):
            blocks = []
            for j in range(cfg.res_blocks):
                res = _ResBlock(self, f"down{i}.res{j}", ch, cout, d, dtype)
                attn = (
                    _Attention(self, f"down{i}.attn{j}", cout, dtype)
                    if (cfg.attn_lowest and i == lowest)
                    else None
                )
                blocks.append((res, attn))
                ch = cout
                skip_chs.append(ch)
            self.down.append(blocks)
            if i < lowest:
                skip_chs.append(ch)  # post-pool feature map

        self.mid_res0 = _ResBlock(self, "mid.res0", ch, ch, d, dtype)
        self.mid_attn = _Attention(self, "mid.attn", ch, dtype) if cfg.attn_lowest else None
        self.mid_res1 = _ResBlock(self, "mid.res1", ch, ch, d, dtype)

        self.up = []
        for i in reversed(range(len(chs))):
            cout = chs[i]
            blocks = []
            for j in range(cfg.res_blocks + 1):
                cin = ch + skip_chs.pop()
                res = _ResBlock(self, f"up{i}.res{j}", cin, cout, d, dtype)
                attn = (
                    _Attention(self, f"up{i}.attn{j}", cout, dtype)
                    if (cfg.attn_lowest and i == lowest)
                    else None
                )
                blocks.append((res, attn))
                ch = cout
            upconv = None
            if i > 0:
                upconv = _Conv(self, f"up{i}.upconv", ch, chs[i - 1], 3, padding=1, dtype=dtype)
                ch = chs[i - 1]
            self.up.append((i, blocks, upconv))

        self.out_gn = _GroupNorm(self, "out.gn", ch, dtype)
        self.out_conv = _Conv(self, "out.conv", ch, 1, 3, padding=1, gain=0.2, dtype=dtype)

    @property
    def null_class(self) -> int:
        return self.cfg.null_class

    @property
    def image_size(self) -> int:
        return self.cfg.image_size

    def param_count(self):
        return self.store.param_count()

    def _embed(self, t, y) -> Tensor:
        y = np.asarray(y)
        if y.size and y.max() > self.cfg.null_class:
            raise ValueError(f"class id {int(y.max())} exceeds null token {self.cfg.null_class}")
        d = self.cfg.time_embed_dim
        sin = sinusoidal_time_embed(t, d).astype(self.dtype)
        n = sin.shape[0]
        e = Tensor(sin).reshape((n, d, 1, 1))
        e = self.temb_fc2(T.silu(self.temb_fc1(e)))
        ce = T.embedding(self.cls_embed, y).reshape((n, d, 1, 1))
        return e + ce

    def forward(self, x, t, y) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n, c, hh, ww = x.shape
        if c != 1 or hh != self.cfg.image_size or ww != self.cfg.image_size:
            raise T.ShapeError(f"expected [N,1,{self.cfg.image_size},{self.cfg.image_size}] input, got {x.shape}")
        emb = self._embed(t, y)

        h = self.conv_in(x)
        skips = [h]
        lowest = len(self.cfg.channel_mults) - 1
        for i, blocks in enumerate(self.down):
            for res, attn in blocks:
                h = res(h, emb)
                if attn is not None:
                    h = attn(h)
                skips.append(h)
            if i < lowest:
                h = T.avg_pool2(h)
                skips.append(h)

        h = self.mid_res0(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_res1(h, emb)

        for i, blocks, upconv in self.up:
            for res, attn in blocks:
                h = res(T.concat([h, skips.pop()], axis=1), emb)
                if attn is not None:
                    h = attn(h)
            if upconv is not None:
                h = upconv(T.upsample_nearest2(h))

        return self.out_conv(T.silu(self.out_gn(h)))


class Classifier:
    """Small CNN for 16x16 grayscale inputs -> class logits."""

    def __init__(self, num_classes: int, seed: int, dtype=np.float32, width: int = 16):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.conv_layers: dict[str, _Conv] = {}
        w = width
        self.c1 = _Conv(self, "c1", 1, w, 3, padding=1, dtype=dtype)
        self.gn1 = _GroupNorm(self, "gn1", w, dtype)
        self.c2 = _Conv(self, "c2", w, 2 * w, 3, padding=1, dtype=dtype)
        self.gn2 = _GroupNorm(self, "gn2", 2 * w, dtype)
        self.c3 = _Conv(self, "c3", 2 * w, 2 * w, 3, padding=1, dtype=dtype)
        self.gn3 = _GroupNorm(self, "gn3", 2 * w, dtype)
        feat = 2 * w * 2 * 2
        bound = 1.0 / math.sqrt(feat)
        self.fc_w = self.store.add(
            "fc.w", T.tensor(self.rng.uniform(-bound, bound, (feat, num_classes)), True, dtype=dtype)
        )
        self.fc_b = self.store.add("fc.b", T.tensor(np.zeros(num_classes), True, dtype=dtype))
        self._feat = feat

    def param_count(self):
        return self.store.param_count()

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n = x.shape[0]
        h = T.avg_pool2(T.silu(self.gn1(self.c1(x))))   # 16 -> 8
        h = T.avg_pool2(T.silu(self.gn2(self.c2(h))))   # 8 -> 4
        h = T.avg_pool2(T.silu(self.gn3(self.c3(h))))   # 4 -> 2
        h = h.reshape((n, self._feat))
        return T.matmul(h, self.fc_w) + self.fc_b


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float32) -> UNet:
    return UNet(cfg, seed, dtype=dtype)


def build_classifier(num_classes: int, seed: int, dtype=np.float32) -> Classifier:
    return Classifier(num_classes, seed, dtype=dtype)
