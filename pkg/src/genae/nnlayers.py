"""Model building blocks.

1-d convolutions (dense / separable / transposed) with weight
normalization, DWPW and TCN residual blocks, windowed multi-head
attention with rotary positions, QK-normalization and format-conditioned
adaptive layer norm.

Shape conventions: conv layers take [C, L], attention takes [T, dim].
Strided layers pad so the frame-count laws are exact: a stride-r
downsample yields ceil(L/r) frames, a stride-r upsample yields L*r
samples.
"""

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor
from .activations import elu, snakelite


@dataclass
class Conv1dSpec:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    separable: bool = False
    transposed: bool = False

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.separable and self.transposed:
            raise ValueError("separable transposed convolutions are not supported "
                             "(omitted from the decoder)")


@dataclass
class AttnSpec:
    depth: int
    dim: int
    ffn: int
    heads: int
    window: int = 16
    cond_dim: int = 64
    rope: bool = True
    rope_base: float = 10000.0
    dropout: float = 0.0
    adaln_init_scale: float = 0.0  # zero: blocks start as identity modulation

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


FORMAT_IDS = ("mid", "side", "left", "right")


def _weightnorm_weight(v, g, axes):
    norm = nt.sqrt((v * v).sum(axis=axes, keepdims=True) + 1e-12)
    return v * (g / norm)


def _split_pad(total):
    return total // 2, total - total // 2


class Linear:
    def __init__(self, d_in, d_out, rng, bias=True, zero_init=False, init_scale=1.0):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(size=(d_in, d_out)) * (init_scale / np.sqrt(d_in))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = x @ self.w
        return y + self.b if self.b is not None else y

    def params(self, prefix=""):
        out = {prefix + "w": self.w}
        if self.b is not None:
            out[prefix + "b"] = self.b
        return out


class Conv1d:
    """Dense weight-normalized convolution; stride-1 uses symmetric same
    padding, stride-r right-pads to a stride multiple first so the output
    length is exactly ceil(L/r)."""

    def __init__(self, spec, rng, bias=True, weight_init=None):
        if spec.transposed or spec.separable:
            raise ValueError("Conv1d is the dense non-transposed variant")
        self.spec = spec
        K, c_in, c_out = spec.kernel, spec.c_in, spec.c_out
        v = weight_init if weight_init is not None else \
            rng.normal(size=(c_out, c_in, K)) / np.sqrt(c_in * K)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(np.sqrt((np.asarray(v) ** 2).sum(axis=(1, 2), keepdims=True) + 1e-12),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def weight(self):
        return _weightnorm_weight(self.v, self.g, (1, 2))

    def _padding(self, L):
        s, K, d = self.spec.stride, self.spec.kernel, self.spec.dilation
        if s == 1:
            return _split_pad(d * (K - 1))
        tail = (-L) % s
        pl, pr = _split_pad(K - s)
        return pl, pr + tail

    def out_len(self, L):
        s = self.spec.stride
        if s == 1:
            return L
        return -(-L // s)

    def __call__(self, x):
        L = x.shape[-1]
        return nt.conv1d(x, self.weight(), self.b, stride=self.spec.stride,
                         dilation=self.spec.dilation, pad=self._padding(L))

    def params(self, prefix=""):
        out = {prefix + "v": self.v, prefix + "g": self.g}
        if self.b is not None:
            out[prefix + "b"] = self.b
        return out


class SeparableConv1d:
    """Depthwise K-tap filter then pointwise 1x1 mixing, both
    weight-normalized."""

    def __init__(self, spec, rng, bias=True):
        if not spec.separable or spec.transposed:
            raise ValueError("SeparableConv1d needs separable=True, transposed=False")
        self.spec = spec
        K, c_in, c_out = spec.kernel, spec.c_in, spec.c_out
        dv = rng.normal(size=(c_in, K)) / np.sqrt(K)
        self.dw_v = Tensor(dv, requires_grad=True)
        self.dw_g = Tensor(np.sqrt((dv ** 2).sum(axis=1, keepdims=True) + 1e-12),
                           requires_grad=True)
        pv = rng.normal(size=(c_out, c_in, 1)) / np.sqrt(c_in)
        self.pw_v = Tensor(pv, requires_grad=True)
        self.pw_g = Tensor(np.sqrt((pv ** 2).sum(axis=(1, 2), keepdims=True) + 1e-12),
                           requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def _padding(self, L):
        s, K, d = self.spec.stride, self.spec.kernel, self.spec.dilation
        if s == 1:
            return _split_pad(d * (K - 1))
        tail = (-L) % s
        pl, pr = _split_pad(K - s)
        return pl, pr + tail

    def out_len(self, L):
        s = self.spec.stride
        return L if s == 1 else -(-L // s)

    def __call__(self, x):
        L = x.shape[-1]
        dw = _weightnorm_weight(self.dw_v, self.dw_g, (1,))
        h = nt.depthwise_conv1d(x, dw, stride=self.spec.stride,
                                dilation=self.spec.dilation, pad=self._padding(L))
        pw = _weightnorm_weight(self.pw_v, self.pw_g, (1, 2))
        return nt.conv1d(h, pw, self.b, stride=1, dilation=1, pad=(0, 0))

    def params(self, prefix=""):
        out = {prefix + "dw_v": self.dw_v, prefix + "dw_g": self.dw_g,
               prefix + "pw_v": self.pw_v, prefix + "pw_g": self.pw_g}
        if self.b is not None:
            out[prefix + "b"] = self.b
        return out


class ConvTranspose1d:
    """Weight-normalized transposed convolution; output length is exactly
    L * stride (full length (L-1)*stride + K cropped by K - stride)."""

    def __init__(self, spec, rng, bias=True):
        if not spec.transposed or spec.separable:
            raise ValueError("ConvTranspose1d needs transposed=True, separable=False")
        if spec.kernel < spec.stride:
            raise ValueError("kernel must be >= stride for gap-free upsampling")
        self.spec = spec
        K, c_in, c_out = spec.kernel, spec.c_in, spec.c_out
        v = rng.normal(size=(c_in, c_out, K)) / np.sqrt(c_in * K)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(np.sqrt((v ** 2).sum(axis=(0, 2), keepdims=True) + 1e-12),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def weight(self):
        return _weightnorm_weight(self.v, self.g, (0, 2))

    def out_len(self, L):
        return L * self.spec.stride

    def __call__(self, x):
        crop = _split_pad(self.spec.kernel - self.spec.stride)
        return nt.conv_transpose1d(x, self.weight(), self.b,
                                   stride=self.spec.stride, crop=crop)

    def params(self, prefix=""):
        out = {prefix + "v": self.v, prefix + "g": self.g}
        if self.b is not None:
            out[prefix + "b"] = self.b
        return out


class DWPWBlock:
    """Residual depthwise/pointwise unit: x + pw(act(dw_dilated(x))).

    Encoder-side unit; activation is ELU. Receptive field of a 1/3/9 stack
    grows as 1 + sum(d * (K - 1))."""

    def __init__(self, channels, dilation, rng, kernel=7, activation="elu"):
        self.dilation = dilation
        self.kernel = kernel
        self.activation = activation
        self.sep = SeparableConv1d(
            Conv1dSpec(channels, channels, kernel, dilation=dilation, separable=True), rng)
        if activation == "snakelite":
            self.log_beta = Tensor(np.zeros((channels, 1)), requires_grad=True)

    def receptive_field(self):
        return 1 + self.dilation * (self.kernel - 1)

    def _act(self, h):
        if self.activation == "elu":
            return elu(h)
        return snakelite(h, nt.exp(self.log_beta))

    def __call__(self, x):
        L = x.shape[-1]
        dw = _weightnorm_weight(self.sep.dw_v, self.sep.dw_g, (1,))
        h = nt.depthwise_conv1d(x, dw, dilation=self.dilation,
                                pad=self.sep._padding(L))
        h = self._act(h)
        pw = _weightnorm_weight(self.sep.pw_v, self.sep.pw_g, (1, 2))
        h = nt.conv1d(h, pw, self.sep.b, pad=(0, 0))
        return x + h

    def params(self, prefix=""):
        out = self.sep.params(prefix + "sep.")
        if self.activation == "snakelite":
            out[prefix + "log_beta"] = self.log_beta
        return out


class TCNBlock:
    """Residual dense dilated unit: x + conv1x1(act(dense_dilated(x))).

    Decoder-side unit with SnakeLite (per-channel beta); dense because
    separable transposed paths are avoided on the decoder side."""

    def __init__(self, channels, dilation, rng, kernel=7, activation="snakelite"):
        self.dilation = dilation
        self.kernel = kernel
        self.activation = activation
        self.conv = Conv1d(Conv1dSpec(channels, channels, kernel, dilation=dilation), rng)
        self.proj = Conv1d(Conv1dSpec(channels, channels, 1), rng)
        if activation in ("snakelite", "snake"):
            self.log_beta = Tensor(np.zeros((channels, 1)), requires_grad=True)

    def receptive_field(self):
        return 1 + self.dilation * (self.kernel - 1)

    def _act(self, h):
        if self.activation == "elu":
            return elu(h)
        if self.activation == "snake":
            from .activations import snake
            return snake(h, nt.exp(self.log_beta))
        return snakelite(h, nt.exp(self.log_beta))

    def __call__(self, x):
        h = self.conv(x)
        h = self._act(h)
        h = self.proj(h)
        return x + h

    def params(self, prefix=""):
        out = self.conv.params(prefix + "conv.")
        out.update(self.proj.params(prefix + "proj."))
        if self.activation in ("snakelite", "snake"):
            out[prefix + "log_beta"] = self.log_beta
        return out


class FormatEmbedding:
    """Four learnable 64-d vectors, one per audio-channel-format token.
    Mono maps to the mid token at the pipeline level."""

    def __init__(self, rng, dim=64):
        self.dim = dim
        self.table = Tensor(rng.normal(size=(len(FORMAT_IDS), dim)) * 0.02,
                            requires_grad=True)

    def __call__(self, format_id):
        idx = FORMAT_IDS.index(format_id)
        return nt.narrow(self.table, 0, idx, 1).reshape(self.dim)

    def params(self, prefix=""):
        return {prefix + "table": self.table}


class AdaLN:
    """Layer norm (affine-free) modulated by a conditioning vector:
    y = norm(x) * (1 + scale) + shift, with (scale, shift) from a learned
    affine head. Zero-initialized head makes the block an unconditioned
    pre-norm layer at start."""

    def __init__(self, dim, cond_dim, rng, init_scale=0.0):
        self.dim = dim
        if init_scale == 0.0:
            self.head = Linear(cond_dim, 2 * dim, rng, zero_init=True)
        else:
            self.head = Linear(cond_dim, 2 * dim, rng, init_scale=init_scale)

    def __call__(self, x, cond):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xhat = xc / nt.sqrt(var + 1e-5)
        mod = self.head(cond)
        scale = nt.narrow(mod, 0, 0, self.dim)
        shift = nt.narrow(mod, 0, self.dim, self.dim)
        return xhat * (scale + 1.0) + shift

    def params(self, prefix=""):
        return self.head.params(prefix + "head.")


def _rope_tables(T, head_dim, base):
    half = head_dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * inv[None, :]
    return (np.cos(ang).astype(np.float32)[:, None, :],
            np.sin(ang).astype(np.float32)[:, None, :])  # [T, 1, half]


def _rotate(x, cos_t, sin_t, half):
    ax = len(x.shape) - 1
    a = nt.narrow(x, ax, 0, half)
    b = nt.narrow(x, ax, half, half)
    return nt.concat([a * cos_t - b * sin_t, a * sin_t + b * cos_t], axis=ax)


class AttentionLayer:
    """Pre-norm windowed multi-head self-attention + FFN.

    Non-overlapping windows of spec.window frames (short tails form a
    final partial window); rotary embedding uses absolute positions;
    Q and K are per-head L2-normalized with a learnable per-head log
    logit scale; AdaLN conditioning is injected at both sublayers."""

    def __init__(self, spec, rng):
        self.spec = spec
        d = spec.dim
        if spec.rope and (d // spec.heads) % 2:
            raise ValueError("rotary embedding needs an even head dim")
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm1 = AdaLN(d, spec.cond_dim, rng, spec.adaln_init_scale)
        self.norm2 = AdaLN(d, spec.cond_dim, rng, spec.adaln_init_scale)
        self.ffn1 = Linear(d, spec.ffn, rng)
        self.ffn2 = Linear(spec.ffn, d, rng)
        head_dim = d // spec.heads
        self.log_scale = Tensor(np.full((spec.heads, 1), np.log(np.sqrt(head_dim))),
                                requires_grad=True)
        self.last_attn = None

    def _attend(self, xw, cos_t, sin_t, record):
        # xw: [nw, w, dim] a batch of same-size windows; cos/sin: [nw, w, 1, half]
        spec = self.spec
        H = spec.heads
        nw, w, _ = xw.shape
        dh = spec.dim // H
        flat = xw.reshape(nw * w, spec.dim)
        q = self.wq(flat).reshape(nw, w, H, dh)
        k = self.wk(flat).reshape(nw, w, H, dh)
        v = self.wv(flat).reshape(nw, w, H, dh)
        # QK-normalization before the dot product
        q = q / nt.sqrt((q * q).sum(axis=-1, keepdims=True) + 1e-8)
        k = k / nt.sqrt((k * k).sum(axis=-1, keepdims=True) + 1e-8)
        if spec.rope:
            q = _rotate(q, cos_t, sin_t, dh // 2)
            k = _rotate(k, cos_t, sin_t, dh // 2)
        q = q * nt.exp(self.log_scale)
        qh = nt.transpose(q, (0, 2, 1, 3)).reshape(nw * H, w, dh)
        kh = nt.transpose(k, (0, 2, 3, 1)).reshape(nw * H, dh, w)
        vh = nt.transpose(v, (0, 2, 1, 3)).reshape(nw * H, w, dh)
        probs = nt.softmax(qh @ kh, axis=-1)       # [nw*H, w, w]
        if record:
            self.last_attn.append(probs.data.copy())
        out = probs @ vh                           # [nw*H, w, dh]
        out = nt.transpose(out.reshape(nw, H, w, dh), (0, 2, 1, 3))
        out = out.reshape(nw * w, spec.dim)
        return self.wo(out).reshape(nw, w, spec.dim)

    def __call__(self, x, cond, rng=None, record_attn=False):
        spec = self.spec
        T = x.shape[0]
        dh = spec.dim // spec.heads
        cos_np, sin_np = _rope_tables(T, dh, spec.rope_base)
        if record_attn:
            self.last_attn = []
        h = self.norm1(x, cond)
        n_full = T // spec.window
        tail = T - n_full * spec.window
        pieces = []
        if n_full:
            body = nt.narrow(h, 0, 0, n_full * spec.window)
            body = body.reshape(n_full, spec.window, spec.dim)
            cos_t = Tensor(cos_np[:n_full * spec.window].reshape(
                n_full, spec.window, 1, dh // 2))
            sin_t = Tensor(sin_np[:n_full * spec.window].reshape(
                n_full, spec.window, 1, dh // 2))
            out = self._attend(body, cos_t, sin_t, record_attn)
            pieces.append(out.reshape(n_full * spec.window, spec.dim))
        if tail:
            tw = nt.narrow(h, 0, n_full * spec.window, tail).reshape(1, tail, spec.dim)
            cos_t = Tensor(cos_np[n_full * spec.window:].reshape(1, tail, 1, dh // 2))
            sin_t = Tensor(sin_np[n_full * spec.window:].reshape(1, tail, 1, dh // 2))
            out = self._attend(tw, cos_t, sin_t, record_attn)
            pieces.append(out.reshape(tail, spec.dim))
        attn = pieces[0] if len(pieces) == 1 else nt.concat(pieces, axis=0)
        attn = _dropout(attn, spec.dropout, rng)
        x = x + attn
        h = self.norm2(x, cond)
        h = self.ffn2(elu(self.ffn1(h)))
        h = _dropout(h, spec.dropout, rng)
        return x + h

    def params(self, prefix=""):
        out = {}
        for name, comp in (("wq.", self.wq), ("wk.", self.wk), ("wv.", self.wv),
                           ("wo.", self.wo), ("norm1.", self.norm1),
                           ("norm2.", self.norm2), ("ffn1.", self.ffn1),
                           ("ffn2.", self.ffn2)):
            out.update(comp.params(prefix + name))
        out[prefix + "log_scale"] = self.log_scale
        return out


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float32) / (1.0 - rate)
    return x * Tensor(keep)


class AttentionStack:
    def __init__(self, spec, rng):
        self.spec = spec
        self.layers = [AttentionLayer(spec, rng) for _ in range(spec.depth)]

    def __call__(self, x, cond, rng=None, record_attn=False):
        for layer in self.layers:
            x = layer(x, cond, rng=rng, record_attn=record_attn)
        return x

    def params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}layer{i}."))
        return out


def count_params(param_dict):
    return sum(int(np.prod(t.data.shape)) for t in param_dict.values())
