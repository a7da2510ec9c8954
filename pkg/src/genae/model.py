"""The full autoencoder graph.

Encoder: two strided conv + DWPW stages, log-mel fusion at the matching
frame rate, attention pre- and post- the final downsample, then a linear
latent head. Decoder mirrors it: attention post-bottleneck and post the
first upsample, a mel output head at the fused frame rate, then a
transposed-conv trunk with TCN blocks down to the waveform.

The two named variants land at 13.125 Hz (total stride 3360) and
36.75 Hz (total stride 1200); every stage preserves the exact frame-count
law T = ceil(L / stride).
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndtensor as nt
from . import nnlayers as nl
from .dsp import FormatError, MelConfig, mel_spectrogram
from .ndtensor import Tensor
from .nnlayers import (AttentionStack, AttnSpec, Conv1d, Conv1dSpec,
                       ConvTranspose1d, DWPWBlock, FormatEmbedding, Linear,
                       TCNBlock)

CHECKPOINT_MAGIC = b"GENAE"
CHECKPOINT_VERSION = 1


class PlacementError(ValueError):
    """Attention stacks missing from the four required graph positions."""


ATTENTION_PLACEMENTS = ("pre_final_downsample", "post_final_downsample",
                        "post_bottleneck", "post_first_upsample")


@dataclass
class ModelConfig:
    name: str = "genae-13.125hz"
    sample_rate: int = 44100
    encoder_channels: tuple = (32, 64)
    encoder_strides: tuple = (16, 15)
    final_downsample: int = 14
    decoder_upsample: tuple = (15, 8, 2)
    n_mels: int = 192
    mel_window: int = 1792
    enc_attn_depth: int = 3
    enc_attn_dim: int = 512
    enc_attn_ffn: int = 2048
    enc_attn_heads: int = 8
    dec_attn_depth: int = 6
    dec_attn_dim: int = 768
    dec_attn_ffn: int = 3072
    dec_attn_heads: int = 12
    latent_dim: int = 64
    dropout: float = 0.05
    attn_window: int = 16
    cond_dim: int = 64
    bottleneck: str = "kl"          # "kl" (head emits mean||logvar) or "plain"
    mel_fusion: bool = True
    attention: bool = True
    adaln_init_scale: float = 0.0
    rope: bool = True

    def __post_init__(self):
        if self.mel_hop != int(np.prod(self.encoder_strides)):
            raise ValueError("mel hop must equal the encoder's cumulative stride "
                             "at the fusion point")
        if int(np.prod(self.decoder_upsample)) * self.final_downsample != self.total_stride:
            raise ValueError(
                f"decoder upsampling {self.decoder_upsample} x final {self.final_downsample} "
                f"!= total stride {self.total_stride}")

    @property
    def mel_hop(self):
        return int(np.prod(self.encoder_strides))

    @property
    def total_stride(self):
        return int(np.prod(self.encoder_strides)) * self.final_downsample

    @property
    def latent_rate(self):
        return self.sample_rate / self.total_stride

    @property
    def mel(self):
        return MelConfig(n_mels=self.n_mels, window=self.mel_window,
                         hop=self.mel_hop, sample_rate=self.sample_rate)

    @property
    def head_dim(self):
        return 2 * self.latent_dim if self.bottleneck == "kl" else self.latent_dim

    def enc_attn(self):
        return AttnSpec(self.enc_attn_depth, self.enc_attn_dim, self.enc_attn_ffn,
                        self.enc_attn_heads, window=self.attn_window,
                        cond_dim=self.cond_dim, rope=self.rope,
                        dropout=self.dropout, adaln_init_scale=self.adaln_init_scale)

    def dec_attn(self):
        return AttnSpec(self.dec_attn_depth, self.dec_attn_dim, self.dec_attn_ffn,
                        self.dec_attn_heads, window=self.attn_window,
                        cond_dim=self.cond_dim, rope=self.rope,
                        dropout=self.dropout, adaln_init_scale=self.adaln_init_scale)

    def decoder_trunk_channels(self):
        c = self.dec_attn_dim
        return tuple(max(4, c >> (i + 1)) for i in range(len(self.decoder_upsample)))

    def latent_frames(self, n_samples):
        return -(-n_samples // self.total_stride)

    def scaled(self, width_scale):
        """Toy variant: trunk widths scaled down, structure and latent width kept."""
        def sc(x, quantum=1):
            return max(quantum, int(round(x * width_scale / quantum)) * quantum)

        heads_e = max(2, int(round(self.enc_attn_heads * width_scale)))
        heads_d = max(2, int(round(self.dec_attn_heads * width_scale)))
        dim_e = max(heads_e * 4, sc(self.enc_attn_dim, heads_e * 2))
        dim_d = max(heads_d * 4, sc(self.dec_attn_dim, heads_d * 2))
        return replace(
            self,
            name=self.name + f"-w{width_scale:g}",
            encoder_channels=tuple(max(2, int(round(c * width_scale)))
                                   for c in self.encoder_channels),
            enc_attn_dim=dim_e, enc_attn_ffn=4 * dim_e, enc_attn_heads=heads_e,
            dec_attn_dim=dim_d, dec_attn_ffn=4 * dim_d, dec_attn_heads=heads_d,
        )

    def to_dict(self):
        return {
            "name": self.name, "sample_rate": self.sample_rate,
            "encoder_channels": list(self.encoder_channels),
            "encoder_strides": list(self.encoder_strides),
            "final_downsample": self.final_downsample,
            "decoder_upsample": list(self.decoder_upsample),
            "n_mels": self.n_mels, "mel_window": self.mel_window,
            "enc_attn_depth": self.enc_attn_depth, "enc_attn_dim": self.enc_attn_dim,
            "enc_attn_ffn": self.enc_attn_ffn, "enc_attn_heads": self.enc_attn_heads,
            "dec_attn_depth": self.dec_attn_depth, "dec_attn_dim": self.dec_attn_dim,
            "dec_attn_ffn": self.dec_attn_ffn, "dec_attn_heads": self.dec_attn_heads,
            "latent_dim": self.latent_dim, "dropout": self.dropout,
            "attn_window": self.attn_window, "cond_dim": self.cond_dim,
            "bottleneck": self.bottleneck, "mel_fusion": self.mel_fusion,
            "attention": self.attention, "adaln_init_scale": self.adaln_init_scale,
            "rope": self.rope,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("encoder_channels", "encoder_strides", "decoder_upsample"):
            d[key] = tuple(d[key])
        return cls(**d)


def config_13125():
    cfg = ModelConfig()
    assert cfg.total_stride == 3360 and abs(cfg.latent_rate - 13.125) < 1e-9
    return cfg


def config_3675():
    cfg = ModelConfig(name="genae-36.75hz", encoder_strides=(15, 10),
                      final_downsample=8, decoder_upsample=(15, 5, 2),
                      enc_attn_depth=2, dec_attn_depth=4)
    assert cfg.total_stride == 1200 and abs(cfg.latent_rate - 36.75) < 1e-9
    return cfg


NAMED_CONFIGS = {"13.125": config_13125, "36.75": config_3675}


@dataclass
class LatentFrameSequence:
    rate: float
    dim: int
    frames: np.ndarray         # [T, dim] float32
    format: str

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.dim:
            raise ValueError(f"latent frames must be [T, {self.dim}]")


class GenAE:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch0, ch1 = cfg.encoder_channels
        s0, s1 = cfg.encoder_strides
        fd = cfg.final_downsample
        edim, ddim = cfg.enc_attn_dim, cfg.dec_attn_dim

        self.format_emb = FormatEmbedding(rng, cfg.cond_dim)

        # encoder: downsample first, residual blocks after
        self.enc_conv0 = Conv1d(Conv1dSpec(1, ch0, 2 * s0, stride=s0), rng)
        self.enc_blocks0 = [DWPWBlock(ch0, d, rng) for d in (1, 3, 9)]
        self.enc_conv1 = Conv1d(Conv1dSpec(ch0, ch1, 2 * s1, stride=s1), rng)
        self.enc_blocks1 = [DWPWBlock(ch1, d, rng) for d in (1, 3, 9)]
        fuse_in = ch1 + (cfg.n_mels if cfg.mel_fusion else 0)
        self.enc_fuse = Conv1d(Conv1dSpec(fuse_in, edim, 1), rng)
        self.enc_attn1 = AttentionStack(cfg.enc_attn(), rng) if cfg.attention else None
        self.enc_final_ds = Conv1d(Conv1dSpec(edim, edim, 2 * fd, stride=fd), rng)
        self.enc_attn2 = AttentionStack(cfg.enc_attn(), rng) if cfg.attention else None
        self.latent_head = Linear(edim, cfg.head_dim, rng)

        # decoder
        self.dec_in = Linear(cfg.latent_dim, ddim, rng)
        self.dec_attn1 = AttentionStack(cfg.dec_attn(), rng) if cfg.attention else None
        self.dec_up0 = ConvTranspose1d(Conv1dSpec(ddim, ddim, 2 * fd, stride=fd,
                                                  transposed=True), rng)
        self.dec_attn2 = AttentionStack(cfg.dec_attn(), rng) if cfg.attention else None
        self.mel_head = Linear(ddim, cfg.n_mels, rng)
        trunk_ch = cfg.decoder_trunk_channels()
        self.dec_up = []
        self.dec_tcn = []
        c_prev = ddim
        for stride, c_out in zip(cfg.decoder_upsample, trunk_ch):
            self.dec_up.append(ConvTranspose1d(
                Conv1dSpec(c_prev, c_out, 2 * stride, stride=stride, transposed=True), rng))
            self.dec_tcn.append([TCNBlock(c_out, d, rng) for d in (1, 3, 9)])
            c_prev = c_out
        self.dec_out = Conv1d(Conv1dSpec(c_prev, 1, 7), rng)

        self._placements = []
        if cfg.attention:
            self._placements = [
                ("pre_final_downsample", self.enc_attn1),
                ("post_final_downsample", self.enc_attn2),
                ("post_bottleneck", self.dec_attn1),
                ("post_first_upsample", self.dec_attn2),
            ]
            self.attention_placement_audit()

    # -- structure ---------------------------------------------------------

    def attention_placement_audit(self):
        """Verify one attention stack sits at each of the four bottleneck
        positions. Returns {placement: depth}; raises PlacementError."""
        found = {name: stack for name, stack in self._placements if stack is not None}
        missing = [p for p in ATTENTION_PLACEMENTS if p not in found]
        if missing:
            raise PlacementError(f"attention stacks missing at: {', '.join(missing)}")
        extra = [n for n in found if n not in ATTENTION_PLACEMENTS]
        if extra or len(self._placements) != 4:
            raise PlacementError(f"unexpected attention placements: {extra}")
        for name, stack in found.items():
            if stack.spec.depth < 1:
                raise PlacementError(f"empty attention stack at {name}")
        return {name: stack.spec.depth for name, stack in found.items()}

    def params(self):
        out = {}
        out.update(self.format_emb.params("format_emb."))
        out.update(self.enc_conv0.params("enc.conv0."))
        for i, b in enumerate(self.enc_blocks0):
            out.update(b.params(f"enc.block0.{i}."))
        out.update(self.enc_conv1.params("enc.conv1."))
        for i, b in enumerate(self.enc_blocks1):
            out.update(b.params(f"enc.block1.{i}."))
        out.update(self.enc_fuse.params("enc.fuse."))
        if self.enc_attn1 is not None:
            out.update(self.enc_attn1.params("enc.attn1."))
        out.update(self.enc_final_ds.params("enc.final_ds."))
        if self.enc_attn2 is not None:
            out.update(self.enc_attn2.params("enc.attn2."))
        out.update(self.latent_head.params("enc.latent_head."))
        out.update(self.dec_in.params("dec.in."))
        if self.dec_attn1 is not None:
            out.update(self.dec_attn1.params("dec.attn1."))
        out.update(self.dec_up0.params("dec.up0."))
        if self.dec_attn2 is not None:
            out.update(self.dec_attn2.params("dec.attn2."))
        out.update(self.mel_head.params("dec.mel_head."))
        for i, up in enumerate(self.dec_up):
            out.update(up.params(f"dec.up{i + 1}."))
            for j, b in enumerate(self.dec_tcn[i]):
                out.update(b.params(f"dec.tcn{i + 1}.{j}."))
        out.update(self.dec_out.params("dec.out."))
        return out

    def param_count(self):
        return nl.count_params(self.params())

    # -- forward -----------------------------------------------------------

    def cond(self, format_id):
        return self.format_emb(format_id)

    def encode_params(self, samples, format_id, rng=None):
        """Single channel [L] -> latent-head output Tensor [T, head_dim]."""
        x = np.asarray(samples, dtype=np.float32).reshape(-1)
        if x.size == 0:
            raise ValueError("empty input")
        cfg = self.cfg
        cond = self.cond(format_id)
        h = nt.Tensor(x.reshape(1, -1)) if not isinstance(samples, Tensor) \
            else samples.reshape(1, -1)
        h = self.enc_conv0(h)
        for b in self.enc_blocks0:
            h = b(h)
        h = self.enc_conv1(h)
        for b in self.enc_blocks1:
            h = b(h)
        if cfg.mel_fusion:
            mel = mel_spectrogram(x, cfg.mel)          # [T, n_mels], constant input
            h = nt.concat([h, Tensor(mel.T)], axis=0)
        h = self.enc_fuse(h)
        h = nt.transpose(h)                            # [T, edim]
        if self.enc_attn1 is not None:
            h = self.enc_attn1(h, cond, rng=rng)
        h = self.enc_final_ds(nt.transpose(h))
        h = nt.transpose(h)
        if self.enc_attn2 is not None:
            h = self.enc_attn2(h, cond, rng=rng)
        return self.latent_head(h)

    def latent_mean(self, params):
        if self.cfg.bottleneck == "kl":
            return nt.narrow(params, 1, 0, self.cfg.latent_dim)
        return params

    def encode(self, samples, format_id):
        """Deterministic inference encode -> LatentFrameSequence (posterior
        mean for the KL bottleneck)."""
        with nt.no_grad():
            params = self.encode_params(samples, format_id)
            z = self.latent_mean(params)
        return LatentFrameSequence(self.cfg.latent_rate, self.cfg.latent_dim,
                                   z.data, format_id)

    def decode_tensors(self, z, format_id, rng=None):
        """z: Tensor [T, latent_dim] -> (waveform Tensor [T*stride],
        mel prediction Tensor [T*final_downsample, n_mels])."""
        cfg = self.cfg
        if z.shape[-1] != cfg.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {cfg.latent_dim}")
        cond = self.cond(format_id)
        h = self.dec_in(z)
        if self.dec_attn1 is not None:
            h = self.dec_attn1(h, cond, rng=rng)
        h = self.dec_up0(nt.transpose(h))
        h = nt.transpose(h)
        if self.dec_attn2 is not None:
            h = self.dec_attn2(h, cond, rng=rng)
        mel_pred = self.mel_head(h)
        h = nt.transpose(h)
        for up, blocks in zip(self.dec_up, self.dec_tcn):
            h = up(h)
            for b in blocks:
                h = b(h)
        wave = self.dec_out(h).reshape(-1)
        return wave, mel_pred

    def decode(self, latents, format_id=None):
        """LatentFrameSequence -> (waveform [T*stride] float32, mel [.,n_mels])."""
        fmt = format_id or latents.format
        with nt.no_grad():
            wave, mel = self.decode_tensors(Tensor(latents.frames), fmt)
        return wave.data, mel.data


# -- checkpoint io -------------------------------------------------------------


def save_checkpoint(path, model, extra=None):
    """Versioned binary: magic, config record, named float32 parameter blobs.
    Little-endian throughout; round trips bit-exactly."""
    params = model.params()
    cfg_blob = json.dumps({"config": model.cfg.to_dict(), "extra": extra or {}},
                          sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
           struct.pack("<I", len(cfg_blob)), cfg_blob,
           struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    blob = b"".join(out)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    import os
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated reading {what}: expected {self.pos + n} bytes, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, seed=0):
    """Returns (model, extra_dict); parameters restored bit-exactly."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    magic = r.take(5, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", r.take(4, "config length"))
    meta = json.loads(r.take(cfg_len, "config").decode())
    cfg = ModelConfig.from_dict(meta["config"])
    model = GenAE(cfg, seed=seed)
    params = model.params()
    (count,) = struct.unpack("<I", r.take(4, "parameter count"))
    if count != len(params):
        raise FormatError(f"{path}: checkpoint has {count} parameters, "
                          f"model expects {len(params)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(nlen, "name").decode()
        if name not in params:
            raise FormatError(f"{path}: unknown parameter {name!r}")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, "extents"))
        t = params[name]
        if tuple(shape) != tuple(t.data.shape):
            raise FormatError(f"{path}: parameter {name!r} shape {shape} != "
                              f"model shape {t.data.shape}")
        n_items = int(np.prod(shape)) if rank else 1
        raw = r.take(4 * n_items, f"data for {name!r}")
        t.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return model, meta.get("extra", {})


def checkpoint_checksums(model):
    """Stable per-parameter checksums for freeze contracts."""
    import hashlib
    return {name: hashlib.sha256(np.ascontiguousarray(t.data, "<f4").tobytes()).hexdigest()
            for name, t in model.params().items()}
