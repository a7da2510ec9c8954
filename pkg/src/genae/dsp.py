"""Signal-processing primitives: STFT, mel filterbank, mid/side, level
augmentation, coprime window selection, and WAV I/O.

Analysis paths (mel features of the input, metrics) are plain numpy.
`stft_tensor` is the differentiable STFT used by the spectral losses; its
backward is the adjoint of the framed rFFT and is covered by the
finite-difference suite.
"""

import math
import struct

import numpy as np

from .ndtensor import Tensor, as_tensor, make_op

LOG_FLOOR = 1e-5  # shared log-magnitude floor for mel and STFT losses
SAMPLE_RATE = 44100


class FormatError(Exception):
    """Malformed or unsupported file contents (maps to CLI exit code 3)."""


class StftConfig:
    """Hann-windowed STFT geometry; no center padding."""

    def __init__(self, window_size, hop):
        if not (0 < hop <= window_size):
            raise ValueError(f"need 0 < hop <= window_size, got hop={hop} window={window_size}")
        self.window_size = int(window_size)
        self.hop = int(hop)
        self.window = hann(window_size)

    def frames(self, n_samples):
        if n_samples < self.window_size:
            raise ValueError(
                f"signal ({n_samples} samples) shorter than window ({self.window_size})")
        return 1 + (n_samples - self.window_size) // self.hop


class MelConfig:
    def __init__(self, n_mels=192, window=1792, hop=240, sample_rate=SAMPLE_RATE,
                 fmin=20.0, fmax=None):
        self.n_mels = n_mels
        self.window = window
        self.hop = hop
        self.sample_rate = sample_rate
        self.fmin = fmin
        self.fmax = sample_rate / 2 if fmax is None else fmax


class AudioBuffer:
    """1 or 2 equal-length float channels, nominally in [-1, 1]."""

    def __init__(self, samples, sample_rate=SAMPLE_RATE):
        arr = np.atleast_2d(np.asarray(samples, dtype=np.float32))
        if arr.shape[0] not in (1, 2):
            raise ValueError(f"expected 1 or 2 channels, got {arr.shape[0]}")
        self.samples = np.ascontiguousarray(arr)
        self.sample_rate = sample_rate

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]


def hann(n):
    # periodic Hann, the analysis convention
    k = np.arange(n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)).astype(np.float32)


def frame_signal(x, window_size, hop, pad_to_cover=False):
    """[L] -> [frames, window_size]. With pad_to_cover, right-pad with zeros
    so frames start at every multiple of hop up to ceil(L/hop) (the conv
    alignment convention); otherwise only complete frames are taken."""
    x = np.asarray(x)
    L = x.shape[0]
    if pad_to_cover:
        n_frames = -(-L // hop)
        need = (n_frames - 1) * hop + window_size
        if need > L:
            x = np.concatenate([x, np.zeros(need - L, dtype=x.dtype)])
    else:
        if L < window_size:
            raise ValueError(f"signal ({L} samples) shorter than window ({window_size})")
        n_frames = 1 + (L - window_size) // hop
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x, cfg):
    """Complex spectrogram [frames, window//2 + 1]; no center padding."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.window_size, cfg.hop)
    return np.fft.rfft(frames * cfg.window.astype(np.float64), axis=1)


def mel_filterbank(cfg):
    """Triangular filters [n_mels, window//2 + 1], peak 1 (unnormalized),
    HTK mel spacing over [fmin, fmax]."""
    n_bins = cfg.window // 2 + 1
    freqs = np.arange(n_bins) * (cfg.sample_rate / cfg.window)

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    pts = from_mel(np.linspace(to_mel(cfg.fmin), to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float32)
    for m in range(cfg.n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_spectrogram(x, cfg):
    """Log-mel features [ceil(L/hop), n_mels], frame-aligned with a
    convolutional encoder of cumulative stride == hop (right-padded framing,
    no center padding)."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.window, cfg.hop,
                          pad_to_cover=True)
    win = hann(cfg.window).astype(np.float64)
    mag = np.abs(np.fft.rfft(frames * win, axis=1))
    mel = mag @ mel_filterbank(cfg).T.astype(np.float64)
    return np.log(LOG_FLOOR + mel).astype(np.float32)


def lr_to_ms(l, r):
    l = np.asarray(l, dtype=np.float32)
    r = np.asarray(r, dtype=np.float32)
    if l.shape != r.shape:
        raise ValueError(f"channel length mismatch: {l.shape} vs {r.shape}")
    return (l + r) / 2.0, (l - r) / 2.0


def ms_to_lr(m, s):
    m = np.asarray(m, dtype=np.float32)
    s = np.asarray(s, dtype=np.float32)
    if m.shape != s.shape:
        raise ValueError(f"channel length mismatch: {m.shape} vs {s.shape}")
    return m + s, m - s


def coprime_windows(candidates, hop_divisor=4):
    """Select all pairwise-coprime window sizes from candidates and wrap them
    as StftConfigs with hop = window // hop_divisor. Raises unless at least
    three pairwise-coprime sizes are available."""
    sizes = list(candidates)
    if not sizes:
        raise ValueError("empty window candidate list")
    for i, a in enumerate(sizes):
        for b in sizes[i + 1:]:
            if math.gcd(a, b) != 1:
                raise ValueError(f"window sizes {a} and {b} share factor {math.gcd(a, b)}")
    if len(sizes) < 3:
        raise ValueError(f"need >= 3 pairwise-coprime window sizes, got {len(sizes)}")
    return [StftConfig(w, max(1, w // hop_divisor)) for w in sizes]


def pairwise_coprime(sizes):
    sizes = list(sizes)
    return all(math.gcd(a, b) == 1
               for i, a in enumerate(sizes) for b in sizes[i + 1:])


# Reconstruction and discriminator window sets. The union must stay pairwise
# coprime so no windowing artifact is shared across any pair of losses.
RECON_WINDOWS = (2048, 1023, 511)
DISC_WINDOWS = (1025, 509, 257)
assert pairwise_coprime(RECON_WINDOWS + DISC_WINDOWS)


def level_augment(buf, gain_db):
    """Scale all channels by 10^(gain_db/20); one gain per example."""
    scale = np.float32(10.0 ** (gain_db / 20.0))
    return AudioBuffer(buf.samples * scale, buf.sample_rate)


def draw_gain_db(rng, lo=-12.0, hi=0.0):
    return float(rng.uniform(lo, hi))


# -- differentiable STFT -----------------------------------------------------


def stft_tensor(x, cfg):
    """Differentiable STFT of a 1-d Tensor: returns (real, imag), each
    [frames, window//2 + 1]. Framing drops the tail remainder (no padding)."""
    x = as_tensor(x)
    L = x.data.shape[0]
    W, H = cfg.window_size, cfg.hop
    if L < W:
        raise ValueError(f"signal ({L} samples) shorter than window ({W})")
    n_frames = 1 + (L - W) // H
    idx = np.arange(W)[None, :] + H * np.arange(n_frames)[:, None]
    win = cfg.window
    frames = x.data[idx] * win
    spec = np.fft.rfft(frames, axis=1)
    re = np.ascontiguousarray(spec.real.astype(x.data.dtype))
    im = np.ascontiguousarray(spec.imag.astype(x.data.dtype))

    def back_from(gre, gim):
        # adjoint of rfft: middle bins of the half spectrum stand for one
        # coefficient each, so irfft's hermitian doubling must be undone
        g = gre.astype(np.float64) + 1j * gim.astype(np.float64)
        scalew = np.ones(W // 2 + 1)
        scalew[1:] = 0.5
        if W % 2 == 0:
            scalew[-1] = 1.0
        dframes = np.fft.irfft(g * scalew, n=W, axis=1) * W
        dframes = dframes.astype(gre.dtype) * win
        dx = np.zeros(L, dtype=gre.dtype)
        np.add.at(dx, idx.reshape(-1), dframes.reshape(-1))
        return dx

    def back_re(g):
        return back_from(g, np.zeros_like(g))

    def back_im(g):
        return back_from(np.zeros_like(g), g)

    re_t = make_op(re, (x,), (back_re,), saved=(idx,), op="stft_re")
    im_t = make_op(im, (x,), (back_im,), saved=(idx,), op="stft_im")
    return re_t, im_t


def stft_magnitude_tensor(x, cfg, eps=1e-8):
    """Differentiable |STFT|; eps keeps the sqrt gradient finite at zero."""
    from . import ndtensor as nt
    re, im = stft_tensor(x, cfg)
    return nt.sqrt(re * re + im * im + eps * eps)


# -- WAV I/O ------------------------------------------------------------------


def read_wav(path):
    """Read a 44100 Hz PCM16 or float32 RIFF WAV into an AudioBuffer."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated RIFF header ({len(raw)} bytes)")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (magic {raw[0:4]!r})")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (csize,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + csize]
        if len(body) < csize:
            raise FormatError(
                f"{path}: truncated chunk {cid!r}: expected {csize} bytes, got {len(body)}")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + csize + (csize & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt/data chunk")
    tag, n_ch, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if rate != SAMPLE_RATE:
        raise FormatError(
            f"{path}: sample rate {rate} Hz unsupported; this codec is 44100 Hz only "
            "(no resampler)")
    if n_ch not in (1, 2):
        raise FormatError(f"{path}: {n_ch} channels unsupported (mono or stereo only)")
    if tag == 1 and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise FormatError(f"{path}: unsupported format tag {tag} / {bits} bits")
    if x.size % n_ch:
        raise FormatError(f"{path}: data chunk not a whole number of frames")
    return AudioBuffer(x.reshape(-1, n_ch).T, rate)


def write_wav(path, buf, dtype="float32"):
    """Write an AudioBuffer as little-endian RIFF, PCM16 or float32."""
    inter = np.ascontiguousarray(buf.samples.T)
    if dtype == "pcm16":
        payload = np.clip(np.round(inter * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = 1, 16
    elif dtype == "float32":
        payload = inter.astype("<f4").tobytes()
        tag, bits = 3, 32
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    n_ch = buf.channels
    byte_rate = buf.sample_rate * n_ch * bits // 8
    block = n_ch * bits // 8
    fmt = struct.pack("<HHIIHH", tag, n_ch, buf.sample_rate, byte_rate, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    blob = b"RIFF" + struct.pack("<I", len(body)) + body
    with open(path, "wb") as f:
        f.write(blob)
