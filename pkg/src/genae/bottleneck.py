"""Latent bottlenecks: the KL-regularized continuous path with its
target-KL controller, and the post-hoc RVQ Re-Bottleneck that discretizes
a frozen continuous model.

The RVQ cascade quantizes stage residuals against per-stage codebooks
(nearest Euclidean entry), passes gradients straight through the
quantizer, and trains codebooks with stop-gradient codebook/commitment
losses. The Re-Bottleneck wraps a frozen backbone's 64-d latents with
attention encoder/decoder stacks around the quantizer.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nt
from .dsp import FormatError
from .ndtensor import Tensor
from .nnlayers import AttentionStack, AttnSpec, Linear

LATENT_MAGIC = b"GENAL"
TOKEN_MAGIC = b"GENAT"
FILE_VERSION = 1


# -- KL path -------------------------------------------------------------------


def kl_sample(params, rng):
    """params: Tensor [T, 2*dim] as mean || log-variance.

    Returns (z, kl): z = mean + exp(logvar/2) * eps (reparameterized),
    kl = 0.5 * sum_dim(mu^2 + sigma^2 - 1 - log sigma^2) averaged per frame.
    """
    if not np.isfinite(params.data).all():
        raise FloatingPointError("non-finite bottleneck parameters")
    T, two_d = params.shape
    dim = two_d // 2
    mean = nt.narrow(params, 1, 0, dim)
    logvar = nt.narrow(params, 1, dim, dim)
    eps = Tensor(rng.standard_normal((T, dim)))
    z = mean + nt.exp(logvar * 0.5) * eps
    kl = 0.5 * (mean * mean + nt.exp(logvar) - 1.0 - logvar).sum(axis=1).mean()
    return z, kl


@dataclass
class KlBottleneckState:
    """Multiplicative proportional controller driving measured KL to target."""

    target_kl: float = 15.0
    eta: float = 0.01
    ema_decay: float = 0.99
    beta_weight: float = 0.01
    running_kl: float = None
    beta_min: float = 1e-6
    beta_max: float = 1e2


def kl_controller_step(state, measured_kl):
    """beta <- beta * exp(eta * (EMA(kl) - target)/target), clamped."""
    if measured_kl < 0:
        raise ValueError(f"measured KL must be >= 0, got {measured_kl}")
    if state.running_kl is None:
        state.running_kl = float(measured_kl)
    else:
        state.running_kl = (state.ema_decay * state.running_kl
                            + (1.0 - state.ema_decay) * float(measured_kl))
    update = np.exp(state.eta * (state.running_kl - state.target_kl) / state.target_kl)
    state.beta_weight = float(np.clip(state.beta_weight * update,
                                      state.beta_min, state.beta_max))
    return state


# -- RVQ -----------------------------------------------------------------------


class RvqCodebooks:
    """Cascade of codebooks; stage i quantizes the residual of stages < i.

    Entries initialize uniform in [-1/entries, 1/entries] (small against
    any latent scale, so fresh books never expand residuals); training and
    dead-entry reseeding move them onto the residual distribution.
    """

    def __init__(self, n_codebooks=16, entries=1024, code_dim=16, seed=0):
        rng = np.random.default_rng(seed)
        self.n_codebooks = n_codebooks
        self.entries = entries
        self.code_dim = code_dim
        lim = 1.0 / entries
        self.tables = [Tensor(rng.uniform(-lim, lim, size=(entries, code_dim)),
                              requires_grad=True)
                       for _ in range(n_codebooks)]
        self.usage_counts = np.zeros((n_codebooks, entries), dtype=np.int64)
        self.stale_batches = np.zeros((n_codebooks, entries), dtype=np.int64)

    def params(self, prefix=""):
        return {f"{prefix}book{i}": t for i, t in enumerate(self.tables)}


def nearest_entry(residual, table):
    """Index of the nearest (Euclidean) codebook row per residual row."""
    d = (residual * residual).sum(axis=1, keepdims=True) \
        - 2.0 * residual @ table.T + (table * table).sum(axis=1)[None, :]
    return np.argmin(d, axis=1)


def rvq_quantize(z_inner, books, n_active=None, commitment_weight=0.25,
                 track_usage=False):
    """Quantize [T, code_dim] through the cascade.

    Returns (z_q, codes, aux, residual_norms):
      z_q: straight-through Tensor (identity gradient to z_inner)
      codes: int array [T, n_active]
      aux: {"codebook": Tensor, "commitment": Tensor}
      residual_norms: [n_active + 1] mean residual L2 before each stage
    """
    n_active = books.n_codebooks if n_active is None else n_active
    T = z_inner.shape[0]
    residual_np = z_inner.data.copy()
    q_total = np.zeros_like(residual_np)
    codes = np.zeros((T, n_active), dtype=np.int64)
    norms = [float(np.linalg.norm(residual_np, axis=1).mean())]
    onehots = []
    for i in range(n_active):
        table = books.tables[i]
        idx = nearest_entry(residual_np, table.data)
        codes[:, i] = idx
        chosen = table.data[idx]
        q_total += chosen
        residual_np -= chosen
        norms.append(float(np.linalg.norm(residual_np, axis=1).mean()))
        oh = np.zeros((T, books.entries), dtype=np.float32)
        oh[np.arange(T), idx] = 1.0
        onehots.append(oh)
        if track_usage:
            used = np.bincount(idx, minlength=books.entries)
            books.usage_counts[i] += used
            books.stale_batches[i][used > 0] = 0
            books.stale_batches[i][used == 0] += 1

    # straight-through: z_q = z + sg(q_total - z)
    z_q = z_inner + Tensor(q_total - z_inner.data)

    # codebook loss pulls entries toward stage residuals (stop-gradient on z);
    # commitment pulls z toward its quantization (stop-gradient on entries)
    cb_terms = []
    resid = z_inner.data.copy()
    for i in range(n_active):
        gathered = Tensor(onehots[i]) @ books.tables[i]          # [T, dim]
        diff = gathered - Tensor(resid)
        cb_terms.append((diff * diff).sum(axis=1).mean())
        resid = resid - books.tables[i].data[codes[:, i]]
    codebook_loss = cb_terms[0]
    for term in cb_terms[1:]:
        codebook_loss = codebook_loss + term
    codebook_loss = codebook_loss * (1.0 / n_active)
    commit_diff = z_inner - Tensor(q_total)
    commitment_loss = (commit_diff * commit_diff).sum(axis=1).mean() * commitment_weight
    aux = {"codebook": codebook_loss, "commitment": commitment_loss}
    return z_q, codes, aux, np.asarray(norms)


def dequantize(codes, books):
    """codes [T, n] -> [T, code_dim] sum of chosen entries."""
    codes = np.asarray(codes)
    out = np.zeros((codes.shape[0], books.code_dim), dtype=np.float32)
    for i in range(codes.shape[1]):
        out += books.tables[i].data[codes[:, i]]
    return out


def codebook_maintenance(books, batch_vectors, stale_limit=8, rng=None):
    """Reseed entries unused for stale_limit consecutive batches from random
    batch vectors. Returns the number of reseeded entries."""
    rng = rng or np.random.default_rng(0)
    batch_vectors = np.asarray(batch_vectors, dtype=np.float32)
    reseeded = 0
    for i, table in enumerate(books.tables):
        dead = np.where(books.stale_batches[i] >= stale_limit)[0]
        if dead.size == 0:
            continue
        picks = rng.integers(0, batch_vectors.shape[0], size=dead.size)
        table.data[dead] = batch_vectors[picks]
        books.stale_batches[i][dead] = 0
        reseeded += int(dead.size)
    return reseeded


def perplexity(books, stage=None):
    """exp(entropy) of the empirical code usage; higher = more entries live."""
    counts = books.usage_counts.sum(axis=0) if stage is None else books.usage_counts[stage]
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def discrete_bitrate(rate_hz, books):
    return rate_hz * books.n_codebooks * np.log2(books.entries)


# -- Re-Bottleneck wrapper -------------------------------------------------------


@dataclass
class RebottleneckConfig:
    latent_dim: int = 64
    layers: int = 8
    dim: int = 512
    ffn: int = 2048
    heads: int = 8
    window: int = 16
    code_dim: int = 16
    n_codebooks: int = 16
    entries: int = 1024
    commitment_weight: float = 0.25

    def attn(self):
        return AttnSpec(self.layers, self.dim, self.ffn, self.heads,
                        window=self.window, cond_dim=self.latent_dim)

    def scaled(self, width_scale):
        heads = max(2, int(round(self.heads * width_scale)))
        dim = max(heads * 4, int(round(self.dim * width_scale / (2 * heads))) * 2 * heads)
        return RebottleneckConfig(
            latent_dim=self.latent_dim, layers=self.layers, dim=dim, ffn=4 * dim,
            heads=heads, window=self.window, code_dim=self.code_dim,
            n_codebooks=self.n_codebooks, entries=self.entries,
            commitment_weight=self.commitment_weight)


class Rebottleneck:
    """Attention encoder/decoder pair around the RVQ: 64-d latents ->
    code_dim inner space -> quantize -> back to 64-d. Unconditioned: the
    AdaLN heads see a zero vector, i.e. plain pre-norm stacks."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.enc_in = Linear(cfg.latent_dim, cfg.dim, rng)
        self.enc_stack = AttentionStack(cfg.attn(), rng)
        self.enc_out = Linear(cfg.dim, cfg.code_dim, rng)
        self.dec_in = Linear(cfg.code_dim, cfg.dim, rng)
        self.dec_stack = AttentionStack(cfg.attn(), rng)
        self.dec_out = Linear(cfg.dim, cfg.latent_dim, rng)
        self.books = RvqCodebooks(cfg.n_codebooks, cfg.entries, cfg.code_dim,
                                  seed=seed + 1)
        self._zero_cond = Tensor(np.zeros(cfg.latent_dim))

    def encode_inner(self, z):
        h = self.enc_in(z)
        h = self.enc_stack(h, self._zero_cond)
        return self.enc_out(h)

    def decode_inner(self, zq):
        h = self.dec_in(zq)
        h = self.dec_stack(h, self._zero_cond)
        return self.dec_out(h)

    def forward(self, z, n_active=None, track_usage=False):
        """z: Tensor [T, latent_dim] -> (z_rec, codes, aux, norms)."""
        inner = self.encode_inner(z)
        z_q, codes, aux, norms = rvq_quantize(
            inner, self.books, n_active=n_active,
            commitment_weight=self.cfg.commitment_weight, track_usage=track_usage)
        return self.decode_inner(z_q), codes, aux, norms

    def tokenize(self, latents):
        """[T, latent_dim] float -> [T, n_codebooks] int codes."""
        with nt.no_grad():
            inner = self.encode_inner(Tensor(np.asarray(latents, dtype=np.float32)))
            _, codes, _, _ = rvq_quantize(inner, self.books)
        return codes

    def detokenize(self, codes):
        """[T, n_codebooks] int codes -> [T, latent_dim] float latents."""
        inner = dequantize(codes, self.books)
        with nt.no_grad():
            z = self.decode_inner(Tensor(inner))
        return z.data

    def params(self, prefix=""):
        out = {}
        out.update(self.enc_in.params(prefix + "enc_in."))
        out.update(self.enc_stack.params(prefix + "enc_stack."))
        out.update(self.enc_out.params(prefix + "enc_out."))
        out.update(self.dec_in.params(prefix + "dec_in."))
        out.update(self.dec_stack.params(prefix + "dec_stack."))
        out.update(self.dec_out.params(prefix + "dec_out."))
        out.update(self.books.params(prefix + "rvq."))
        return out


def rebottleneck_train(backbone, wrapper, latent_batches, steps=100, lr=1e-3,
                       seed=0, maintenance_every=0):
    """Train the wrapper on frozen-backbone latents with latent L2 plus RVQ
    aux losses. The backbone never enters the graph: latents are detached
    numpy arrays, and a checksum assert plus a grad sweep enforce the
    freeze contract. Returns a history dict with per-step losses."""
    from .model import checkpoint_checksums
    from .training import AdamW

    before = checkpoint_checksums(backbone)
    backbone_params = backbone.params()
    opt = AdamW(wrapper.params(), lr=lr)
    rng = np.random.default_rng(seed)
    history = {"latent_l2": [], "init_l2": None}
    n = len(latent_batches)
    for step in range(steps):
        z_np = latent_batches[step % n]
        z = Tensor(np.asarray(z_np, dtype=np.float32))
        inner = wrapper.encode_inner(z)
        z_q, codes, aux, _ = rvq_quantize(
            inner, wrapper.books,
            commitment_weight=wrapper.cfg.commitment_weight, track_usage=True)
        z_rec = wrapper.decode_inner(z_q)
        diff = z_rec - z
        l2 = (diff * diff).mean()
        if history["init_l2"] is None:
            history["init_l2"] = float(l2.data)
        loss = l2 + aux["codebook"] + aux["commitment"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["latent_l2"].append(float(l2.data))
        if maintenance_every and (step + 1) % maintenance_every == 0:
            codebook_maintenance(wrapper.books, inner.data, rng=rng)
    for name, t in backbone_params.items():
        if t.grad is not None and np.any(t.grad):
            raise AssertionError(f"backbone parameter {name} received gradient")
    after = checkpoint_checksums(backbone)
    if before != after:
        changed = [k for k in before if before[k] != after[k]]
        raise AssertionError(f"backbone parameters changed: {changed[:5]}")
    return history


# -- latent / token files --------------------------------------------------------


def _write_atomic(path, blob):
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def write_latent_file(path, rate, channel_latents, formats, orig_len):
    """channel_latents: list of [T, dim] float32 per channel."""
    dim = channel_latents[0].shape[1]
    frames = channel_latents[0].shape[0]
    for z in channel_latents:
        if z.shape != (frames, dim):
            raise ValueError("all channels must share [frames, dim]")
    head = [LATENT_MAGIC, struct.pack("<H", FILE_VERSION), struct.pack("<d", rate),
            struct.pack("<H", dim), struct.pack("<Q", frames),
            struct.pack("<H", len(channel_latents)), struct.pack("<Q", orig_len)]
    head += [struct.pack("<B", f) for f in formats]
    body = b"".join(np.ascontiguousarray(z, dtype="<f4").tobytes()
                    for z in channel_latents)
    _write_atomic(path, b"".join(head) + body)


def write_token_file(path, rate, channel_codes, formats, orig_len,
                     n_codebooks, entries):
    frames = channel_codes[0].shape[0]
    for c in channel_codes:
        if c.shape != (frames, n_codebooks):
            raise ValueError("all channels must share [frames, n_codebooks]")
        if c.min() < 0 or c.max() >= entries:
            raise ValueError(f"codes out of range [0, {entries})")
    head = [TOKEN_MAGIC, struct.pack("<H", FILE_VERSION), struct.pack("<d", rate),
            struct.pack("<H", n_codebooks), struct.pack("<H", entries),
            struct.pack("<Q", frames),
            struct.pack("<H", len(channel_codes)), struct.pack("<Q", orig_len)]
    head += [struct.pack("<B", f) for f in formats]
    body = b"".join(np.ascontiguousarray(c, dtype="<u2").tobytes()
                    for c in channel_codes)
    _write_atomic(path, b"".join(head) + body)


class _Cursor:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated reading {what}: expected "
                              f"{self.pos + n} bytes, file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def read_latent_file(path):
    with open(path, "rb") as f:
        blob = f.read()
    c = _Cursor(blob, path)
    magic = c.take(5, "magic")
    if magic != LATENT_MAGIC:
        raise FormatError(f"{path}: bad latent-file magic {magic!r}")
    (version,) = struct.unpack("<H", c.take(2, "version"))
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (rate,) = struct.unpack("<d", c.take(8, "rate"))
    (dim,) = struct.unpack("<H", c.take(2, "dim"))
    (frames,) = struct.unpack("<Q", c.take(8, "frame count"))
    (channels,) = struct.unpack("<H", c.take(2, "channels"))
    (orig_len,) = struct.unpack("<Q", c.take(8, "original length"))
    formats = [struct.unpack("<B", c.take(1, "format id"))[0] for _ in range(channels)]
    out = []
    for ch in range(channels):
        raw = c.take(4 * frames * dim, f"latents channel {ch}")
        out.append(np.frombuffer(raw, dtype="<f4").reshape(frames, dim).astype(np.float32))
    return {"rate": rate, "dim": dim, "frames": frames, "orig_len": orig_len,
            "formats": formats, "channels": out}


def read_token_file(path):
    with open(path, "rb") as f:
        blob = f.read()
    c = _Cursor(blob, path)
    magic = c.take(5, "magic")
    if magic != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad token-file magic {magic!r}")
    (version,) = struct.unpack("<H", c.take(2, "version"))
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (rate,) = struct.unpack("<d", c.take(8, "rate"))
    (books,) = struct.unpack("<H", c.take(2, "n_codebooks"))
    (entries,) = struct.unpack("<H", c.take(2, "entries"))
    (frames,) = struct.unpack("<Q", c.take(8, "frame count"))
    (channels,) = struct.unpack("<H", c.take(2, "channels"))
    (orig_len,) = struct.unpack("<Q", c.take(8, "original length"))
    formats = [struct.unpack("<B", c.take(1, "format id"))[0] for _ in range(channels)]
    out = []
    for ch in range(channels):
        raw = c.take(2 * frames * books, f"codes channel {ch}")
        out.append(np.frombuffer(raw, dtype="<u2").reshape(frames, books).astype(np.int64))
    return {"rate": rate, "n_codebooks": books, "entries": entries, "frames": frames,
            "orig_len": orig_len, "formats": formats, "channels": out}
