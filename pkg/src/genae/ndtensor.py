"""Minimal N-d float32 tensor with reverse-mode autodiff.

Covers exactly the operations the codec graph needs: broadcasted
elementwise arithmetic, a few transcendentals, matmul (2-d and batched),
reductions, shape surgery, softmax, and the 1-d convolution family.
Everything produces contiguous float32 outputs; there are no views.

Gradients accumulate (+=) into .grad and are cleared explicitly with
zero_grad(). A global no_grad() mode skips closure/buffer capture for
inference, and bf16_mode() rounds every op output to bfloat16 precision
(round-to-nearest-even) while keeping float32 storage.
"""

import numpy as np

_GRAD_ENABLED = True
_BF16_EMULATE = False
_DTYPE = np.float32


class precision:
    """Context manager selecting the working dtype.

    float32 is the master precision; float64 exists so finite-difference
    oracles can evaluate forwards without float32 rounding noise.
    """

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype).type

    def __enter__(self):
        global _DTYPE
        self._prev = _DTYPE
        _DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._prev
        return False


class no_grad:
    """Context manager: ops inside record no graph (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class bf16_mode:
    """Context manager: round every op output to bfloat16 precision."""

    def __init__(self, enabled=True):
        self._enabled = enabled

    def __enter__(self):
        global _BF16_EMULATE
        self._prev = _BF16_EMULATE
        _BF16_EMULATE = self._enabled
        return self

    def __exit__(self, *exc):
        global _BF16_EMULATE
        _BF16_EMULATE = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


def bf16_round(a):
    """Round a float32 array to bfloat16 precision (nearest-even), keeping float32."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    bits = a.view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> np.uint32(16)) & np.uint32(1))) & np.uint32(0xFFFF0000)
    return rounded.view(np.float32)


def _prep(data):
    out = np.ascontiguousarray(data, dtype=_DTYPE)
    if _BF16_EMULATE and _DTYPE is np.float32:
        out = bf16_round(out)
    return out


def unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing trailing-dimension broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns", "_saved", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fns = ()
        self._saved = ()
        self._op = "leaf"

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # -- autodiff -------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        Graph.trace(self).run(self)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def make_op(data, parents, grad_fns, saved=(), op=""):
    """Build an op output node.

    parents: Tensors feeding this op. grad_fns: per-parent callables
    g -> gradient contribution (None for parents that take no gradient).
    saved: arrays the backward closure keeps alive; exposed for the
    activation-memory audits.
    """
    out = Tensor.__new__(Tensor)
    out.data = _prep(data)
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
        out._saved = tuple(saved)
    else:
        out._parents = ()
        out._grad_fns = ()
        out._saved = ()
    return out


class Graph:
    """Topologically ordered record of the ops reachable from a root.

    Creation order is recovered by iterative post-order DFS over parent
    links; backward runs in exact reverse topological order, accumulating
    into each parent's grad.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, root):
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node.grad is None or not node._parents:
                continue
            g = node.grad
            for parent, fn in zip(node._parents, node._grad_fns):
                if fn is None or not parent.requires_grad:
                    continue
                parent._accumulate(fn(g))

    def saved_buffers(self, op=None):
        """Saved backward buffers per node, optionally filtered by op tag."""
        out = []
        for node in self.nodes:
            if op is None or node._op == op:
                out.append((node._op, node._saved))
        return out


# -- elementwise ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data, (a, b),
        (lambda g: unbroadcast(g, a.data.shape), lambda g: unbroadcast(g, b.data.shape)),
        op="add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data, (a, b),
        (lambda g: unbroadcast(g, a.data.shape), lambda g: unbroadcast(-g, b.data.shape)),
        op="sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd, (a, b),
        (lambda g: unbroadcast(g * bd, ad.shape), lambda g: unbroadcast(g * ad, bd.shape)),
        saved=(ad, bd), op="mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad / bd, (a, b),
        (lambda g: unbroadcast(g / bd, ad.shape),
         lambda g: unbroadcast(-g * ad / (bd * bd), bd.shape)),
        saved=(ad, bd), op="div")


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), (lambda g: -g,), op="neg")


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return make_op(
        ad ** p, (a,),
        (lambda g: g * (p * ad ** (p - 1.0)),),
        saved=(ad,), op="pow")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return make_op(out_data, (a,), (lambda g: g * out_data,), saved=(out_data,), op="exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    return make_op(np.log(ad), (a,), (lambda g: g / ad,), saved=(ad,), op="log")


def sin(a):
    a = as_tensor(a)
    ad = a.data
    c = np.cos(ad)
    return make_op(np.sin(ad), (a,), (lambda g: g * c,), saved=(c,), op="sin")


def cos(a):
    a = as_tensor(a)
    ad = a.data
    s = np.sin(ad)
    return make_op(np.cos(ad), (a,), (lambda g: -g * s,), saved=(s,), op="cos")


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return make_op(out_data, (a,), (lambda g: g * (0.5 / out_data),), saved=(out_data,), op="sqrt")


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), (lambda g: g * s,), saved=(s,), op="abs")


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float32)
    return make_op(a.data * mask, (a,), (lambda g: g * mask,), saved=(mask,), op="relu")


def round_detached(a):
    """round() treated as a constant in backward (zero gradient)."""
    a = as_tensor(a)
    return make_op(np.round(a.data), (a,), (lambda g: np.zeros_like(a.data),), op="round")


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(np.float32)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).astype(np.float32)

    return make_op(out_data, (a,), (back,), op="sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        count = shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- shape surgery ---------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return make_op(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),), op="reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,),
                   (lambda g: np.ascontiguousarray(g.transpose(inv)),), op="transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back_for(i):
        def back(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return np.ascontiguousarray(g[tuple(sl)])
        return back

    return make_op(np.concatenate(datas, axis=axis), tuple(tensors),
                   tuple(back_for(i) for i in range(len(tensors))), op="concat")


def narrow(a, axis, start, length):
    a = as_tensor(a)
    shape = a.data.shape
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        full = np.zeros(shape, dtype=np.float32)
        full[sl] = g
        return full

    return make_op(a.data[sl], (a,), (back,), op="narrow")


# -- matmul ----------------------------------------------------------------


def matmul(a, b):
    """a @ b for 2-d x 2-d, batched 3-d x 3-d, and 3-d x 2-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
        grads = (lambda g: g @ bd.T, lambda g: ad.T @ g)
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"matmul batch dims disagree: {ad.shape} @ {bd.shape}")
        grads = (lambda g: g @ bd.transpose(0, 2, 1), lambda g: ad.transpose(0, 2, 1) @ g)
    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ValueError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
        grads = (lambda g: g @ bd.T,
                 lambda g: np.tensordot(ad, g, axes=([0, 1], [0, 1])))
    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
        grads = (lambda g: bd @ g, lambda g: np.outer(ad, g))
    else:
        raise ValueError(f"unsupported matmul ranks: {ad.ndim} @ {bd.ndim}")
    return make_op(ad @ bd, (a, b), grads, saved=(ad, bd), op="matmul")


# -- softmax ----------------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return p * (g - dot)

    return make_op(p, (a,), (back,), saved=(p,), op="softmax")


# -- 1-d convolution family --------------------------------------------------


def _window_view(xp, K, stride, dilation):
    # [C, Lp] -> [C, L_out, K] gathered taps
    span = (K - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=1)
    return win[:, ::stride, ::dilation]


def conv1d(x, w, b=None, stride=1, dilation=1, pad=(0, 0)):
    """Dense 1-d convolution (correlation). x: [C_in, L], w: [C_out, C_in, K]."""
    x, w = as_tensor(x), as_tensor(w)
    pl, pr = pad
    C_in, L = x.data.shape
    C_out, C_in_w, K = w.data.shape
    if C_in != C_in_w:
        raise ValueError(f"conv1d channel mismatch: input {C_in}, weight {C_in_w}")
    span = (K - 1) * dilation + 1
    if L + pl + pr < span:
        raise ValueError(f"conv1d input too short: L={L} pad={pad} needs >= {span}")
    xp = np.pad(x.data, ((0, 0), (pl, pr)))
    L_out = (xp.shape[1] - span) // stride + 1
    end = (L_out - 1) * stride + 1

    # im2col wins for narrow layers (one well-shaped GEMM); per-tap GEMMs
    # win once channels are wide enough to saturate BLAS without the copy
    use_im2col = C_in * K <= 1024

    if use_im2col:
        win = _window_view(xp, K, stride, dilation)      # [C_in, L_out, K]
        cols = np.ascontiguousarray(win.transpose(1, 0, 2)).reshape(L_out, C_in * K)
        out = np.ascontiguousarray((cols @ w.data.reshape(C_out, C_in * K).T).T)
    else:
        cols = None
        out = w.data[:, :, 0] @ xp[:, 0:end:stride]
        for k in range(1, K):
            off = k * dilation
            out += w.data[:, :, k] @ xp[:, off:off + end:stride]

    def back_x(g):
        dxp = np.zeros_like(xp)
        if use_im2col:
            # one GEMM, then K tap adds (contiguous for stride 1)
            dcols = (g.T @ w.data.reshape(C_out, C_in * K)).reshape(L_out, C_in, K)
            dcols = np.ascontiguousarray(dcols.transpose(1, 2, 0))   # [C_in, K, L_out]
            for k in range(K):
                off = k * dilation
                dxp[:, off:off + L_out * stride:stride] += dcols[:, k, :]
        else:
            for k in range(K):
                off = k * dilation
                dxp[:, off:off + L_out * stride:stride] += w.data[:, :, k].T @ g
        return dxp[:, pl:pl + L] if (pl or pr) else dxp

    def back_w(g):
        if cols is not None:
            return (g @ cols).reshape(C_out, C_in, K)
        dw = np.empty_like(w.data)
        gt = np.ascontiguousarray(g.T)
        for k in range(K):
            off = k * dilation
            dw[:, :, k] = (xp[:, off:off + end:stride] @ gt).T
        return dw

    parents = [x, w]
    grads = [back_x, back_w]
    data = out
    if b is not None:
        b = as_tensor(b)
        data = out + b.data[:, None]
        parents.append(b)
        grads.append(lambda g: g.sum(axis=1))
    saved = (xp,) if cols is None else (xp, cols)
    return make_op(data, tuple(parents), tuple(grads), saved=saved, op="conv1d")


def depthwise_conv1d(x, w, b=None, stride=1, dilation=1, pad=(0, 0)):
    """Per-channel 1-d convolution. x: [C, L], w: [C, K]."""
    x, w = as_tensor(x), as_tensor(w)
    pl, pr = pad
    C, L = x.data.shape
    C_w, K = w.data.shape
    if C != C_w:
        raise ValueError(f"depthwise channel mismatch: input {C}, weight {C_w}")
    span = (K - 1) * dilation + 1
    if L + pl + pr < span:
        raise ValueError(f"depthwise input too short: L={L} pad={pad} needs >= {span}")
    xp = np.pad(x.data, ((0, 0), (pl, pr)))
    win = _window_view(xp, K, stride, dilation)          # [C, L_out, K]
    L_out = win.shape[1]
    out = np.einsum("clk,ck->cl", win, w.data)

    def back_x(g):
        dxp = np.zeros_like(xp)
        for k in range(K):
            off = k * dilation
            dxp[:, off:off + L_out * stride:stride] += g * w.data[:, k:k + 1]
        return dxp[:, pl:pl + L] if (pl or pr) else dxp

    def back_w(g):
        return np.einsum("clk,cl->ck", win, g)

    parents = [x, w]
    grads = [back_x, back_w]
    data = out
    if b is not None:
        b = as_tensor(b)
        data = out + b.data[:, None]
        parents.append(b)
        grads.append(lambda g: g.sum(axis=1))
    return make_op(data, tuple(parents), tuple(grads), saved=(win,), op="depthwise_conv1d")


def conv_transpose1d(x, w, b=None, stride=1, crop=(0, 0)):
    """Transposed 1-d convolution. x: [C_in, L], w: [C_in, C_out, K].

    Full output has length (L-1)*stride + K; crop=(cl, cr) trims the ends,
    the adjoint of conv1d padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    cl, cr = crop
    C_in, L = x.data.shape
    C_in_w, C_out, K = w.data.shape
    if C_in != C_in_w:
        raise ValueError(f"conv_transpose1d channel mismatch: input {C_in}, weight {C_in_w}")
    L_full = (L - 1) * stride + K
    y = np.zeros((C_out, L_full), dtype=np.result_type(x.data, w.data))
    # one GEMM for all taps, then K strided scatter-adds
    taps = (w.data.reshape(C_in, C_out * K).T @ x.data).reshape(C_out, K, L)
    for k in range(K):
        y[:, k:k + L * stride:stride] += taps[:, k, :]
    out = y[:, cl:L_full - cr]

    def _gather(g):
        gp = np.zeros((C_out, L_full), dtype=g.dtype)
        gp[:, cl:L_full - cr] = g
        gs = np.empty((C_out, K, L), dtype=g.dtype)
        for k in range(K):
            gs[:, k, :] = gp[:, k:k + L * stride:stride]
        return gs.reshape(C_out * K, L)

    def back_x(g):
        return w.data.reshape(C_in, C_out * K) @ _gather(g)

    def back_w(g):
        return (x.data @ _gather(g).T).reshape(C_in, C_out, K)

    parents = [x, w]
    grads = [back_x, back_w]
    data = out
    if b is not None:
        b = as_tensor(b)
        data = out + b.data[:, None]
        parents.append(b)
        grads.append(lambda g: g.sum(axis=1))
    return make_op(data, tuple(parents), tuple(grads), saved=(x.data, w.data), op="conv_transpose1d")


# -- finite-difference oracle -------------------------------------------------


def fd_gradient(func, tensors, index, h=1e-3):
    """Central finite differences of scalar func w.r.t. tensors[index].

    Independent of the autodiff path: only calls func forward, in no_grad
    mode, perturbing one element at a time. Forwards run in float64 so the
    h=1e-3 stencil is not drowned by float32 rounding.
    """
    with no_grad(), precision(np.float64):
        shadows = [Tensor(t.data) for t in tensors]
        base = shadows[index].data
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(func(*shadows).data)
            flat[i] = orig - h
            fm = float(func(*shadows).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(func, tensors, h=1e-3, rtol=1e-3, atol=1e-4):
    """Compare autodiff gradients of scalar func against central differences.

    func must depend on the listed tensors only through its arguments (use
    gradcheck_inplace for layer objects holding their own parameters).
    Returns the worst relative error seen; raises AssertionError past rtol.
    Relative error is measured norm-wise per input tensor.
    """
    for t in tensors:
        t.zero_grad()
    loss = func(*tensors)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        num = fd_gradient(func, tensors, i, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), atol)
        rel = np.linalg.norm(ana - num) / denom
        worst = max(worst, rel)
        if rel >= rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel err {rel:.3e} >= {rtol:.1e}")
    return worst


def gradcheck_inplace(build_loss, tensors, h=1e-3, rtol=1e-3, atol=1e-4):
    """gradcheck for losses that read the listed tensors in place (layer
    parameters and inputs). build_loss() -> scalar Tensor; the FD oracle
    temporarily swaps perturbed buffers into the tensors."""
    originals = [t.data for t in tensors]

    def f(*shadows):
        for t, s in zip(tensors, shadows):
            t.data = s.data
        try:
            return build_loss()
        finally:
            for t, orig in zip(tensors, originals):
                t.data = orig

    return gradcheck(f, tensors, h=h, rtol=rtol, atol=atol)
