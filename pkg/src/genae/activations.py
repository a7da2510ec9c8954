"""Audio activations: Snake, its wrapped Taylor approximation, and ELU.

Snake(x, b) = x + sin^2(b*x)/b. The approximate variant replaces sin^2
with an 8th-order Taylor polynomial evaluated on an argument wrapped to
(-pi/2, pi/2] by the round function, which makes the approximation
globally pi-periodic in b*x. The wrap's round() is treated as constant in
backward (the jump set has measure zero), so the approximation is
piecewise smooth.

Each activation also has a plain-numpy reference (`*_np`) that preserves
the input dtype; certification oracles run those in float64.
"""

import numpy as np

from .ndtensor import Tensor, as_tensor, make_op

# sin^2(z) ~ z^2 - z^4/3 + 2 z^6/45 - z^8/315 on the wrapped interval
P8_COEFFS = (1.0, -1.0 / 3.0, 2.0 / 45.0, -1.0 / 315.0)


def p8_np(z):
    z2 = z * z
    c1, c2, c3, c4 = P8_COEFFS
    return z2 * (c1 + z2 * (c2 + z2 * (c3 + z2 * c4)))


def p8_prime_np(z):
    z2 = z * z
    c1, c2, c3, c4 = P8_COEFFS
    return z * (2.0 * c1 + z2 * (4.0 * c2 + z2 * (6.0 * c3 + z2 * 8.0 * c4)))


def wrap_np(x, beta):
    bx = beta * x
    return bx - np.pi * np.round(bx / np.pi)


def snake_np(x, beta):
    s = np.sin(beta * x)
    return x + s * s / beta


def snakelite_np(x, beta):
    return x + p8_np(wrap_np(x, beta)) / beta


def elu_np(x):
    return np.where(x > 0, x, np.expm1(x))


def snake(x, beta):
    """y = x + sin^2(beta*x)/beta, differentiable in x and beta.

    Reference form: forward saves sin(beta*x) and cos(beta*x) for backward,
    the memory cost that motivates the approximate variant.
    """
    x, beta = as_tensor(x), as_tensor(beta)
    bx = beta.data * x.data
    s = np.sin(bx)
    c = np.cos(bx)
    out = x.data + s * s / beta.data

    def back_x(g):
        # dy/dx = 1 + 2 sin(bx) cos(bx) = 1 + sin(2bx)
        return g * (1.0 + 2.0 * s * c)

    def back_beta(g):
        # dy/db = 2 x sin cos / b - sin^2 / b^2
        gb = g * (2.0 * x.data * s * c / beta.data - (s * s) / (beta.data * beta.data))
        from .ndtensor import unbroadcast
        return unbroadcast(gb, beta.data.shape)

    return make_op(out, (x, beta), (back_x, back_beta), saved=(s, c), op="snake")


def wrap(x, beta):
    """a = beta*x - pi*round(beta*x/pi), landing in (-pi/2, pi/2].

    sin^2(a) == sin^2(beta*x) exactly by pi-periodicity. Backward treats
    round() as constant, so da/dx = beta and da/dbeta = x between jumps.
    """
    x, beta = as_tensor(x), as_tensor(beta)
    bx = beta.data * x.data
    a = bx - np.pi * np.round(bx / np.pi)

    def back_x(g):
        return g * beta.data

    def back_beta(g):
        from .ndtensor import unbroadcast
        return unbroadcast(g * x.data, beta.data.shape)

    return make_op(a, (x, beta), (back_x, back_beta), saved=(), op="wrap")


def snakelite(x, beta):
    """y = x + P8(wrap(x, beta))/beta.

    Saves only the wrapped argument for backward (one buffer vs. snake's
    two), the whole point of the approximation.
    """
    x, beta = as_tensor(x), as_tensor(beta)
    bx = beta.data * x.data
    a = bx - np.pi * np.round(bx / np.pi)
    out = x.data + p8_np(a) / beta.data
    cache = {}

    def dp8():
        if "v" not in cache:
            cache["v"] = p8_prime_np(a)
        return cache["v"]

    def back_x(g):
        # straight-through the wrap: d/dx P8(a)/b = P8'(a)
        return g * (1.0 + dp8())

    def back_beta(g):
        # da/db = x (round constant); d/db [P8(a)/b] = P8'(a) x / b - P8(a)/b^2
        gb = g * (dp8() * x.data / beta.data - p8_np(a) / (beta.data * beta.data))
        from .ndtensor import unbroadcast
        return unbroadcast(gb, beta.data.shape)

    return make_op(out, (x, beta), (back_x, back_beta), saved=(a,), op="snakelite")


def elu(x):
    """x if x > 0 else exp(x) - 1; C1 at zero, alpha fixed at 1."""
    x = as_tensor(x)
    pos = x.data > 0
    e = np.exp(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, e - 1.0)
    dydx = np.where(pos, 1.0, e).astype(x.data.dtype)

    def back(g):
        return g * dydx

    return make_op(out, (x,), (back,), saved=(dydx,), op="elu")


class SnakeParams:
    """Per-channel learnable beta, parameterized in log-space (beta > 0)."""

    def __init__(self, channels, init_beta=1.0):
        self.log_beta = Tensor(np.full((channels, 1), np.log(init_beta), dtype=np.float32),
                               requires_grad=True)

    def beta(self):
        from .ndtensor import exp
        return exp(self.log_beta)

    def params(self, prefix=""):
        return {prefix + "log_beta": self.log_beta}


def certify_p8_error(n_points=1_000_000):
    """Dense-grid oracle: max |P8(z) - sin^2(z)| over (-pi/2, pi/2] in float64."""
    z = np.linspace(-np.pi / 2, np.pi / 2, n_points, dtype=np.float64)
    err = np.abs(p8_np(z) - np.sin(z) ** 2)
    i = int(np.argmax(err))
    return float(err[i]), float(z[i])
