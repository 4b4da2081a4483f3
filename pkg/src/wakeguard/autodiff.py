"""A minimal sequential reverse-mode tape for the frame classifiers.

Every recorded op is a closure mapping the gradient of its output to the
gradient of its input while accumulating parameter gradients into a
shared dict.  Ops are composites where a branch rejoins (highway blocks,
the cortical residual), so the tape itself stays a plain list.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


class TapeError(RuntimeError):
    pass


class Tape:
    def __init__(self):
        self._ops = []
        self.params = None
        self.output_shape = None
        self.squeeze = False    # forward saw an unbatched input

    def __len__(self):
        return len(self._ops)

    def push(self, op):
        self._ops.append(op)

    def backward(self, upstream):
        """Pull `upstream` (d loss / d output) back through the tape.

        Returns ``(param_grads, input_grad)``.  The tape may be replayed
        any number of times.
        """
        if not self._ops or self.params is None:
            raise TapeError("backward called without a matching forward tape")
        upstream = np.asarray(upstream, dtype=np.float64)
        if self.squeeze:
            upstream = upstream[None]
        if upstream.shape != self.output_shape:
            raise TapeError(f"upstream shape {upstream.shape} != forward output {self.output_shape}")
        grads = {name: np.zeros_like(w) for name, w in self.params.items()}
        g = upstream
        for op in reversed(self._ops):
            g = op(g, grads)
        return grads, (g[0] if self.squeeze else g)


def affine(tape, x, params, name):
    W, b = params[f"{name}.W"], params[f"{name}.b"]
    y = x @ W + b
    if tape is not None:
        def back(g, grads):
            grads[f"{name}.W"] += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[f"{name}.b"] += g.reshape(-1, g.shape[-1]).sum(axis=0)
            return g @ W.T
        tape.push(back)
    return y


def tanh(tape, x):
    y = np.tanh(x)
    if tape is not None:
        tape.push(lambda g, grads: g * (1.0 - y * y))
    return y


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dropout_mask(rng, shape, p):
    """Inverted-dropout mask: 0 with probability p, else 1 / (1 - p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    # 1 / (1 - p) from the decimal value of p, so p = 0.9 scales by exactly 10.0
    scale = float(1 / (1 - Fraction(repr(float(p)))))
    return (rng.random(shape) >= p) * scale


def dropout(tape, x, p, rng, train):
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train mode needs an rng stream for dropout masks")
    mask = dropout_mask(rng, x.shape, p)
    if tape is not None:
        tape.push(lambda g, grads: g * mask)
    return x * mask


def highway(tape, x, params, name):
    """y = T * H + (1 - T) * x,  T = sigmoid(x Wt + bt),  H = tanh(x Wh + bh)."""
    Wh, bh = params[f"{name}.Wh"], params[f"{name}.bh"]
    Wt, bt = params[f"{name}.Wt"], params[f"{name}.bt"]
    H = np.tanh(x @ Wh + bh)
    T = sigmoid(x @ Wt + bt)
    y = T * (H - x) + x
    if tape is not None:
        def back(g, grads):
            gH = g * T * (1.0 - H * H)
            gT = g * (H - x) * T * (1.0 - T)
            x2 = x.reshape(-1, x.shape[-1])
            grads[f"{name}.Wh"] += x2.T @ gH.reshape(x2.shape[0], -1)
            grads[f"{name}.bh"] += gH.reshape(x2.shape[0], -1).sum(axis=0)
            grads[f"{name}.Wt"] += x2.T @ gT.reshape(x2.shape[0], -1)
            grads[f"{name}.bt"] += gT.reshape(x2.shape[0], -1).sum(axis=0)
            return g * (1.0 - T) + gH @ Wh.T + gT @ Wt.T
        tape.push(back)
    return y


def context_stack(tape, h, left, right):
    """Concatenate frames t-left .. t+right (zero padded) along features.

    h: (N, T, B) -> (N, T, (left + 1 + right) * B), oldest frame first.
    """
    n, t, b = h.shape
    padded = np.zeros((n, t + left + right, b))
    padded[:, left:left + t] = h
    width = left + 1 + right
    out = np.concatenate([padded[:, k:k + t] for k in range(width)], axis=-1)
    if tape is not None:
        def back(g, grads):
            gp = np.zeros_like(padded)
            for k in range(width):
                gp[:, k:k + t] += g[..., k * b:(k + 1) * b]
            return gp[:, left:left + t]
        tape.push(back)
    return out
