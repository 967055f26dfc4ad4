"""Network layers: dense, strided 3x3 convolution, and a gated recurrent cell.

All weights initialize uniformly in +-sqrt(6 / (fan_in + fan_out)); biases
start at zero. Layers expose `params()` as an ordered name -> Tensor mapping
so optimizers and checkpoints can address every parameter by name.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, concat


def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Fully connected layer, weights shaped (in, out)."""

    kind = "dense"

    def __init__(self, n_in, n_out, rng, activation=None, name="dense"):
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.name = name
        self.weights = Tensor(
            glorot_uniform((n_in, n_out), n_in, n_out, rng), name=f"{name}.w"
        )
        self.biases = Tensor(np.zeros(n_out), name=f"{name}.b")

    def forward(self, x):
        if x.data.shape[-1] != self.n_in:
            raise ShapeError(
                f"layer {self.name}: expected input width {self.n_in}, "
                f"got shape {x.data.shape}"
            )
        out = x @ self.weights + self.biases
        return _activate(out, self.activation)

    def params(self):
        return {f"{self.name}.w": self.weights, f"{self.name}.b": self.biases}


class Conv3x3:
    """3x3 convolution over NHWC inputs, filter shaped (3, 3, in, out)."""

    kind = "conv-strided-3x3"

    def __init__(self, c_in, c_out, rng, stride=2, padding=0,
                 activation=None, name="conv"):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.name = name
        fan_in = 9 * c_in
        fan_out = 9 * c_out
        self.weights = Tensor(
            glorot_uniform((3, 3, c_in, c_out), fan_in, fan_out, rng),
            name=f"{name}.w",
        )
        self.biases = Tensor(np.zeros(c_out), name=f"{name}.b")

    def forward(self, x):
        if x.data.ndim != 4 or x.data.shape[3] != self.c_in:
            raise ShapeError(
                f"layer {self.name}: expected NHWC input with {self.c_in} "
                f"channels, got shape {x.data.shape}"
            )
        out = conv2d(x, self.weights, self.biases, self.stride, self.padding)
        return _activate(out, self.activation)

    def out_size(self, h, w):
        kh = kw = 3
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo

    def params(self):
        return {f"{self.name}.w": self.weights, f"{self.name}.b": self.biases}


class LSTMCell:
    """Gated recurrent cell with input/forget/output gates.

    Weights stack the input and recurrent matrices as one
    (n_in + n_hidden, 4 * n_hidden) tensor; gate order is i, f, g, o.
    Hidden and cell state share the same size.
    """

    kind = "gated-recurrent"

    def __init__(self, n_in, n_hidden, rng, name="lstm"):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.name = name
        rows = n_in + n_hidden
        cols = 4 * n_hidden
        self.weights = Tensor(
            glorot_uniform((rows, cols), rows, cols, rng), name=f"{name}.w"
        )
        self.biases = Tensor(np.zeros(cols), name=f"{name}.b")

    def initial_state(self, batch=1):
        shape = (batch, self.n_hidden)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def step(self, state, x):
        """One recurrence step. state is (h, c); returns ((h', c'), h')."""
        h, c = state
        if x.data.ndim == 1:
            x = x.reshape(1, -1)
        if x.data.shape[-1] != self.n_in:
            raise ShapeError(
                f"layer {self.name}: expected input width {self.n_in}, "
                f"got shape {x.data.shape}"
            )
        if h.data.shape[-1] != self.n_hidden:
            raise ShapeError(
                f"layer {self.name}: state width {h.data.shape[-1]} does not "
                f"match hidden size {self.n_hidden}"
            )
        z = concat([x, h], axis=1) @ self.weights + self.biases
        n = self.n_hidden
        i = z[:, 0:n].sigmoid()
        f = z[:, n:2 * n].sigmoid()
        g = z[:, 2 * n:3 * n].tanh()
        o = z[:, 3 * n:4 * n].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return (h_new, c_new), h_new

    def params(self):
        return {f"{self.name}.w": self.weights, f"{self.name}.b": self.biases}


class MLP:
    """Stack of dense layers; hidden layers share one activation, output is linear."""

    def __init__(self, sizes, rng, hidden_activation="tanh", dropout=0.0,
                 name="mlp"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = []
        self.dropout = dropout
        self.name = name
        last = len(sizes) - 2
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = None if i == last else hidden_activation
            self.layers.append(Dense(a, b, rng, activation=act, name=f"{name}.fc{i}"))

    def forward(self, x, dropout_rng=None):
        out = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            out = layer.forward(out)
            hidden = i < len(self.layers) - 1
            if hidden and self.dropout > 0.0 and dropout_rng is not None:
                keep = 1.0 - self.dropout
                mask = dropout_rng.random(out.data.shape) < keep
                out = out * Tensor(mask / keep)
        return out

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def _activate(t, activation):
    if activation is None:
        return t
    if activation == "tanh":
        return t.tanh()
    if activation == "relu":
        return t.relu()
    if activation == "leaky_relu":
        return t.leaky_relu(0.01)
    if activation == "sigmoid":
        return t.sigmoid()
    raise ValueError(f"unknown activation {activation!r}")


def forward(layers, x):
    """Chain layers over an input; shape errors name the failing layer index."""
    out = x if isinstance(x, Tensor) else Tensor(x)
    for idx, layer in enumerate(layers):
        try:
            out = layer.forward(out)
        except ShapeError as err:
            raise ShapeError(f"layer index {idx}: {err}") from err
    return out


def conv2d(x, w, b, stride, padding):
    """2-D convolution via im2col. x: (B,H,W,C), w: (kh,kw,C,F), b: (F,)."""
    kh, kw, c_in, c_out = w.data.shape
    xp = x.data
    if padding > 0:
        xp = np.pad(
            xp, ((0, 0), (padding, padding), (padding, padding), (0, 0))
        )
    batch, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv input {x.data.shape} too small for 3x3 stride {stride}"
        )
    patches = np.empty((batch, ho, wo, kh, kw, c_in))
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, i, j, :] = xp[
                :, i:i + stride * ho:stride, j:j + stride * wo:stride, :
            ]
    cols = patches.reshape(batch * ho * wo, kh * kw * c_in)
    w_mat = w.data.reshape(kh * kw * c_in, c_out)
    out_data = (cols @ w_mat + b.data).reshape(batch, ho, wo, c_out)
    out = Tensor(out_data, (x, w, b), None)

    def backward(g):
        g_mat = g.reshape(batch * ho * wo, c_out)
        w.accumulate((cols.T @ g_mat).reshape(w.data.shape))
        b.accumulate(g_mat.sum(axis=0))
        g_cols = (g_mat @ w_mat.T).reshape(batch, ho, wo, kh, kw, c_in)
        gxp = np.zeros((batch, hp, wp, c_in))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += (
                    g_cols[:, :, :, i, j, :]
                )
        if padding > 0:
            gxp = gxp[:, padding:-padding, padding:-padding, :]
        x.accumulate(gxp)

    out._backward = backward
    return out


def resize_nearest(x, target_hw):
    """Nearest-neighbor upsample of (B,H,W,C) to (B,H2,W2,C), H2>=H, W2>=W."""
    batch, h, w, c = x.data.shape
    h2, w2 = target_hw
    if h2 < h or w2 < w:
        raise ShapeError(f"resize_nearest only upsamples: {(h, w)} -> {(h2, w2)}")
    rows = (np.arange(h2) * h) // h2
    cols = (np.arange(w2) * w) // w2
    out = Tensor(x.data[:, rows][:, :, cols], (x,), None)
    # floor mapping is onto when upsampling; source r owns targets starting
    # at ceil(r * h2 / h), so reduceat over those contiguous groups inverts it
    row_starts = (np.arange(h) * h2 + h - 1) // h
    col_starts = (np.arange(w) * w2 + w - 1) // w

    def backward(g):
        gx = np.add.reduceat(g, row_starts, axis=1)
        gx = np.add.reduceat(gx, col_starts, axis=2)
        x.accumulate(gx)

    out._backward = backward
    return out
