"""Task embeddings: fixed-size, permutation-invariant summaries of a task.

Regression tasks bin their points by x and average y per bin. Image tasks
pass positive samples through a convolutional autoencoder and pool the
flattened bottleneck vectors elementwise. RL tasks run trajectory tuples
through a recurrent encoder whose final hidden state maps to selection
logits.

Embeddings are consumed as constants by the selector: autoencoder gradients
stay purely reconstructive (stop-gradient at the embedding boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .layers import Conv3x3, Dense, LSTMCell, resize_nearest
from .losses import mse
from .optim import adam_step

N_BINS_DEFAULT = 10
BIN_RANGE_DEFAULT = (-5.0, 5.0)


@dataclass
class RegressionEmbedding:
    """Per-bin mean of y values over equal-width x bins."""

    bin_values: np.ndarray
    bin_range: tuple


def embed_regression(points, n_bins=N_BINS_DEFAULT, bin_range=BIN_RANGE_DEFAULT):
    """Bin (x, y) pairs by x and average y per bin; empty bins hold 0.

    x outside the range clips to the edge bins, so the embedding is total.
    Order of points cannot matter: each bin is a mean.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = bin_range
    if not hi > lo:
        raise ValueError("bin_range must be non-degenerate")
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins)
    pts = np.asarray([(float(x), float(y)) for x, y in points])
    if pts.size:
        # canonical accumulation order makes the mean bitwise order-independent
        pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
        width = (hi - lo) / n_bins
        idx = np.clip(
            np.floor((pts[:, 0] - lo) / width), 0, n_bins - 1
        ).astype(int)
        np.add.at(sums, idx, pts[:, 1])
        np.add.at(counts, idx, 1.0)
    values = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    return RegressionEmbedding(bin_values=values, bin_range=(lo, hi))


class ConvAutoencoder:
    """Strided 3x3 conv encoder mirrored by nearest-upsample + conv decoder.

    The flattened final encoder activation is the image embedding. Decoder
    targets the encoder's intermediate spatial sizes so the reconstruction
    matches the input shape exactly; the output layer is a sigmoid since
    inputs live in [0, 1].
    """

    def __init__(self, rng, input_hw=(28, 28), channels=(16, 16, 4), name="ae"):
        self.input_hw = input_hw
        self.name = name
        self.encoder = []
        sizes = [input_hw]
        c_prev = 1
        for i, c in enumerate(channels):
            layer = Conv3x3(
                c_prev, c, rng, stride=2, padding=0,
                activation="leaky_relu", name=f"{name}.enc{i}",
            )
            self.encoder.append(layer)
            sizes.append(layer.out_size(*sizes[-1]))
            c_prev = c
        self.sizes = sizes  # spatial size before each encoder layer + bottleneck
        self.latent_hw = sizes[-1]
        self.latent_dim = sizes[-1][0] * sizes[-1][1] * channels[-1]
        self.decoder = []
        dec_channels = list(reversed(channels[:-1])) + [1]
        c_prev = channels[-1]
        for i, c in enumerate(dec_channels):
            activation = "sigmoid" if i == len(dec_channels) - 1 else "leaky_relu"
            self.decoder.append(
                Conv3x3(
                    c_prev, c, rng, stride=1, padding=1,
                    activation=activation, name=f"{name}.dec{i}",
                )
            )
            c_prev = c
        self.dec_targets = list(reversed(sizes[:-1]))

    def encode(self, images):
        """(B, H, W, 1) -> (B, latent_dim) flattened bottleneck activations."""
        out = images if isinstance(images, Tensor) else Tensor(images)
        for layer in self.encoder:
            out = layer.forward(out)
        return out.reshape(out.data.shape[0], self.latent_dim)

    def reconstruct(self, images):
        out = images if isinstance(images, Tensor) else Tensor(images)
        for layer in self.encoder:
            out = layer.forward(out)
        for layer, target in zip(self.decoder, self.dec_targets):
            out = resize_nearest(out, target)
            out = layer.forward(out)
        return out

    def params(self):
        out = {}
        for layer in self.encoder + self.decoder:
            out.update(layer.params())
        return out


@dataclass
class ImageEmbedding:
    """Elementwise pool of per-image bottleneck vectors."""

    latent: np.ndarray


_POOLS = {"max": np.max, "mean": np.mean, "min": np.min}


def embed_images(autoencoder, positive_samples, pool="max"):
    """Encode each positive sample and pool elementwise across samples.

    Output dimensionality is the autoencoder's latent size regardless of how
    many samples arrive.
    """
    if pool not in _POOLS:
        raise ValueError(f"unknown pooling {pool!r}; use max, mean, or min")
    images = np.asarray(positive_samples, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[0] < 1:
        raise ValueError("need at least one positive sample to embed")
    latents = autoencoder.encode(images).data
    return ImageEmbedding(latent=_POOLS[pool](latents, axis=0))


def train_autoencoder_step(autoencoder, positive_samples, adam):
    """One Adam step on reconstruction MSE; returns the scalar loss."""
    images = np.asarray(positive_samples, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    params = autoencoder.params()
    with Tape() as tape:
        recon = autoencoder.reconstruct(images)
        loss = mse(recon, images)
    grads = tape.gradients(loss, list(params.values()))
    adam_step(params, dict(zip(params.keys(), grads)), adam)
    return loss.item()


@dataclass
class TrajectoryEncoderState:
    """Recurrent state plus a consumed-steps counter; zeros at episode start."""

    hidden: np.ndarray
    cell: np.ndarray
    steps_consumed: int = 0


class TrajectoryEncoder:
    """LSTM over (state, action, reward, time) tuples -> selection logits."""

    def __init__(self, rng, input_dim, n_hidden, n_out, name="trajenc"):
        self.cell = LSTMCell(input_dim, n_hidden, rng, name=f"{name}.cell")
        self.head = Dense(n_hidden, n_out, rng, name=f"{name}.head")
        self.name = name

    def initial_state(self):
        n = self.cell.n_hidden
        return TrajectoryEncoderState(np.zeros((1, n)), np.zeros((1, n)), 0)

    def consume(self, state, tuples):
        """Feed time-ordered tuples; return (logits Tensor, new state).

        Raises on an empty tuple list: with no information, the caller must
        fall back to the prior over experts.
        """
        if len(tuples) == 0:
            raise ValueError(
                "empty trajectory prefix: select from the prior instead"
            )
        h = Tensor(state.hidden)
        c = Tensor(state.cell)
        for row in tuples:
            (h, c), _ = self.cell.step((h, c), Tensor(np.asarray(row, dtype=np.float64).reshape(1, -1)))
        logits = self.head.forward(h)
        new_state = TrajectoryEncoderState(
            hidden=h.data.copy(),
            cell=c.data.copy(),
            steps_consumed=state.steps_consumed + len(tuples),
        )
        return logits, new_state

    def params(self):
        out = {}
        out.update(self.cell.params())
        out.update(self.head.params())
        return out


def embed_trajectory(encoder, state, tuples):
    """Selection logits for a trajectory prefix; see TrajectoryEncoder.consume."""
    return encoder.consume(state, tuples)
