"""Supervised hierarchical expert training.

A selector network routes each task episode, via its embedding, to one of M
experts. Experts maximize free energy (negative loss minus a scaled KL to
their own output prior) on their assigned training data; the selector is
updated with a score-function gradient whose reward is the expert's free
energy measured on held-out validation data, penalized by the selection
stage's own information cost. Priors on both stages track marginals as
exponential moving averages.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .embeddings import (
    ConvAutoencoder,
    embed_images,
    embed_regression,
    train_autoencoder_step,
)
from .infotheory import (
    Categorical,
    mutual_information,
    update_marginal_prior,
)
from .layers import MLP, Conv3x3, Dense
from .losses import cross_entropy, huber
from .metrics import MetricsRow
from .optim import AdamState, adam_step
from .seeding import child_rng

EMA_RATE = 0.01


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last finite snapshot."""

    def __init__(self, message, snapshot=None, checkpoint_path=None):
        super().__init__(message)
        self.snapshot = snapshot
        self.checkpoint_path = checkpoint_path


class Selector:
    """Expert-selection policy: embedding -> M logits, with an EMA prior."""

    def __init__(self, rng, n_inputs, n_experts, hidden=(16, 16),
                 activation="tanh", beta1=10.0, lr=1e-3, dropout=0.0,
                 ema_rate=EMA_RATE):
        self.n_experts = n_experts
        self.net = MLP(
            [n_inputs, *hidden, n_experts], rng,
            hidden_activation=activation, dropout=dropout, name="selector",
        )
        self.prior = Categorical.uniform(n_experts)
        self.beta1 = beta1
        self.adam = AdamState(lr=lr)
        self.ema_rate = ema_rate

    def posterior(self, z):
        logits = self.net.forward(np.asarray(z, dtype=np.float64).reshape(1, -1))
        shifted = logits.data[0] - logits.data[0].max()
        probs = np.exp(shifted)
        return Categorical(probs / probs.sum())

    def params(self):
        return self.net.params()


def select_expert(selector, z, mode, rng=None):
    """Pick an expert for embedding z; returns (index, log posterior prob)."""
    posterior = selector.posterior(z)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        m = posterior.sample(rng)
    elif mode == "argmax":
        m = posterior.argmax()
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return m, float(np.log(posterior.probs[m]))


class RegressionExpert:
    """Shallow network predicting mean and log-std of a Gaussian over y.

    Prediction loss is Huber on the mean; the information penalty is the KL
    from the predictive Gaussian to an EMA output prior with unit std.
    """

    kind = "regression"

    def __init__(self, rng, index, hidden=40, beta2=10.0, lr=1e-3,
                 ema_rate=EMA_RATE):
        self.index = index
        self.net = MLP([1, hidden, 2], rng, hidden_activation="tanh",
                       name=f"expert{index}")
        self.beta2 = beta2
        self.adam = AdamState(lr=lr)
        self.ema_rate = ema_rate
        self.prior_mean = 0.0  # EMA of predictive means; prior std fixed at 1

    def predict(self, x):
        out = self.net.forward(np.asarray(x, dtype=np.float64))
        return out[:, 0:1], out[:, 1:2].clip(-6.0, 2.0)

    def _terms(self, mu, log_std, y):
        """Per-sample (loss, kl) tensors, each (B, 1)."""
        e = mu - Tensor(np.asarray(y, dtype=np.float64))
        abs_e = np.abs(e.data)
        # per-sample Huber with delta 1, as tensors for the training path
        quad = e * e * 0.5
        lin = e.clip(-1.0, 1.0) * e - Tensor(0.5 * np.clip(np.abs(e.data), None, 1.0) ** 2)
        loss = quad * Tensor((abs_e <= 1.0).astype(float)) + lin * Tensor((abs_e > 1.0).astype(float))
        sigma_sq = (log_std * 2.0).exp()
        diff = mu - self.prior_mean
        kl = (sigma_sq + diff * diff) * 0.5 - log_std - 0.5
        return loss, kl

    def training_loss(self, x, y):
        mu, log_std = self.predict(x)
        loss, kl = self._terms(mu, log_std, y)
        return loss.mean() + kl.mean() * (1.0 / self.beta2), mu

    def free_energy(self, x, y):
        """Mean of -loss - KL/beta2 over the dataset (higher is better)."""
        mu, log_std = self.predict(x)
        loss, kl = self._terms(mu, log_std, y)
        fhat = float(-(loss.data.mean()) - kl.data.mean() / self.beta2)
        return fhat, float(kl.data.mean())

    def val_metric(self, x, y):
        """Mean squared error of the predictive mean."""
        mu, _ = self.predict(x)
        return float(((mu.data - y) ** 2).mean())

    def update_prior(self, mu_batch):
        self.prior_mean += self.ema_rate * (float(np.mean(mu_batch)) - self.prior_mean)

    def prior_state(self):
        return {"prior_mean": np.array([self.prior_mean])}

    def load_prior_state(self, arrays, prefix):
        self.prior_mean = float(arrays[f"{prefix}/prior_mean"][0])

    def params(self):
        return self.net.params()


class ClassificationExpert:
    """One strided conv block plus a dense head over two classes."""

    kind = "classification"

    def __init__(self, rng, index, input_hw=(28, 28), n_filters=32,
                 beta2=10.0, lr=1e-3, ema_rate=EMA_RATE):
        self.index = index
        self.conv = Conv3x3(1, n_filters, rng, stride=2, padding=0,
                            activation="relu", name=f"expert{index}.conv")
        ho, wo = self.conv.out_size(*input_hw)
        self.flat_dim = ho * wo * n_filters
        self.head = Dense(self.flat_dim, 2, rng, name=f"expert{index}.head")
        self.beta2 = beta2
        self.adam = AdamState(lr=lr)
        self.ema_rate = ema_rate
        self.prior = Categorical.uniform(2)

    def logits(self, x):
        out = self.conv.forward(x if isinstance(x, Tensor) else Tensor(x))
        out = out.reshape(out.data.shape[0], self.flat_dim)
        return self.head.forward(out)

    def _terms(self, log_probs, y):
        """Per-sample (cross-entropy, kl-to-prior) tensors, each (B,)."""
        y = Tensor(np.asarray(y, dtype=np.float64))
        ce = -(y * log_probs).sum(axis=1)
        probs = log_probs.exp()
        log_prior = Tensor(np.log(self.prior.probs)[None, :])
        kl = (probs * (log_probs - log_prior)).sum(axis=1)
        return ce, kl

    def training_loss(self, x, y):
        log_probs = self.logits(x).log_softmax(axis=1)
        ce, kl = self._terms(log_probs, y)
        return ce.mean() + kl.mean() * (1.0 / self.beta2), log_probs.exp()

    def free_energy(self, x, y):
        log_probs = self.logits(x).log_softmax(axis=1)
        ce, kl = self._terms(log_probs, y)
        fhat = float(-ce.data.mean() - kl.data.mean() / self.beta2)
        return fhat, float(kl.data.mean())

    def val_metric(self, x, y):
        """Binary accuracy of the argmax class."""
        log_probs = self.logits(x).data
        return float((log_probs.argmax(axis=1) == np.asarray(y).argmax(axis=1)).mean())

    def update_prior(self, probs_batch):
        mean_pred = Categorical(np.mean(probs_batch, axis=0))
        self.prior = update_marginal_prior(self.prior, [mean_pred], self.ema_rate)

    def prior_state(self):
        return {"prior": self.prior.probs}

    def load_prior_state(self, arrays, prefix):
        self.prior = Categorical(arrays[f"{prefix}/prior"])

    def params(self):
        out = {}
        out.update(self.conv.params())
        out.update(self.head.params())
        return out


def expert_free_energy(expert, x, y, beta2=None):
    """Free energy of an expert on a dataset; optionally override beta2."""
    if beta2 is not None and beta2 != expert.beta2:
        saved = expert.beta2
        expert.beta2 = beta2
        try:
            return expert.free_energy(x, y)
        finally:
            expert.beta2 = saved
    return expert.free_energy(x, y)


def update_expert(expert, x, y):
    """One Adam step on mean loss + KL/beta2; EMA-update the output prior."""
    params = expert.params()
    with Tape() as tape:
        loss, predictive = expert.training_loss(x, y)
    grads = tape.gradients(loss, list(params.values()))
    adam_step(params, dict(zip(params.keys(), grads)), expert.adam)
    expert.update_prior(predictive.data)
    return loss.item()


def update_selector(selector, batch, dropout_rng=None):
    """Score-function step from (embedding, choice, free energy) triples.

    The per-episode coefficient is the free energy minus the batch-mean
    baseline minus the selection stage's own scaled log posterior/prior
    ratio; gradients flow only through log p(m | z).
    """
    if not batch:
        raise ValueError("empty selector batch")
    z = np.stack([np.asarray(item[0], dtype=np.float64) for item in batch])
    ms = np.array([item[1] for item in batch], dtype=int)
    fhats = np.array([item[2] for item in batch])
    params = selector.params()
    with Tape() as tape:
        log_probs = selector.net.forward(z, dropout_rng=dropout_rng).log_softmax(axis=1)
        chosen = log_probs[np.arange(len(batch)), ms]
        log_ratio = chosen.data - np.log(selector.prior.probs[ms])
        advantage = fhats - fhats.mean() - log_ratio / selector.beta1
        objective = (chosen * Tensor(advantage)).sum()
        loss = -objective
    grads = tape.gradients(loss, list(params.values()))
    adam_step(params, dict(zip(params.keys(), grads)), selector.adam)
    posteriors = [Categorical(p) for p in np.exp(log_probs.data)]
    selector.prior = update_marginal_prior(
        selector.prior, posteriors, selector.ema_rate
    )


class HierarchicalModel:
    """Selector, M experts, and (for images) the embedding autoencoder."""

    def __init__(self, kind, selector, experts, autoencoder=None,
                 pool="max", n_bins=10, bin_range=(-5.0, 5.0),
                 autoencoder_lr=1e-3):
        self.kind = kind
        self.selector = selector
        self.experts = experts
        self.autoencoder = autoencoder
        self.pool = pool
        self.n_bins = n_bins
        self.bin_range = bin_range
        self.ae_adam = AdamState(lr=autoencoder_lr)

    @property
    def n_experts(self):
        return len(self.experts)

    def embed(self, episode):
        if self.kind == "regression":
            points = list(zip(episode.train_x[:, 0], episode.train_y[:, 0]))
            return embed_regression(points, self.n_bins, self.bin_range).bin_values
        positives = episode.train_x[episode.train_y[:, 1] == 1.0]
        return embed_images(self.autoencoder, positives, self.pool).latent

    def state_dict(self):
        out = {}
        for name, p in self.selector.params().items():
            out[f"selector/{name}"] = p.data.copy()
        out["selector/prior"] = self.selector.prior.probs.copy()
        for m, expert in enumerate(self.experts):
            for name, p in expert.params().items():
                out[f"expert{m}/{name}"] = p.data.copy()
            for name, value in expert.prior_state().items():
                out[f"expert{m}/{name}"] = np.asarray(value, dtype=np.float64).copy()
        if self.autoencoder is not None:
            for name, p in self.autoencoder.params().items():
                out[f"ae/{name}"] = p.data.copy()
        return out

    def load_state_dict(self, arrays):
        for name, p in self.selector.params().items():
            p.data[:] = arrays[f"selector/{name}"]
        self.selector.prior = Categorical(arrays["selector/prior"])
        for m, expert in enumerate(self.experts):
            for name, p in expert.params().items():
                p.data[:] = arrays[f"expert{m}/{name}"]
            expert.load_prior_state(arrays, f"expert{m}")
        if self.autoencoder is not None:
            for name, p in self.autoencoder.params().items():
                p.data[:] = arrays[f"ae/{name}"]


def build_regression_model(n_experts, seed, beta1=10.0, beta2=10.0,
                           lr_selector=1e-3, lr_experts=1e-3, n_bins=10,
                           hidden_expert=40, hidden_selector=(16, 16),
                           ema_rate=EMA_RATE, dropout=0.0):
    selector = Selector(
        child_rng(seed, "init", "selector"), n_bins, n_experts,
        hidden=tuple(hidden_selector), activation="tanh", beta1=beta1,
        lr=lr_selector, dropout=dropout, ema_rate=ema_rate,
    )
    experts = [
        RegressionExpert(
            child_rng(seed, "init", "expert", m), m, hidden=hidden_expert,
            beta2=beta2, lr=lr_experts, ema_rate=ema_rate,
        )
        for m in range(n_experts)
    ]
    return HierarchicalModel("regression", selector, experts, n_bins=n_bins)


def build_classification_model(n_experts, seed, beta1=10.0, beta2=10.0,
                               lr_selector=1e-3, lr_experts=1e-3,
                               lr_autoencoder=1e-3, n_filters=32,
                               hidden_selector=(32, 32), pool="max",
                               ema_rate=EMA_RATE, dropout=0.0):
    autoencoder = ConvAutoencoder(child_rng(seed, "init", "ae"))
    selector = Selector(
        child_rng(seed, "init", "selector"), autoencoder.latent_dim, n_experts,
        hidden=tuple(hidden_selector), activation="relu", beta1=beta1,
        lr=lr_selector, dropout=dropout, ema_rate=ema_rate,
    )
    experts = [
        ClassificationExpert(
            child_rng(seed, "init", "expert", m), m, n_filters=n_filters,
            beta2=beta2, lr=lr_experts, ema_rate=ema_rate,
        )
        for m in range(n_experts)
    ]
    return HierarchicalModel(
        "classification", selector, experts, autoencoder=autoencoder,
        pool=pool, autoencoder_lr=lr_autoencoder,
    )


def meta_train(model, sample_episode, n_batches, meta_batch, seed,
               diverge_dir=None, on_batch=None):
    """Run the supervised meta-training loop.

    sample_episode(rng) must return a SupervisedEpisode. Returns one
    MetricsRow per meta-batch. On a non-finite loss the last finite
    parameter snapshot is saved (if diverge_dir is given) and
    TrainingDiverged raises.
    """
    rows = []
    last_finite = model.state_dict()
    for i in range(n_batches):
        ep_rng = child_rng(seed, "episodes", i)
        sel_rng = child_rng(seed, "select", i)
        try:
            row = _train_one_batch(model, sample_episode, meta_batch, i, seed,
                                   ep_rng, sel_rng)
        except NonFiniteError as err:
            path = None
            if diverge_dir is not None:
                from .checkpoint import save_checkpoint

                path = f"{diverge_dir}/diverged_batch{i}.ckpt"
                save_checkpoint(path, last_finite)
            raise TrainingDiverged(
                f"non-finite value at meta-batch {i}: {err}",
                snapshot=last_finite, checkpoint_path=path,
            ) from err
        rows.append(row)
        last_finite = model.state_dict()
        if on_batch is not None:
            on_batch(i, row)
    return rows


def _train_one_batch(model, sample_episode, meta_batch, batch_idx, seed,
                     ep_rng, sel_rng):
    t0 = time.perf_counter()
    episodes = [sample_episode(ep_rng) for _ in range(meta_batch)]
    zs = [model.embed(ep) for ep in episodes]
    posteriors = []
    selections = []
    for z in zs:
        posterior = model.selector.posterior(z)
        posteriors.append(posterior.probs)
        selections.append(posterior.sample(sel_rng))
    fhats = []
    val_metrics = []
    expert_kls = []
    for ep, m in zip(episodes, selections):
        fhat, kl_val = model.experts[m].free_energy(ep.val_x, ep.val_y)
        fhats.append(fhat)
        expert_kls.append(kl_val)
        val_metrics.append(model.experts[m].val_metric(ep.val_x, ep.val_y))

    update_selector(
        model.selector,
        list(zip(zs, selections, fhats)),
        dropout_rng=sel_rng if model.selector.net.dropout > 0 else None,
    )
    if model.autoencoder is not None:
        positives = np.concatenate([
            ep.train_x[ep.train_y[:, 1] == 1.0] for ep in episodes
        ])
        train_autoencoder_step(model.autoencoder, positives, model.ae_adam)
    for ep, m in zip(episodes, selections):
        update_expert(model.experts[m], ep.train_x, ep.train_y)

    joint = np.stack(posteriors) / len(posteriors)
    entropies = [
        -(p[p > 0] * np.log(p[p > 0])).sum() for p in posteriors
    ]
    return MetricsRow(
        episode=batch_idx,
        seed=seed,
        experts=model.n_experts,
        utility=float(np.mean(fhats)),
        val_metric=float(np.mean(val_metrics)),
        mi_bits=mutual_information(joint),
        expert_kl_nats=float(np.mean(expert_kls)),
        selector_entropy=float(np.mean(entropies)),
        wall_clock_ms=(time.perf_counter() - t0) * 1e3,
    )


def adapt_and_evaluate(model, episode, n_steps=10, lr=None):
    """Clone the argmax-selected expert, adapt it on D_train, score on D_val.

    The stored model is never mutated; the clone is discarded. Returns MSE
    for regression models, accuracy for classification.
    """
    z = model.embed(episode)
    m, _ = select_expert(model.selector, z, "argmax")
    clone = copy.deepcopy(model.experts[m])
    clone.adam = AdamState(lr=lr if lr is not None else model.experts[m].adam.lr)
    for _ in range(n_steps):
        update_expert(clone, episode.train_x, episode.train_y)
    return clone.val_metric(episode.val_x, episode.val_y)
