"""Adapted EM for soft pseudo-labels.

Each iteration: soft-assign features to the bases with a dot-product
softmax, draw Monte-Carlo latent samples from the unit-covariance mixture,
push them through the linear classifier head, take one gradient step on
the head (cross-entropy of the mean prediction on labeled rows, predictive
variance on unlabeled rows), and finally move every basis to the
assignment-weighted mean of the features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSet
from .errors import DegenerateBasisError, ShapeError
from .model import UNLABELED, Dataset, Layer, Sgd
from .numerics import SeededRng, matmul, row_softmax, seq_sum

log = logging.getLogger(__name__)

MIN_COLUMN_MASS = 1e-12


@dataclass
class SoftPseudoLabel:
    index: int
    mean: np.ndarray
    var: np.ndarray
    uncertainty: float

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.mean))

    @property
    def confidence(self) -> float:
        return float(np.max(self.mean))

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "mean": [float(v) for v in self.mean],
            "var": [float(v) for v in self.var],
            "uncertainty": float(self.uncertainty),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SoftPseudoLabel":
        return cls(int(doc["index"]), np.asarray(doc["mean"], float), np.asarray(doc["var"], float),
                   float(doc["uncertainty"]))


@dataclass
class EmState:
    basis: BasisSet
    assignment: np.ndarray
    head: Layer
    iteration: int
    loss_curve: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)


def e_step(x, basis: BasisSet, temp: float = 1.0) -> np.ndarray:
    """Soft assignments ``softmax(temp * X mu^T)``; rows sum to one."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != basis.d:
        raise ShapeError(f"features have shape {x.shape}, basis dimension is {basis.d}")
    return row_softmax(matmul(x, basis.mu.T), temp)


def _weighted_means(x, z):
    num = matmul(z.T, x)  # K x d, sum over n ascending
    mass = seq_sum(z, axis=0)
    return num, mass


def m_step(x, z) -> BasisSet:
    """Assignment-weighted means ``mu_k = sum_n z_nk x_n / sum_n z_nk``."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or x.ndim != 2 or z.shape[0] != x.shape[0]:
        raise ShapeError(f"assignments {z.shape} do not match features {x.shape}")
    num, mass = _weighted_means(x, z)
    bad = np.flatnonzero(mass < MIN_COLUMN_MASS)
    if bad.size:
        raise DegenerateBasisError(bad)
    return BasisSet(num / mass[:, None])


# -- Monte-Carlo pushforward ------------------------------------------------------


@dataclass
class LatentNoise:
    """Randomness behind latent samples.

    ``u`` holds the uniforms that pick mixture components, shape (m,) for a
    single row or (N, m) for a batch.  ``eps`` holds the Gaussian offsets,
    shape (m, d) (shared by every row of a batch) or (N, m, d).
    """

    u: np.ndarray
    eps: np.ndarray


def draw_noise(rng: SeededRng, m: int, d: int, rows: Optional[int] = None, shared_eps: bool = False) -> LatentNoise:
    u_shape = (m,) if rows is None else (rows, m)
    u = rng.uniform(u_shape)
    eps_shape = (m, d) if rows is None or shared_eps else (rows, m, d)
    return LatentNoise(u, rng.normal(eps_shape))


def draw_row_noise(rng: SeededRng, indices: Sequence[int], m: int, d: int) -> LatentNoise:
    """Noise for several rows, each from its own ``rng.split(index)`` stream."""
    per_row = [draw_noise(rng.split(int(i)), m, d) for i in indices]
    if not per_row:
        return LatentNoise(np.zeros((0, m)), np.zeros((0, m, d)))
    return LatentNoise(np.stack([p.u for p in per_row]), np.stack([p.eps for p in per_row]))


def latent_table(z, basis: BasisSet, u, mode: str = "mixture") -> tuple:
    """Centres of the latent samples as ``(table, index)``: sample (n, s) sits at ``table[index[n, s]]``.

    ``mixture`` picks component k by inverse CDF of z_n; ``blend`` uses
    sum_k z_nk mu_k for every sample of row n.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    u = np.atleast_2d(u)
    if mode == "blend":
        table = matmul(z, basis.mu)
        index = np.repeat(np.arange(len(z))[:, None], u.shape[1], axis=1)
        return table, index
    cdf = np.cumsum(z, axis=1)
    target = u[:, :, None] * cdf[:, -1][:, None, None]
    comp = np.sum(cdf[:, None, :] <= target, axis=2)
    return basis.mu, np.minimum(comp, basis.k - 1)


def latent_from_noise(z, basis: BasisSet, noise: LatentNoise, mode: str = "mixture") -> np.ndarray:
    """Explicit latent samples, (m, d) for a single row z or (N, m, d) for a batch."""
    single = np.asarray(z).ndim == 1
    table, index = latent_table(z, basis, noise.u, mode)
    eps = noise.eps[None] if single else noise.eps
    out = table[index] + eps
    return out[0] if single else out


def sample_latent(z_row, basis: BasisSet, rng: SeededRng, m: int, mode: str = "mixture") -> np.ndarray:
    """``m`` latent vectors drawn from the unit-covariance mixture weighted by ``z_row``."""
    return latent_from_noise(z_row, basis, draw_noise(rng, m, basis.d), mode)


def _softmax_last(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _head_probs(latents: np.ndarray, head: Layer) -> np.ndarray:
    lead = latents.shape[:-1]
    logits = matmul(latents.reshape(-1, latents.shape[-1]), head.weight) + head.bias
    return _softmax_last(logits).reshape(lead + (head.d_out,))


def _summarize(probs: np.ndarray) -> tuple:
    """Per-row (mean, var, uncertainty) of (N, m, C) sampled class probabilities."""
    mean = probs.mean(axis=1)
    mean = mean / mean.sum(axis=1, keepdims=True)
    var = probs.var(axis=1, ddof=1)
    return mean, var, var.sum(axis=1)


def pseudo_labels_from_latents(latents, head: Layer, indices) -> list:
    mean, var, unc = _summarize(_head_probs(latents, head))
    return [SoftPseudoLabel(int(i), mean[r], var[r], float(unc[r])) for r, i in enumerate(indices)]


def pseudo_label_distribution(
    z_row, basis: BasisSet, head: Layer, rng: SeededRng, m: int, index: int = 0, mode: str = "mixture"
) -> SoftPseudoLabel:
    """Mean, per-class variance and total variance of softmax(head(x)) over ``m`` latent draws."""
    if m < 2:
        raise ValueError("need at least two Monte-Carlo samples for a variance")
    latents = sample_latent(z_row, basis, rng, m, mode)
    return pseudo_labels_from_latents(latents[None], head, [index])[0]


# -- head loss ----------------------------------------------------------------------


def combined_loss(labels: Sequence[SoftPseudoLabel], truth=None, mix_weight: float = 1.0) -> float:
    """Mean cross-entropy of labeled rows plus ``mix_weight`` times mean uncertainty of the rest.

    ``truth[i]`` is a class id for labeled entries and UNLABELED (or None) otherwise.
    """
    truth = [UNLABELED] * len(labels) if truth is None else list(truth)
    if len(truth) != len(labels):
        raise ShapeError(f"{len(labels)} pseudo-labels but {len(truth)} truth entries")
    sup, unsup = [], []
    for pl, t in zip(labels, truth):
        if t is None or t == UNLABELED:
            unsup.append(pl.uncertainty)
        else:
            sup.append(-math.log(max(float(pl.mean[int(t)]), 1e-300)))
    total = 0.0
    if sup:
        total += sum(sup) / len(sup)
    if unsup:
        total += mix_weight * sum(unsup) / len(unsup)
    return total


def head_loss_and_grad(table, index, eps, head: Layer, truth, mix_weight: float = 1.0) -> tuple:
    """Combined loss over latent samples ``table[index] + eps`` and its head gradient.

    ``eps`` is (m, d) when shared across rows or (N, m, d).  The samples are
    fixed draws (reparameterized noise), so only the linear head is
    differentiated.  Returns ``(loss, grad_weight, grad_bias)``.
    """
    truth = np.asarray(truth, dtype=np.int64)
    index = np.asarray(index)
    n, m = index.shape
    shared = eps.ndim == 2
    base = matmul(table, head.weight) + head.bias  # R x C
    if shared:
        offs = matmul(eps, head.weight)[None]  # 1 x m x C
    else:
        offs = matmul(eps.reshape(-1, eps.shape[-1]), head.weight).reshape(n, m, -1)
    probs = _softmax_last(base[index] + offs)
    mean = probs.mean(axis=1)
    lab = np.flatnonzero(truth != UNLABELED)
    unl = np.flatnonzero(truth == UNLABELED)

    g = np.zeros_like(probs)
    loss = 0.0
    if lab.size:
        y = truth[lab]
        p_true = mean[lab, y]
        loss += float(np.mean(-np.log(p_true)))
        g[lab, :, y] = (-1.0 / (lab.size * m) / p_true)[:, None]
    if unl.size:
        dev = probs[unl] - mean[unl][:, None, :]
        var = np.sum(dev * dev, axis=1) / (m - 1)
        loss += mix_weight * float(np.mean(var.sum(axis=1)))
        g[unl] = mix_weight * 2.0 * dev / ((m - 1) * unl.size)

    # softmax Jacobian: dL/dlogit = p * (g - <p, g>)
    dlogit = probs * (g - np.sum(probs * g, axis=2, keepdims=True))
    n_cls = head.d_out
    flat_idx = index.ravel()
    flat_dl = dlogit.reshape(-1, n_cls)
    # bincount accumulates in index order, keeping the sums reproducible
    per_row = np.column_stack([
        np.bincount(flat_idx, weights=flat_dl[:, c], minlength=len(table)) for c in range(n_cls)
    ])
    grad_w = matmul(np.asarray(table).T, per_row)
    if shared:
        grad_w += matmul(eps.T, seq_sum(dlogit, axis=0))
    else:
        grad_w += matmul(eps.reshape(-1, eps.shape[-1]).T, flat_dl)
    return loss, grad_w, seq_sum(flat_dl, axis=0)


# -- the EM loop --------------------------------------------------------------------


def _m_step_reseed(x, z, labeled_rows, rng: SeededRng) -> tuple:
    try:
        return m_step(x, z), []
    except DegenerateBasisError as exc:
        num, mass = _weighted_means(x, z)
        pool = labeled_rows if len(labeled_rows) else np.arange(len(x))
        mu = np.empty_like(num)
        ok = mass >= MIN_COLUMN_MASS
        mu[ok] = num[ok] / mass[ok][:, None]
        for k in exc.indices:
            mu[k] = x[pool[int(rng.integers(0, len(pool)))]]
        log.info("re-seeded degenerate bases %s at random labeled points", list(exc.indices))
        return BasisSet(mu), list(exc.indices)


def run_em(data: Dataset, init: BasisSet, head_init: Layer, cfg, rng: SeededRng) -> tuple:
    """Pseudo-label generation on feature-space data.

    ``data.features`` are latent features of labeled and unlabeled rows;
    unlabeled rows carry UNLABELED.  Returns ``(EmState, pseudo_labels)``
    where the list holds one SoftPseudoLabel per unlabeled row, indexed by
    its position among the unlabeled rows.
    """
    x = data.features
    if x.shape[1] != init.d:
        raise ShapeError(f"features have {x.shape[1]} columns, basis dimension is {init.d}")
    truth = data.labels
    labeled_rows = np.flatnonzero(truth != UNLABELED)
    unlabeled_rows = np.flatnonzero(truth == UNLABELED)
    head = Layer(head_init.weight.copy(), head_init.bias.copy(), "identity")
    opt = Sgd(cfg.em_lr, cfg.momentum, cfg.weight_decay)
    basis = BasisSet(init.mu)
    reseed_rng = rng.split(0)
    state = EmState(basis, np.zeros((len(x), basis.k)), head, 0)

    for t in range(1, cfg.em_iters + 1):
        z = e_step(x, basis, cfg.temp)
        # one Gaussian block per iteration shared by all rows (common random numbers)
        noise = draw_noise(rng.split(t), cfg.mc_samples, basis.d, rows=len(x), shared_eps=True)
        table, index = latent_table(z, basis, noise.u, cfg.latent_mode)
        loss, gw, gb = head_loss_and_grad(table, index, noise.eps, head, truth, cfg.mix_weight)
        if cfg.em_lr > 0:
            opt.update([head.weight, head.bias], [gw, gb])
        basis, bad = _m_step_reseed(x, z, labeled_rows, reseed_rng)
        state.loss_curve.append(loss)
        if bad:
            state.reseeded.append({"iteration": t, "bases": bad})
        state.assignment = z
        state.iteration = t
    state.basis = basis

    xu = x[unlabeled_rows]
    if len(xu) == 0:
        return state, []
    zu = e_step(xu, basis, cfg.temp)
    noise = draw_row_noise(rng.split(cfg.em_iters + 1), range(len(xu)), cfg.mc_samples, basis.d)
    latents = latent_from_noise(zu, basis, noise, cfg.latent_mode)
    return state, pseudo_labels_from_latents(latents, head, range(len(xu)))
