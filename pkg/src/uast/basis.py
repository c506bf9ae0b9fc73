"""Stage-1 basis extraction.

The classifier is trained together with an ATT block ``W`` (K x d) whose
only loss is ``||W W^T - I||_F``.  Its rows then seed a gradient-descent
solve of the semi-supervised basis problem

    ||X - Z mu||_F + ||Z Z^T - Y Y^T||_F + ||mu^T mu - I||_F,   Z = X mu^T

on the labeled features, and the result initializes EM.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Dataset, MlpModel, NllLoss, Sgd, backward, forward, init_mlp
from .numerics import SeededRng, frobenius_norm, matmul, orthogonality_residual

log = logging.getLogger(__name__)

_ZERO_NORM = 1e-12
_CANCEL_TOL = 1e-14


@dataclass
class BasisSet:
    """K basis means in feature space; every covariance is the identity and never stored."""

    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        if self.mu.ndim != 2:
            raise ShapeError(f"basis matrix must be 2-D, got {self.mu.shape}")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("basis contains non-finite values")

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    @property
    def sigma_is_identity(self) -> bool:
        return True

    def min_pairwise_distance(self) -> float:
        if self.k < 2:
            return math.inf
        diff = self.mu[:, None, :] - self.mu[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        return float(dist[np.triu_indices(self.k, 1)].min())

    def to_dict(self) -> dict:
        return {"k": self.k, "d": self.d, "mu": self.mu.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "BasisSet":
        return cls(np.asarray(doc["mu"], dtype=np.float64).reshape(doc["k"], doc["d"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "BasisSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BasisObjectiveReport:
    reconstruction: float
    label_gram: float
    ortho: float
    total: float


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def att_project(x, basis: BasisSet) -> np.ndarray:
    """Coefficients ``Z = X mu^T`` (N x K)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != basis.d:
        raise ShapeError(f"features have shape {x.shape}, basis dimension is {basis.d}")
    return matmul(x, basis.mu.T)


def reconstruct(z, basis: BasisSet) -> np.ndarray:
    """Map coefficients back to feature space: ``Z mu`` (N x d)."""
    return matmul(np.asarray(z, dtype=np.float64), basis.mu)


def _check_objective_inputs(x, y, basis):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"features {x.shape} and one-hot labels {y.shape} disagree")
    if x.shape[1] != basis.d:
        raise ShapeError(f"features have {x.shape[1]} columns, basis dimension is {basis.d}")
    return x, y


def basis_objective(x, labels_onehot, basis: BasisSet, weights=(1.0, 1.0, 1.0)) -> BasisObjectiveReport:
    x, y = _check_objective_inputs(x, labels_onehot, basis)
    z = att_project(x, basis)
    rec = frobenius_norm(x - reconstruct(z, basis))
    gram = frobenius_norm(matmul(z, z.T) - matmul(y, y.T))
    ortho = frobenius_norm(matmul(basis.mu.T, basis.mu) - np.eye(basis.d))
    total = weights[0] * rec + weights[1] * gram + weights[2] * ortho
    return BasisObjectiveReport(rec, gram, ortho, total)


@dataclass
class BasisMoments:
    """Second moments that determine the basis objective and its gradient."""

    xtx: np.ndarray  # d x d
    ytx: np.ndarray  # C x d
    yty: np.ndarray  # C x C


def basis_moments(x, labels_onehot) -> BasisMoments:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels_onehot, dtype=np.float64)
    return BasisMoments(matmul(x.T, x), matmul(y.T, x), matmul(y.T, y))


def _norm_from_square(sq: float, scale: float) -> float:
    """sqrt of a squared norm obtained by expansion; tiny values (cancellation noise) become 0."""
    if sq <= _CANCEL_TOL * max(scale, 1.0):
        return 0.0
    return math.sqrt(sq)


def objective_grad_from_moments(mom: BasisMoments, mu, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Gradient of the weighted basis objective using only d x d and C x d moments.

    With P = mu^T mu and S = X^T X:
      reconstruction  d||X(I-P)|| = -mu (T + T^T) / ||R||,  T = S (I-P)
      label gram      d||ZZ^T-YY^T|| = 2 (Z^T Z mu S - (Y^T Z)^T Y^T X) / ||G||
      ortho           d||P-I|| = 2 mu (P-I) / ||P-I||
    A norm term that is zero contributes the zero subgradient.
    """
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.shape[1]
    s = mom.xtx
    p = matmul(mu.T, mu)
    grad = np.zeros_like(mu)

    if weights[0]:
        i_p = np.eye(d) - p
        t = matmul(s, i_p)
        rn = _norm_from_square(float(np.sum(i_p * t)), float(np.trace(s)))
        if rn > 0:
            grad -= weights[0] * matmul(mu, t + t.T) / rn

    if weights[1]:
        mu_s = matmul(mu, s)  # Z^T X
        ztz = matmul(mu_s, mu.T)
        ytz = matmul(mom.ytx, mu.T)
        big = float(np.sum(ztz * ztz) + np.sum(mom.yty * mom.yty))
        gn = _norm_from_square(big - 2.0 * float(np.sum(ytz * ytz)), big)
        if gn > 0:
            grad += weights[1] * 2.0 * (matmul(ztz, mu_s) - matmul(ytz.T, mom.ytx)) / gn

    if weights[2]:
        o = p - np.eye(d)
        on = frobenius_norm(o)
        if on > _ZERO_NORM:
            grad += weights[2] * 2.0 * matmul(mu, o) / on
    return grad


def basis_objective_grad(x, labels_onehot, basis: BasisSet, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Analytic gradient of the weighted objective with respect to ``mu``."""
    x, y = _check_objective_inputs(x, labels_onehot, basis)
    return objective_grad_from_moments(basis_moments(x, y), basis.mu, weights)


def ortho_penalty_grad(w) -> np.ndarray:
    """Gradient of ``||W W^T - I||_F`` with respect to W (zero at the optimum)."""
    w = np.asarray(w, dtype=np.float64)
    a = matmul(w, w.T) - np.eye(w.shape[0])
    n = frobenius_norm(a)
    if n <= _ZERO_NORM:
        return np.zeros_like(w)
    return 2.0 * matmul(a, w) / n


def basis_inputs(features, labels, n_classes: int) -> tuple:
    """Scale features and one-hot labels for the basis problem.

    Rows are normalized to unit length and both matrices are divided by
    sqrt(N), so every term is a per-sample quantity and the Gram targets
    (1 within a class, 0 across) are reachable by an orthonormal basis.
    """
    x = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    x = x / np.maximum(norms, 1e-12)
    scale = 1.0 / math.sqrt(len(x))
    return x * scale, one_hot(labels, n_classes) * scale


@dataclass
class RefineResult:
    basis: BasisSet
    steps: int
    grad_norm: float


def refine_basis(
    x,
    labels_onehot,
    init: BasisSet,
    steps: int = 500,
    lr: float = 1e-2,
    tol: float = 1e-6,
    weights=(1.0, 1.0, 1.0),
) -> RefineResult:
    """Plain gradient descent on the basis objective, stopping early on a small gradient."""
    x, y = _check_objective_inputs(x, labels_onehot, init)
    mom = basis_moments(x, y)
    mu = init.mu.copy()
    gnorm = math.inf
    done = 0
    for done in range(1, steps + 1):
        g = objective_grad_from_moments(mom, mu, weights)
        gnorm = frobenius_norm(g)
        if gnorm < tol:
            done -= 1
            break
        mu -= lr * g
    return RefineResult(BasisSet(mu), done, gnorm)


@dataclass
class Stage1Report:
    att_residual_init: float
    att_residual_trained: float
    basis_residual: float
    refine_steps: int
    loss_curve: list = field(default_factory=list)


def _check_stage1_data(labeled: Dataset, n_bases: int) -> None:
    c = labeled.class_count
    if n_bases < c:
        raise ConfigError(f"need at least one basis per class: K={n_bases} < C={c}")
    present = set(np.unique(labeled.labels).tolist())
    missing = sorted(set(range(c)) - present)
    if missing:
        raise ConfigError(f"classes {missing} have no labeled rows")
    if len(labeled) < n_bases:
        raise ConfigError(f"{len(labeled)} labeled rows but K={n_bases} bases")


def extract_basis(model: MlpModel, labeled: Dataset, cfg) -> RefineResult:
    """Refine the model's ATT block against its features on the labeled rows."""
    feats, _ = forward(model, labeled.features)
    x, y = basis_inputs(feats, labeled.labels, labeled.class_count)
    return refine_basis(
        x, y, BasisSet(model.att),
        steps=cfg.stage1_refine_steps,
        lr=cfg.refine_lr,
        tol=cfg.refine_tol,
        weights=tuple(cfg.objective_weights),
    )


def train_stage1(data: Dataset, cfg, rng: SeededRng, model: Optional[MlpModel] = None):
    """Train classifier + ATT block on the labeled rows, then refine the basis.

    Returns ``(model, basis, report)``.
    """
    labeled = data.labeled()
    c = data.class_count
    k = cfg.bases_for(c)
    _check_stage1_data(labeled, k)
    if model is None:
        model = init_mlp(data.features.shape[1], c, rng.split(1), hidden=cfg.hidden, att_rows=k)
    init_residual = orthogonality_residual(model.att)

    opt = Sgd(cfg.stage1_lr, cfg.momentum, cfg.weight_decay)
    att_opt = Sgd(cfg.stage1_lr, cfg.momentum, 0.0)
    order_rng = rng.split(2)
    curve = []
    n = len(labeled)
    for _ in range(cfg.stage1_epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grads = backward(model, labeled.features[idx], NllLoss(labeled.labels[idx]))
            opt.update(model.params(), grads.arrays())
            att_opt.update([model.att], [ortho_penalty_grad(model.att)])
            total += grads.loss * len(idx)
        curve.append(total / n + orthogonality_residual(model.att))
    trained_residual = orthogonality_residual(model.att)

    refined = extract_basis(model, labeled, cfg)
    report = Stage1Report(
        att_residual_init=init_residual,
        att_residual_trained=trained_residual,
        basis_residual=orthogonality_residual(refined.basis.mu),
        refine_steps=refined.steps,
        loss_curve=curve,
    )
    log.info(
        "stage 1: ATT residual %.4g -> %.4g, refined basis residual %.4g after %d steps",
        init_residual, trained_residual, report.basis_residual, refined.steps,
    )
    return model, refined.basis, report
