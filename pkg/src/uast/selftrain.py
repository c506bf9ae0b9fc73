"""Self-training rounds: pseudo-label generation, selection, weighted retraining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSet, Stage1Report, extract_basis, train_stage1
from .config import RoundConfig
from .data import DomainData
from .em import EmState, SoftPseudoLabel, run_em
from .errors import NumericError, ParameterError, ShapeError
from .model import UNLABELED, Dataset, Layer, MlpModel, NllLoss, Sgd, backward, evaluate, forward
from .numerics import SeededRng

log = logging.getLogger(__name__)


@dataclass
class KeptSample:
    index: int
    hard_label: int
    weight: float
    predicted_class: int
    score: float


@dataclass
class SelectionResult:
    kept: list
    discarded: list
    keep_fraction_used: dict
    policy: str = "variance"
    # per unlabeled index: (predicted class, ranking score)
    scores: dict = field(default_factory=dict)

    @property
    def kept_indices(self) -> list:
        return [k.index for k in self.kept]

    def kept_count_per_class(self, n_classes: int) -> list:
        counts = [0] * n_classes
        for k in self.kept:
            counts[k.predicted_class] += 1
        return counts

    def dump_records(self) -> list:
        """One JSON-ready record per unlabeled sample, ascending index."""
        kept = {k.index: k for k in self.kept}
        records = []
        for idx in sorted(self.scores):
            cls, score = self.scores[idx]
            rec = {"index": idx, "predicted_class": cls, "score": score, "kept": idx in kept}
            if idx in kept:
                rec["hard_label"] = kept[idx].hard_label
                rec["weight"] = kept[idx].weight
            records.append(rec)
        return records


def _keep_count(fraction: float, size: int) -> int:
    return min(size, math.ceil(fraction * size - 1e-9))


def select_samples(
    labels: Sequence[SoftPseudoLabel],
    keep_fraction: float,
    rng: SeededRng,
    policy: str = "variance",
    hard_label: str = "sample",
    var_floor: float = 1e-6,
) -> SelectionResult:
    """Class-dependent selection of pseudo-labeled samples.

    Samples are grouped by the argmax of their mean prediction.  Inside a
    group the ``ceil(keep_fraction * size)`` best-ranked samples are kept:
    lowest uncertainty for ``variance``, highest mean confidence for
    ``confidence``; ``none`` keeps nothing.  Hard labels are drawn from the
    mean distribution (or taken as its argmax), and each kept sample gets
    weight ``1 / max(uncertainty, var_floor)`` under ``variance`` and 1
    otherwise.
    """
    if not labels:
        raise ParameterError("select_samples needs at least one pseudo-label")
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    n_classes = len(labels[0].mean)
    groups = {c: [] for c in range(n_classes)}
    scores = {}
    for pl in labels:
        c = pl.predicted_class
        score = pl.uncertainty if policy == "variance" else pl.confidence
        groups[c].append(pl)
        scores[int(pl.index)] = (c, float(score))

    kept, discarded, used = [], [], {}
    for c in range(n_classes):
        group = groups[c]
        if not group:
            log.info("no pseudo-labels predicted for class %d; group skipped", c)
            continue
        if policy == "variance":
            ranked = sorted(group, key=lambda pl: (pl.uncertainty, pl.index))
        else:
            ranked = sorted(group, key=lambda pl: (-pl.confidence, pl.index))
        n_keep = 0 if policy == "none" else _keep_count(keep_fraction, len(ranked))
        used[c] = n_keep / len(ranked)
        for pl in ranked[:n_keep]:
            if hard_label == "sample":
                y = int(rng.categorical(pl.mean))
            else:
                y = pl.predicted_class
            w = 1.0 / max(pl.uncertainty, var_floor) if policy == "variance" else 1.0
            kept.append(KeptSample(int(pl.index), y, w, c, scores[int(pl.index)][1]))
        discarded.extend(int(pl.index) for pl in ranked[n_keep:])
    return SelectionResult(kept, sorted(discarded), used, policy, scores)


def normalized_weights(selected: SelectionResult) -> np.ndarray:
    """Pseudo-label weights rescaled to mean 1 over the selected set."""
    w = np.array([k.weight for k in selected.kept], dtype=np.float64)
    if w.size == 0:
        return w
    return w / np.mean(w)


def retrain(
    model: MlpModel,
    labeled: Dataset,
    selected: SelectionResult,
    unlabeled_x,
    cfg: RoundConfig,
    rng: SeededRng,
) -> tuple:
    """Weighted SGD on labeled rows plus kept pseudo-labeled rows.

    Labeled rows have weight 1.  Returns ``(model, per-epoch mean loss)``;
    the model is updated in place.
    """
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    idx = np.array(selected.kept_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(unlabeled_x)):
        raise ShapeError("selected indices fall outside the unlabeled set")
    x = np.vstack([labeled.features, unlabeled_x[idx]]) if idx.size else labeled.features
    y = np.concatenate([labeled.labels, [k.hard_label for k in selected.kept]]).astype(np.int64)
    w = np.concatenate([np.ones(len(labeled)), normalized_weights(selected)])

    opt = Sgd(cfg.lr, cfg.momentum, cfg.weight_decay)
    curve = []
    n = len(y)
    for epoch in range(cfg.retrain_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            grads = backward(model, x[b], NllLoss(y[b], w[b]))
            if not math.isfinite(grads.loss):
                raise NumericError(f"non-finite retraining loss in epoch {epoch}")
            opt.update(model.params(), grads.arrays())
            total += grads.loss * len(b)
        curve.append(total / n)
    return model, curve


@dataclass
class RoundResult:
    model: MlpModel
    basis: Optional[BasisSet]
    metrics: dict
    pseudo_labels: list
    selection: Optional[SelectionResult]
    em_state: Optional[EmState] = None


def _mean_or_none(values) -> Optional[float]:
    values = list(values)
    return float(np.mean(values)) if values else None


def _accuracy_fields(model: MlpModel, data: DomainData) -> dict:
    out = {"source_accuracy": evaluate(model, data.labeled)["mean_class_accuracy"]}
    out["target_accuracy"] = None if data.test is None else evaluate(model, data.test)["mean_class_accuracy"]
    return out


def run_round(
    model: MlpModel,
    basis: Optional[BasisSet],
    data: DomainData,
    cfg: RoundConfig,
    rng: SeededRng,
    round_index: int = 0,
) -> RoundResult:
    """EM pseudo-labels, selection and retraining for one round (0-based index)."""
    c = data.class_count
    model = model.copy()
    fraction = cfg.keep_fraction(round_index)
    pseudo, selection, state = [], None, None
    xu = data.unlabeled.features

    if cfg.selection != "none" and len(xu):
        feats_l, _ = forward(model, data.labeled.features)
        feats_u, _ = forward(model, xu)
        em_data = Dataset(
            np.vstack([feats_l, feats_u]),
            np.concatenate([data.labeled.labels, np.full(len(xu), UNLABELED)]),
            c,
        )
        state, pseudo = run_em(em_data, basis, model.head, cfg, rng.split(1))
        model.layers[-1] = Layer(state.head.weight.copy(), state.head.bias.copy(), model.head.activation)
        selection = select_samples(
            pseudo, fraction, rng.split(2), cfg.selection, cfg.hard_label, cfg.var_floor
        )
    if selection is None:
        selection = SelectionResult([], list(range(len(xu))), {}, "none", {})

    model, curve = retrain(model, data.labeled, selection, xu, cfg, rng.split(3))

    unc = {pl.index: pl.uncertainty for pl in pseudo}
    kept = selection.kept_indices
    metrics = {
        "round": round_index + 1,
        "keep_fraction": fraction,
        "selection_policy": cfg.selection,
        "kept_count": len(kept),
        "discarded_count": len(selection.discarded),
        "kept_count_per_class": selection.kept_count_per_class(c),
        "mean_uncertainty_kept": _mean_or_none(unc[i] for i in kept) if unc else None,
        "mean_uncertainty_discarded": _mean_or_none(unc[i] for i in selection.discarded) if unc else None,
        "em_loss_curve": [] if state is None else list(state.loss_curve),
        "loss_curve": curve,
        **_accuracy_fields(model, data),
    }
    return RoundResult(model, None if state is None else state.basis, metrics, pseudo, selection, state)


@dataclass
class SelfTrainingResult:
    model: MlpModel
    stage1: Stage1Report
    rounds: list
    metrics: list
    stage1_basis: Optional[BasisSet] = None


def run_self_training(data: DomainData, cfg: RoundConfig, rng: SeededRng) -> SelfTrainingResult:
    """Stage-1 training followed by ``cfg.rounds`` self-training rounds.

    From the second round on, the basis is re-extracted from the current
    model's ATT block and its features on the labeled rows.
    """
    model, basis, report = train_stage1(data.labeled, cfg, rng.split(0))
    stage1_basis = basis
    metrics = [{
        "round": 0,
        "stage": "stage1",
        "att_residual_init": report.att_residual_init,
        "att_residual_trained": report.att_residual_trained,
        "basis_residual": report.basis_residual,
        "loss_curve": report.loss_curve,
        **_accuracy_fields(model, data),
    }]
    rounds = []
    for r in range(cfg.rounds):
        if r > 0 and cfg.selection != "none":
            basis = extract_basis(model, data.labeled, cfg).basis
        result = run_round(model, basis, data, cfg, rng.split(100 + r), r)
        log.info("round %d: target accuracy %s, kept %d", r + 1,
                 result.metrics["target_accuracy"], result.metrics["kept_count"])
        rounds.append(result)
        metrics.append(result.metrics)
        model = result.model
    return SelfTrainingResult(model, report, rounds, metrics, stage1_basis)
