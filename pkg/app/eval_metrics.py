"""
eval_metrics.py

Case-wise Fréchet distance over pluggable extractors and the downstream MIL classifier.

Main features:
- FrechetStats / fit_stats: Gaussian fit with an n-1 covariance and a 1e-6 ridge.
- frechet_distance: closed-form FD with the matrix square root taken by symmetric
  eigendecomposition (scipy.linalg.eigh).
- CaseSet / case_fd / dataset_case_fd: per-case FD between translated and reference
  patches, aggregated by mean (or median) over cases.
- MILModel: mean-pooled bag of patch embeddings followed by two fully connected layers.
- train_mil / predict_cases / evaluate_classification: k-fold (stratified, case-level)
  ensemble with out-of-fold scoring, macro one-vs-rest AUC and accuracy.
- metric_records / write_metric_records: JSON records {metric, extractor, case_id, value}.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold

from app.errors import ConfigError, NumericalFault, RejectedInputError
from app.embed_translate import FeatureExtractor, extract
from app.ldm_core import CLASS_LABELS, ImagePatch, make_generator, reset_parameters_

logger = logging.getLogger(__name__)

RIDGE = 1e-6
NEG_EIG_TOL = 1e-8


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, torch.Tensor):
        return embeddings.detach().cpu().double().numpy()
    if isinstance(embeddings, (list, tuple)):
        if not embeddings:
            return np.zeros((0, 0))
        rows = [e.detach().cpu().double().numpy() if isinstance(e, torch.Tensor) else np.asarray(e, dtype=np.float64)
                for e in embeddings]
        return np.stack(rows)
    return np.asarray(embeddings, dtype=np.float64)


def fit_stats(embeddings) -> FrechetStats:
    """
    Fit mean and covariance (denominator n-1) plus ``1e-6·I``.

    Raises:
        RejectedInputError: If fewer than two embeddings are given.
    """
    x = _as_matrix(embeddings)
    if x.ndim != 2 or x.shape[0] < 2:
        raise RejectedInputError(f"At least 2 embeddings are needed to fit statistics, got {x.shape[0] if x.ndim else 0}")
    if not np.isfinite(x).all():
        raise RejectedInputError("Embeddings contain non-finite values")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    cov = (cov + cov.T) / 2.0 + RIDGE * np.eye(x.shape[1])
    return FrechetStats(mean, cov)


def _clamped_eigvals(w: np.ndarray, stage: str) -> np.ndarray:
    # absolute cutoff: only round-off negatives in (-1e-8, 0) are clamped
    if np.any(w <= -NEG_EIG_TOL):
        raise NumericalFault(f"Significantly negative eigenvalue {w.min():.3e} in {stage}", stage=stage)
    return np.clip(w, 0.0, None)


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """
    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the symmetrized
    ``S_a^(1/2) S_b S_a^(1/2)``.

    Raises:
        RejectedInputError: On a dimension mismatch.
        NumericalFault: If an eigensolve fails or yields an eigenvalue at or below -1e-8.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise RejectedInputError(f"Dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    try:
        w, v = linalg.eigh(a.cov)
        sqrt_a = (v * np.sqrt(_clamped_eigvals(w, "fd_sqrt"))) @ v.T
        product = sqrt_a @ b.cov @ sqrt_a
        product = (product + product.T) / 2.0
        ev = _clamped_eigvals(linalg.eigvalsh(product), "fd_product")
    except linalg.LinAlgError as e:
        raise NumericalFault(f"Eigendecomposition did not converge: {e}", stage="fd") from e
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(ev).sum())
    return max(fd, 0.0)


@dataclass
class CaseSet:
    """Patches (ImagePatch) or embeddings of one case."""

    case_id: str
    class_label: str
    patches: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.patches) < 2:
            raise RejectedInputError(f"Case {self.case_id} needs at least 2 patches, got {len(self.patches)}")
        stray = {p.case_id for p in self.patches if isinstance(p, ImagePatch)} - {self.case_id}
        if stray:
            raise RejectedInputError(f"Case {self.case_id} holds patches of other cases: {sorted(stray)}")

    def embeddings(self, V: Optional[FeatureExtractor] = None) -> torch.Tensor:
        if isinstance(self.patches[0], ImagePatch):
            if V is None:
                raise RejectedInputError(f"Case {self.case_id} holds images; an extractor is required")
            return extract(torch.stack([p.tensor for p in self.patches]), V)
        return torch.stack([torch.as_tensor(p, dtype=torch.float32) for p in self.patches])


def case_fd(translated: CaseSet, reference: CaseSet, V: Optional[FeatureExtractor] = None) -> float:
    if translated.case_id != reference.case_id:
        raise RejectedInputError(f"Case mismatch: {translated.case_id} vs {reference.case_id}")
    return frechet_distance(fit_stats(translated.embeddings(V)), fit_stats(reference.embeddings(V)))


def dataset_case_fd(
    translated: Sequence[CaseSet],
    reference: Sequence[CaseSet],
    V: Optional[FeatureExtractor] = None,
    aggregation: str = "mean",
) -> Tuple[float, pd.DataFrame]:
    """
    CaseFD for every case present in both sets, aggregated over cases.

    Returns:
        tuple: (aggregate value, DataFrame with columns case_id, class, case_fd).
    """
    ref = {c.case_id: c for c in reference}
    rows = []
    for case in sorted(translated, key=lambda c: c.case_id):
        if case.case_id not in ref:
            raise RejectedInputError(f"Case {case.case_id} has no reference patches")
        rows.append({"case_id": case.case_id, "class": case.class_label, "case_fd": case_fd(case, ref[case.case_id], V)})
    if not rows:
        raise RejectedInputError("No cases to compare")
    table = pd.DataFrame(rows)
    if aggregation == "mean":
        value = float(table["case_fd"].mean())
    elif aggregation == "median":
        value = float(table["case_fd"].median())
    else:
        raise ConfigError(f"Unknown aggregation {aggregation!r}", "eval.aggregation")
    return value, table


# ---------------------------------------------------------------------------------
# MIL
# ---------------------------------------------------------------------------------


class MILModel(nn.Module):
    """Mean pooling over the bag, then two fully connected layers to 3 logits."""

    def __init__(
        self, dim: int, hidden: int = 64, n_classes: int = len(CLASS_LABELS), generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        self.head = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, n_classes))
        if generator is not None:
            reset_parameters_(self, generator)

    @staticmethod
    def pool(bag: torch.Tensor) -> torch.Tensor:
        # sorted per feature so the reduction order never depends on bag order
        return torch.sort(bag, dim=-2).values.mean(dim=-2)

    def forward(self, bag: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(bag))


@dataclass
class MILEnsemble:
    models: List[MILModel]
    folds: List[Tuple[List[str], List[str]]]
    case_to_fold: Dict[str, int]
    feature_mean: torch.Tensor
    feature_std: torch.Tensor

    def features(self, bag: torch.Tensor) -> torch.Tensor:
        return (bag - self.feature_mean) / self.feature_std


def _label_index(label: str) -> int:
    if label not in CLASS_LABELS:
        raise RejectedInputError(f"Unknown class label {label!r}")
    return CLASS_LABELS.index(label)


def train_mil(
    cases: Sequence[CaseSet],
    folds: int = 6,
    V: Optional[FeatureExtractor] = None,
    hidden: int = 64,
    epochs: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
) -> MILEnsemble:
    """
    Train one MILModel per fold of a case-level StratifiedKFold.

    Raises:
        ConfigError: If some class has fewer than ``folds`` cases.
    """
    labels = np.array([_label_index(c.class_label) for c in cases])
    counts = np.bincount(labels, minlength=len(CLASS_LABELS))
    if folds < 2 or counts.min() < folds:
        raise ConfigError(
            f"{folds}-fold cross-validation needs at least {folds} cases per class, got {counts.tolist()}",
            "eval.folds",
        )
    bags = [c.embeddings(V) for c in cases]
    all_patches = torch.cat(bags)
    mean, std = all_patches.mean(0), all_patches.std(0).clamp_min(1e-6)
    pooled = torch.stack([MILModel.pool((b - mean) / std) for b in bags])
    y = torch.as_tensor(labels, dtype=torch.long)
    ids = [c.case_id for c in cases]

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    models, fold_ids, case_to_fold = [], [], {}
    for k, (train_idx, test_idx) in enumerate(splitter.split(np.zeros(len(cases)), labels)):
        model = MILModel(pooled.shape[1], hidden, generator=make_generator(seed + k))
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        tr = torch.as_tensor(train_idx)
        for _ in range(epochs):
            loss = F.cross_entropy(model.head(pooled[tr]), y[tr])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        models.append(model)
        fold_ids.append(([ids[i] for i in train_idx], [ids[i] for i in test_idx]))
        case_to_fold.update({ids[i]: k for i in test_idx})
        logger.debug("stage=mil fold=%d train=%d test=%d loss=%.4f", k, len(train_idx), len(test_idx), loss.item())
    return MILEnsemble(models, fold_ids, case_to_fold, mean, std)


@torch.no_grad()
def predict_cases(
    ensemble: MILEnsemble, cases: Sequence[CaseSet], V: Optional[FeatureExtractor] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Score each case with the fold model that held it out (mean softmax of all folds for unknown cases).

    Returns:
        tuple: (labels as class indices, n×3 softmax scores).
    """
    labels, scores = [], []
    for case in cases:
        bag = ensemble.features(case.embeddings(V))
        fold = ensemble.case_to_fold.get(case.case_id)
        if fold is None:
            probs = torch.stack([F.softmax(m(bag), dim=-1) for m in ensemble.models]).mean(0)
        else:
            probs = F.softmax(ensemble.models[fold](bag), dim=-1)
        labels.append(_label_index(case.class_label))
        scores.append(probs.numpy())
    return np.array(labels), np.stack(scores)


def classification_metrics(labels: np.ndarray, scores: np.ndarray) -> Dict[str, float]:
    """
    Macro one-vs-rest AUC over the three classes and sample-wise accuracy.

    Raises:
        RejectedInputError: If some class is absent from ``labels`` (its AUC is undefined).
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    absent = [CLASS_LABELS[k] for k in range(len(CLASS_LABELS)) if not np.any(labels == k)]
    if absent:
        raise RejectedInputError(f"AUC is undefined: classes {absent} are absent from the evaluation set")
    aucs = [roc_auc_score(labels == k, scores[:, k]) for k in range(len(CLASS_LABELS))]
    return {
        "macro_auc": float(np.mean(aucs)),
        "accuracy": float(np.mean(scores.argmax(axis=1) == labels)),
    }


def evaluate_classification(
    ensemble: MILEnsemble, cases: Sequence[CaseSet], V: Optional[FeatureExtractor] = None
) -> Dict[str, float]:
    """
    Pooled out-of-fold metrics plus their standard deviation across folds.

    Folds whose evaluated cases do not cover every class are left out of the deviation.
    """
    labels, scores = predict_cases(ensemble, cases, V)
    result = classification_metrics(labels, scores)
    per_fold = []
    folds = np.array([ensemble.case_to_fold.get(c.case_id, -1) for c in cases])
    for k in sorted(set(folds.tolist()) - {-1}):
        sel = folds == k
        if len(set(labels[sel].tolist())) == len(CLASS_LABELS):
            per_fold.append(classification_metrics(labels[sel], scores[sel]))
    result["auc_std"] = float(np.std([m["macro_auc"] for m in per_fold])) if per_fold else float("nan")
    result["accuracy_std"] = float(np.std([m["accuracy"] for m in per_fold])) if per_fold else float("nan")
    result["n_cases"] = len(cases)
    result["n_folds_scored"] = len(per_fold)
    return result


def metric_records(
    classification: Optional[Dict[str, float]] = None,
    case_table: Optional[pd.DataFrame] = None,
    extractor: str = "",
) -> List[dict]:
    """Flatten results into ``{metric, extractor, case_id, value}`` records."""
    records = []
    for metric, value in (classification or {}).items():
        records.append({"metric": metric, "extractor": extractor, "case_id": "", "value": float(value)})
    if case_table is not None:
        for case_id, value in zip(case_table["case_id"], case_table["case_fd"]):
            records.append({"metric": "case_fd", "extractor": extractor, "case_id": case_id, "value": float(value)})
    return records


def write_metric_records(records: Sequence[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(records), columns=["metric", "extractor", "case_id", "value"]).to_json(
        path, orient="records", lines=True
    )
    return path
