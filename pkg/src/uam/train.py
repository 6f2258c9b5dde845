"""Optimizer, training loop, and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .autodiff import Tensor, no_grad
from .data import Dataset, DataError


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    eval_every: int = 0  # 0 = no mid-training evaluation


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay.

    The decay term is applied directly to the parameters (p -= lr*wd*p),
    never through the gradient.
    """

    def __init__(
        self,
        named_params,
        learning_rate: float = 1e-4,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(named_params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.learning_rate * update
            if self.weight_decay:
                p.data -= self.learning_rate * self.weight_decay * p.data


def optimizer_step(optimizer: AdamW) -> None:
    optimizer.step()


def train_epoch(
    model: M.ClassifierModel,
    tokens: np.ndarray,
    labels: np.ndarray,
    optimizer: AdamW,
    config: TrainConfig,
    epoch: int,
) -> list:
    """One pass over the data with a deterministic (seed, epoch) shuffle.

    Returns the per-batch losses.
    """
    order = np.random.default_rng([config.seed, epoch]).permutation(len(labels))
    losses = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        optimizer.zero_grad()
        logits, aux = M.forward_classify(model, tokens[idx])
        loss = M.cross_entropy_loss(logits, labels[idx], aux)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return losses


def train_classifier(
    model: M.ClassifierModel,
    tokens: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    stop_at_train_accuracy: float | None = None,
):
    """Full training run; returns (losses, epochs_run).

    With ``stop_at_train_accuracy`` set, training stops at the end of the
    first epoch whose post-step train accuracy reaches the target.
    """
    optimizer = AdamW(
        M.named_parameters(model),
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    losses = []
    for epoch in range(config.epochs):
        losses.extend(train_epoch(model, tokens, labels, optimizer, config, epoch))
        if stop_at_train_accuracy is not None:
            if accuracy_of(model, tokens, labels, config.batch_size) >= stop_at_train_accuracy:
                return losses, epoch + 1
    return losses, config.epochs


def predict_logits(model: M.ClassifierModel, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(tokens), batch_size):
            logits, _ = M.forward_classify(model, tokens[start : start + batch_size])
            outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def accuracy_of(model, tokens, labels, batch_size: int = 256) -> float:
    logits = predict_logits(model, tokens, batch_size)
    return float((logits.argmax(axis=-1) == labels).mean())


# -- metrics -------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    f1_mode: str                      # "binary" (tumor positive) or "macro"
    auc: float | None
    auc_mode: str
    confusion: np.ndarray             # [k, k], rows = true class
    per_class: list = field(default_factory=list)  # (name, precision, recall, f1, support)
    aux_auc: dict = field(default_factory=dict)    # e.g. tumor-vs-rest for multiclass
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"accuracy: {self.accuracy:.4f}",
            f"f1 ({self.f1_mode}): {self.f1:.4f}",
            f"auc ({self.auc_mode}): " + (f"{self.auc:.4f}" if self.auc is not None else "absent"),
        ]
        for key, value in self.aux_auc.items():
            lines.append(f"auc ({key}): {value:.4f}")
        lines.append("per-class precision/recall/f1/support:")
        for name, p, r, f1, support in self.per_class:
            lines.append(f"  {name}: {p:.4f} {r:.4f} {f1:.4f} {support}")
        lines.append("confusion (rows = true):")
        for row in self.confusion:
            lines.append("  " + " ".join(str(int(v)) for v in row))
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)

    @staticmethod
    def csv_header() -> str:
        return "accuracy,f1,f1_mode,auc,auc_mode"

    def csv_row(self) -> str:
        auc = "" if self.auc is None else "%.6f" % self.auc
        return f"{self.accuracy:.6f},{self.f1:.6f},{self.f1_mode},{auc},{self.auc_mode}"


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted 0.5, exact vs pair enumeration.

    Raises DataError when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc undefined: only one class present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _prf(tp: int, fp: int, fn: int) -> tuple:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def compute_metrics(
    logits: np.ndarray, labels: np.ndarray, label_names: list
) -> MetricsReport:
    """Accuracy, F1 (binary with tumor positive, else macro), AUC, confusion.

    AUC is the rank statistic for two classes and the unweighted mean of
    one-vs-rest AUCs otherwise; a class absent from the labels is skipped
    with a note, and fully single-class inputs report AUC as absent.
    """
    k = len(label_names)
    preds = logits.argmax(axis=-1)
    accuracy = float((preds == labels).mean())
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1

    per_class = []
    for c in range(k):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        p, r, f1 = _prf(tp, fp, fn)
        per_class.append((label_names[c], p, r, f1, int(confusion[c, :].sum())))

    notes = []
    # softmax probabilities for ranking
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    lowered = [str(n).lower() for n in label_names]
    positive = lowered.index("tumor") if "tumor" in lowered else k - 1
    if k == 2:
        f1_mode = "binary"
        f1 = per_class[positive][3]
        auc_mode = "binary"
        try:
            auc = roc_auc(probs[:, positive], labels == positive)
        except DataError as exc:
            auc = None
            notes.append(str(exc))
    else:
        f1_mode = "macro"
        f1 = float(np.mean([pc[3] for pc in per_class]))
        auc_mode = "macro-ovr"
        parts = []
        for c in range(k):
            try:
                parts.append(roc_auc(probs[:, c], labels == c))
            except DataError:
                notes.append(f"class {label_names[c]} absent; skipped in macro AUC")
        auc = float(np.mean(parts)) if parts else None
        if auc is None:
            notes.append("macro AUC absent: no class had both positives and negatives")

    report = MetricsReport(
        accuracy=accuracy,
        f1=f1,
        f1_mode=f1_mode,
        auc=auc,
        auc_mode=auc_mode,
        confusion=confusion,
        per_class=per_class,
        notes=notes,
    )
    if k > 2 and "tumor" in lowered:
        c = lowered.index("tumor")
        try:
            report.aux_auc["tumor-vs-rest"] = roc_auc(probs[:, c], labels == c)
        except DataError as exc:
            report.notes.append(f"tumor-vs-rest AUC absent: {exc}")
    return report


def evaluate(model: M.ClassifierModel, tokens: np.ndarray, labels: np.ndarray, label_names: list) -> MetricsReport:
    """Metrics for a frozen model on a tokenized dataset."""
    return compute_metrics(predict_logits(model, tokens), labels, label_names)
