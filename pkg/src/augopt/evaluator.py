"""Frozen-feature evaluation: feature extraction, a linear probe, and AUC.

The probe protocol is fixed so strategies stay comparable: encoder features
on the evaluation pool, three seeded half/half splits, on each split one
dense layer plus sigmoid trained by full-batch Adam on cross-entropy (lr
1e-3, 200 steps), scored by AUC on the held-out half.  Features are
standardized with the training half's statistics, an affine map that keeps
the probe linear.

`roc_auc` ranks with midranks, so tied scores count half; this matches the
all-pairs definition (concordant + 0.5 * tied) / (positives * negatives)
exactly, not approximately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Encoder, ParameterStore, load_checkpoint, restore_stores
from .objectives import bce
from .tensor import Rng, Tensor, dense, no_grad
from .trainer import Adam

__all__ = [
    "roc_auc",
    "extract_features",
    "encoder_from_checkpoint",
    "EvalReport",
    "linear_eval",
]


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via midranks; exact under ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-d")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def extract_features(encoder: Encoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Encoder features [N, D] with the projection head and classifier
    removed; runs without a graph."""
    dt = encoder.store.tensors()[0].data.dtype
    x = np.asarray(images, dtype=dt)
    outs = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            outs.append(encoder.forward(Tensor(x[lo:lo + batch_size])).data)
    return np.concatenate(outs, axis=0).astype(np.float64)


def encoder_from_checkpoint(path) -> Encoder:
    """Rebuild the encoder stored in a checkpoint, inferring block widths
    from the saved tensor shapes; weights load in float64."""
    entries = load_checkpoint(path)
    widths = []
    while f"encoder.block{len(widths) + 1}.conv1.w" in entries:
        widths.append(entries[f"encoder.block{len(widths) + 1}.conv1.w"].shape[0])
    if not widths:
        raise ValueError(f"{path} holds no encoder tensors")
    in_ch = entries["encoder.block1.conv1.w"].shape[1]
    enc = Encoder(in_channels=in_ch, widths=tuple(widths), dtype=np.float64)
    restore_stores(entries, {"encoder": enc.store})
    return enc


@dataclass(frozen=True)
class EvalReport:
    auc_mean: float
    auc_std: float
    aucs: tuple

    def csv_row(self, epoch: int) -> str:
        return f"{epoch},{self.auc_mean:.9g},{self.auc_std:.9g}"


def linear_eval(features: np.ndarray, labels: np.ndarray, rng: Rng,
                splits: int = 3, lr: float = 1e-3, steps: int = 200) -> EvalReport:
    """Linear probe protocol (see module docstring); reports the per-split
    AUCs plus their mean and population standard deviation."""
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != y.shape[0]:
        raise ValueError(f"features {feats.shape} and labels {y.shape} do not align")
    n = feats.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 samples, got {n}")

    aucs = []
    for _ in range(splits):
        perm = rng.permutation(n)
        half = n // 2
        tr, te = perm[:half], perm[half:]
        mu = feats[tr].mean(axis=0)
        sd = np.maximum(feats[tr].std(axis=0), 1e-6)
        ftr = (feats[tr] - mu) / sd
        fte = (feats[te] - mu) / sd

        store = ParameterStore()
        w = store.add("w", np.zeros((1, feats.shape[1])))
        b = store.add("b", np.zeros(1))
        opt = Adam(store, lr)
        xt = Tensor(ftr)
        yt = Tensor(y[tr])
        for _ in range(steps):
            pred = dense(xt, w, b).reshape(half).sigmoid()
            loss = bce(pred, yt)
            store.zero_grad()
            loss.backward()
            opt.step()
        with no_grad():
            scores = dense(Tensor(fte), w, b).reshape(n - half).sigmoid().data
        aucs.append(roc_auc(scores, y[te]))
    arr = np.array(aucs)
    return EvalReport(float(arr.mean()), float(arr.std()), tuple(arr.tolist()))
