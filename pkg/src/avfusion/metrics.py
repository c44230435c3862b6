"""Concordance correlation coefficient as evaluation metric and training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class EvalSummary:
    ccc_valence: float
    ccc_arousal: float
    n_frames: int

    def mean_ccc(self) -> float:
        return 0.5 * (self.ccc_valence + self.ccc_arousal)


def ccc(x, y) -> float:
    """Lin's concordance between two equal-length sequences, biased moments.

    Returns 0 when the denominator vanishes (both sequences constant with
    equal means): a constant predictor conveys no concordance.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"ccc: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError(f"ccc: need at least 2 samples, got {x.size}")
    mx, my = np.mean(x), np.mean(y)
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    sxy = np.mean((x - mx) * (y - my))
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * sxy / denom)


def _ccc_column(pred: ad.Tensor, gold: ad.Tensor, col: int) -> ad.Tensor:
    x = ad.slice_cols(pred, col, col + 1)
    y = ad.slice_cols(gold, col, col + 1)
    mx, my = ad.tmean(x), ad.tmean(y)
    sxy = ad.sub(ad.tmean(ad.mul(x, y)), ad.mul(mx, my))
    sxx = ad.sub(ad.tmean(ad.mul(x, x)), ad.mul(mx, mx))
    syy = ad.sub(ad.tmean(ad.mul(y, y)), ad.mul(my, my))
    gap = ad.sub(mx, my)
    denom = ad.add(ad.add(sxx, syy), ad.mul(gap, gap))
    return ad.div(ad.scale(sxy, 2.0), denom)


def ccc_loss(pred: ad.Tensor, gold: ad.Tensor) -> ad.Tensor:
    """1 - (CCC_valence + CCC_arousal)/2 over all frames, as a recorded graph."""
    if not isinstance(gold, ad.Tensor):
        gold = ad.Tensor(gold)
    if pred.data.ndim != 2 or pred.data.shape[1] != 2 or pred.data.shape != gold.data.shape:
        raise ad.ShapeError(f"ccc_loss: expected matching [N x 2] tensors, got "
                            f"{pred.data.shape} vs {gold.data.shape}")
    if pred.data.shape[0] < 2:
        raise ValueError("ccc_loss: need at least 2 frames")
    both = ad.add(_ccc_column(pred, gold, 0), _ccc_column(pred, gold, 1))
    return ad.sub(ad.Tensor(1.0), ad.scale(both, 0.5))


def eval_summary(predictions, labels) -> EvalSummary:
    """Single CCC per attribute over the concatenation of all scored frames."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape or predictions.ndim != 2 or predictions.shape[1] != 2:
        raise ValueError(f"eval_summary: frame count mismatch, predictions "
                         f"{predictions.shape} vs labels {labels.shape}")
    return EvalSummary(
        ccc_valence=ccc(predictions[:, 0], labels[:, 0]),
        ccc_arousal=ccc(predictions[:, 1], labels[:, 1]),
        n_frames=predictions.shape[0],
    )
