"""Linear centered kernel alignment between layer activations of two models.

Computed in Gram form on column-centered features, which for activation
matrices (n_samples x features, features >> n) is the cheap equivalent of the
HSIC-normalized definition:

    CKA(X, Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)

Linear CKA is invariant to isotropic scaling and orthogonal transforms of
either representation, and 1 on the self-comparison diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pamunet import tensor as T
from pamunet.tensor import Tensor


@dataclass
class ActivationSet:
    """Per-layer activation matrices, rows aligned by probe sample."""

    model_tag: str
    layers: dict[str, np.ndarray]  # layer name -> (n_samples, features)

    @property
    def n_samples(self) -> int:
        return next(iter(self.layers.values())).shape[0]


def capture(model, probe_batch: Tensor, model_tag: str = "model") -> ActivationSet:
    """Run one forward pass and flatten every named activation per sample."""
    n = probe_batch.shape[0]
    if n < 4:
        raise ValueError(f"probe batch needs >= 4 samples for stable centering, got {n}")
    with T.no_grad():
        out = model.forward(probe_batch, capture=True)
    layers = {name: np.asarray(act.data, dtype=np.float64).reshape(n, -1)
              for name, act in out.activations.items()}
    return ActivationSet(model_tag=model_tag, layers=layers)


def cka_linear(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("cka_linear expects 2-D (samples, features) matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("cka needs at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    kx = xc @ xc.T
    ky = yc @ yc.T
    num = float((kx * ky).sum())
    den = float(np.linalg.norm(kx) * np.linalg.norm(ky))
    if den == 0.0:
        return 0.0
    return num / den


@dataclass
class CKAMatrix:
    row_layers: list[str]   # model A
    col_layers: list[str]   # model B
    values: np.ndarray      # (len(row_layers), len(col_layers))

    def to_csv(self) -> str:
        """Header row: model-B layer names; first column: model-A layer names."""
        clipped = np.clip(self.values, 0.0, 1.0)
        lines = ["layer," + ",".join(self.col_layers)]
        for name, row in zip(self.row_layers, clipped):
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


def cka_matrix(a: ActivationSet, b: ActivationSet) -> CKAMatrix:
    if a.n_samples != b.n_samples:
        raise ValueError(
            f"activation sets were captured on different probe batches: "
            f"{a.n_samples} vs {b.n_samples} samples")
    rows = list(a.layers)
    cols = list(b.layers)
    values = np.empty((len(rows), len(cols)))
    for i, ra in enumerate(rows):
        for j, cb in enumerate(cols):
            values[i, j] = cka_linear(a.layers[ra], b.layers[cb])
    return CKAMatrix(row_layers=rows, col_layers=cols, values=values)
