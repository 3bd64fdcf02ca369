"""Training objectives: masked reconstruction (l1 / cross-entropy), latent
prediction against the EMA target, symmetric caption-tile InfoNCE, and the
weighted total.

Masked positions are given per sample as an integer array of shape (B, M);
predictions and targets are patch sequences of shape (B, N, ...).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ContractError
from .tiles import ConfigurationError

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.4
DEFAULT_TEMPERATURE = 0.07


def _masked_index(masked, batch: int, n: int):
    masked = np.asarray(masked, dtype=np.int64)
    if masked.ndim == 1:
        masked = np.broadcast_to(masked, (batch, masked.size))
    if masked.shape[0] != batch:
        raise ContractError(f"mask rows {masked.shape[0]} != batch {batch}")
    if masked.size == 0:
        raise ConfigurationError("masked position set is empty")
    if masked.min() < 0 or masked.max() >= n:
        raise IndexError(f"masked position out of grid of {n} cells")
    return np.arange(batch)[:, None], masked


def loss_rec_l1(pred: Tensor, target, masked, normalize_targets: bool = False) -> Tensor:
    """Mean absolute error over masked patches, averaged over each patch's values.

    ``normalize_targets`` standardises every target patch by its own mean and
    std before comparison; off by default."""
    pred = ag.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    rows, cols = _masked_index(masked, pred.shape[0], pred.shape[1])
    tgt = target[rows, cols]
    if normalize_targets:
        mu = tgt.mean(axis=-1, keepdims=True)
        sd = tgt.std(axis=-1, keepdims=True)
        tgt = (tgt - mu) / (sd + 1e-6)
    diff = ag.getitem(pred, (rows, cols), unique=True) - tgt
    return ag.absolute(diff).mean()


def loss_rec_ce(logits: Tensor, labels, masked) -> Tensor:
    """Mean cross-entropy over masked patches; logits (B, N, K), labels (B, N)."""
    logits = ag.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:2]:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    rows, cols = _masked_index(masked, logits.shape[0], logits.shape[1])
    return ag.softmax_cross_entropy(ag.getitem(logits, (rows, cols), unique=True), labels[rows, cols])


def loss_mpmae(losses: dict, weights: dict) -> Tensor:
    """Weighted sum over every modality named in ``weights``."""
    missing = [m for m in weights if m not in losses]
    if missing:
        raise ConfigurationError(f"no reconstruction loss for modality {missing[0]!r}")
    total = Tensor(0.0)
    for m, w in weights.items():
        total = total + losses[m] * float(w)
    return total


def loss_jepa(pred: Tensor, target) -> Tensor:
    """Mean over target tokens of the squared l2 distance; the target branch is detached."""
    pred = ag.as_tensor(pred)
    tgt = ag.stop_gradient(ag.as_tensor(target))
    if pred.shape != tgt.shape:
        raise ContractError(f"predicted {pred.shape} and target {tgt.shape} latents differ")
    diff = pred - tgt
    n_tokens = int(np.prod(pred.shape[:-1]))
    return (diff * diff).sum() * (1.0 / n_tokens)


def itc_similarity(v: Tensor, t: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigurationError(f"contrastive temperature must be positive, got {temperature}")
    return (ag.as_tensor(v) @ ag.as_tensor(t).transpose()) * (1.0 / temperature)


def loss_itc(v: Tensor, t: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Symmetric InfoNCE where row i of ``v`` matches row i of ``t``."""
    s = itc_similarity(v, t, temperature)
    idx = np.arange(s.shape[0])
    return (ag.softmax_cross_entropy(s, idx) + ag.softmax_cross_entropy(s.transpose(), idx)) * 0.5


@dataclass
class LossReport:
    rec: dict[str, float]
    jepa: float
    itc: float
    total: float
    lambdas: dict[str, float]
    alpha: float
    beta: float
    temperature: float = DEFAULT_TEMPERATURE
    skipped: list[str] = field(default_factory=list)

    @property
    def mpmae(self) -> float:
        return sum(self.lambdas[m] * self.rec[m] for m in self.lambdas)

    def recomputed_total(self) -> float:
        return self.mpmae + self.alpha * self.jepa + self.beta * self.itc

    def to_dict(self) -> dict:
        return asdict(self)


def loss_total(rec: dict, jepa, itc, lambdas: dict, alpha: float = DEFAULT_ALPHA,
               beta: float = DEFAULT_BETA, temperature: float = DEFAULT_TEMPERATURE):
    """Combine the parts into one scalar for a single backward pass.

    ``jepa`` or ``itc`` may be None when the branch was not evaluated (its
    weight must then be zero); the report records it as 0 and lists it as skipped."""
    skipped = []
    parts = {}
    for name, value, weight in (("jepa", jepa, alpha), ("itc", itc, beta)):
        if value is None:
            if weight != 0:
                raise ConfigurationError(f"{name} branch skipped but its weight is {weight}")
            skipped.append(name)
            parts[name] = None
        else:
            parts[name] = ag.as_tensor(value)
    total = loss_mpmae(rec, lambdas)
    if parts["jepa"] is not None:
        total = total + parts["jepa"] * alpha
    if parts["itc"] is not None:
        total = total + parts["itc"] * beta
    report = LossReport(
        rec={m: ag.as_tensor(rec[m]).item() for m in lambdas},
        jepa=0.0 if parts["jepa"] is None else parts["jepa"].item(),
        itc=0.0 if parts["itc"] is None else parts["itc"].item(),
        total=total.item(),
        lambdas={m: float(w) for m, w in lambdas.items()},
        alpha=float(alpha), beta=float(beta), temperature=float(temperature), skipped=skipped,
    )
    return total, report
