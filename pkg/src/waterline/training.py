"""Supervised and adversarial training loops at desk scale.

Loss of the detector is the summed binary cross-entropy of the
waterline-class probability; gradients flow through the network's own
backward pass. The GAN uses plain SGD, ascent for the discriminator and the
non-saturating loss for the generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .netbuilder import Network
from .tensor import NonFiniteError
from .synth import PatchDataset

log = logging.getLogger(__name__)

CLAMP = 1e-12


class NonFiniteGradient(FloatingPointError):
    """A step produced NaN/Inf gradients; parameters were left untouched."""


def _clamp(f):
    return np.clip(f, CLAMP, 1.0 - CLAMP)


def energy(outputs, labels) -> float:
    """Summed binary cross-entropy ``-sum[y ln f + (1-y) ln(1-f)]``."""
    f = np.asarray(outputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"outputs {f.shape} and labels {y.shape} differ in shape")
    if np.any(~np.isfinite(f)) or np.any(f < 0) or np.any(f > 1):
        raise ValueError("outputs must lie in [0, 1]")
    f = _clamp(f)
    return float(-np.sum(y * np.log(f) + (1 - y) * np.log(1 - f)))


def energy_grad(outputs, labels) -> np.ndarray:
    """Derivative of :func:`energy` with respect to each (clamped) output."""
    f = _clamp(np.asarray(outputs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    return -(y / f - (1 - y) / (1 - f))


def waterline_prob(network: Network, x: np.ndarray, positive_class: int = 1) -> float:
    return float(network.forward(x)[positive_class])


def batch_gradient(network: Network, xs, ys, positive_class: int = 1):
    """Return ``(loss, correct, grads)`` summed over the batch in order."""
    grads: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in network.params.items()}
    loss = 0.0
    correct = 0
    for x, y in zip(xs, ys):
        try:
            probs, tape = network.forward_tape(x)
        except NonFiniteError as exc:
            raise NonFiniteGradient(f"non-finite activations: {exc}") from exc
        f = probs[positive_class]
        loss += energy([f], [y])
        correct += int((f >= 0.5) == bool(y))
        gout = np.zeros_like(probs)
        gout[positive_class] = energy_grad([f], [y])[0]
        _, g = network.backward(tape, gout)
        for k, v in g.items():
            grads[k] += v
    return loss, correct, grads


def _apply(network: Network, grads, lr: float, clip: Optional[float] = None,
           sign: float = -1.0) -> None:
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        log.warning("non-finite gradient in %s; step skipped", ", ".join(bad[:5]))
        raise NonFiniteGradient(f"non-finite gradient in {bad[:5]}")
    scale = 1.0
    if clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip:
            scale = clip / norm
    for k, g in grads.items():
        network.params[k] += sign * lr * scale * g


def sgd_step(network: Network, batch: Tuple[Sequence[np.ndarray], Sequence[int]], lr: float,
             clip: Optional[float] = None, mean: bool = True) -> float:
    """One SGD update in place; returns the pre-step batch energy.

    With ``mean`` the step follows the gradient of the batch-averaged energy
    so the learning rate does not depend on the batch size.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    return _step(network, batch[0], batch[1], lr, clip, mean)[0]


def _step(network, xs, ys, lr, clip, mean=True):
    loss, correct, grads = batch_gradient(network, xs, ys)
    if mean and len(ys):
        grads = {k: v / len(ys) for k, v in grads.items()}
    _apply(network, grads, lr, clip)
    return loss, correct


def accuracy(network: Network, data: PatchDataset) -> float:
    hits = sum(int((waterline_prob(network, x) >= 0.5) == bool(y)) for x, y in zip(data.x, data.y))
    return hits / max(len(data), 1)


@dataclass(frozen=True)
class Stage:
    epochs: int
    lr: float
    batch_size: int = 60
    seed: int = 0
    name: str = ""


@dataclass(frozen=True)
class TrainSchedule:
    stages: Tuple[Stage, ...]
    clip: Optional[float] = None

    @classmethod
    def desk(cls, seed: int = 0) -> "TrainSchedule":
        return cls((Stage(10, 0.01, 60, seed, "stage-1"), Stage(10, 0.005, 60, seed + 1, "stage-2")))

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainSchedule":
        """Full-length schedule: 30 epochs, then 50 epochs of fine-tuning."""
        return cls((Stage(30, 0.05, 60, seed, "stage-1"), Stage(50, 0.01, 60, seed + 1, "stage-2")))

    def __post_init__(self):
        for st in self.stages:
            if st.epochs < 0 or st.batch_size < 1:
                raise ValueError(f"stage {st.name or st}: epochs and batch size must be positive")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    mean_loss: float
    accuracy: float


@dataclass
class TrainResult:
    network: Network
    history: List[EpochRecord] = field(default_factory=list)
    aborted: bool = False
    message: str = ""


def train_two_stage(network: Network, schedule: TrainSchedule, *datasets: PatchDataset,
                    on_epoch: Optional[Callable[[EpochRecord, Network], None]] = None
                    ) -> TrainResult:
    """Run each schedule stage on its dataset, updating ``network`` in place.

    ``mean_loss`` is the average per-sample energy of the pre-step batch losses;
    ``accuracy`` counts pre-step predictions over the epoch.
    """
    if len(datasets) != len(schedule.stages):
        raise ValueError(f"{len(schedule.stages)} stages but {len(datasets)} datasets")
    result = TrainResult(network)
    for si, (stage, data) in enumerate(zip(schedule.stages, datasets), start=1):
        if stage.epochs and len(data) == 0:
            raise ValueError(f"stage {si} has no training data")
        rng = np.random.default_rng(stage.seed)
        for epoch in range(1, stage.epochs + 1):
            order = rng.permutation(len(data))
            total = 0.0
            hits = 0
            for b in range(0, len(order), stage.batch_size):
                idx = order[b:b + stage.batch_size]
                try:
                    loss, correct = _step(network, data.x[idx], data.y[idx], stage.lr,
                                          schedule.clip)
                except NonFiniteGradient as exc:
                    result.aborted = True
                    result.message = f"stage {si} epoch {epoch}: {exc}"
                    return result
                total += loss
                hits += correct
            rec = EpochRecord(si, epoch, total / len(data), hits / len(data))
            result.history.append(rec)
            log.info("stage %d epoch %d loss %.5f acc %.3f", si, epoch, rec.mean_loss, rec.accuracy)
            if on_epoch is not None:
                on_epoch(rec, network)
    return result


# ---------------------------------------------------------------------------
# adversarial augmentation

def gan_value(D: Network, G: Network, real, noise) -> float:
    """``mean log D(x) + mean log(1 - D(G(z)))`` with outputs clamped away from 0 and 1."""
    if len(real) == 0 or len(noise) == 0:
        raise ValueError("gan_value needs non-empty batches")
    dr = _clamp(np.array([D(x)[0] for x in real]))
    df = _clamp(np.array([D(G(z))[0] for z in noise]))
    return float(np.mean(np.log(dr)) + np.mean(np.log(1 - df)))


def _d_grads(D: Network, G: Network, real, noise):
    grads = {k: np.zeros_like(v) for k, v in D.params.items()}
    for x in real:
        out, tape = D.forward_tape(x)
        _, g = D.backward(tape, np.array([1.0 / _clamp(out[0])]) / len(real))
        for k, v in g.items():
            grads[k] += v
    for z in noise:
        out, tape = D.forward_tape(G(z))
        _, g = D.backward(tape, np.array([-1.0 / (1.0 - _clamp(out[0]))]) / len(noise))
        for k, v in g.items():
            grads[k] += v
    return grads


def _g_grads(D: Network, G: Network, noise):
    """Gradient of the non-saturating loss ``-mean log D(G(z))``."""
    grads = {k: np.zeros_like(v) for k, v in G.params.items()}
    for z in noise:
        img, gtape = G.forward_tape(z)
        out, dtape = D.forward_tape(img)
        gimg, _ = D.backward(dtape, np.array([-1.0 / _clamp(out[0])]) / len(noise))
        _, g = G.backward(gtape, gimg)
        for k, v in g.items():
            grads[k] += v
    return grads


def gan_alternating_step(G: Network, D: Network, real, rng: np.random.Generator,
                         lr_g: float, lr_d: float) -> float:
    """Ascend the value on D, then descend the non-saturating loss on G.

    Two noise batches the size of ``real`` are drawn from ``rng``. Returns the
    value measured before the D update. Both networks are left untouched when
    either gradient is non-finite.
    """
    if lr_g < 0 or lr_d < 0:
        raise ValueError("learning rates must be >= 0")
    n, zdim = len(real), G.arch.input_shape[0]
    z_d = rng.standard_normal((n, zdim))
    z_g = rng.standard_normal((n, zdim))
    value = gan_value(D, G, real, z_d)
    gd = _d_grads(D, G, real, z_d)
    d_before = {k: v.copy() for k, v in D.params.items()}
    _apply(D, gd, lr_d, sign=+1.0)
    try:
        gg = _g_grads(D, G, z_g)
        _apply(G, gg, lr_g)
    except NonFiniteGradient:
        D.params = d_before
        raise
    return value


def discriminator_accuracy(D: Network, G: Network, real, noise) -> float:
    hits = sum(int(D(x)[0] >= 0.5) for x in real) + sum(int(D(G(z))[0] < 0.5) for z in noise)
    return hits / (len(real) + len(noise))


@dataclass
class FilterStats:
    requested: int
    accepted: int
    attempts: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    @property
    def capped(self) -> bool:
        return self.accepted < self.requested


def generate_filtered_samples(G: Network, D: Network, count: int, rng: np.random.Generator,
                              threshold: float = 0.5, cap_factor: int = 100):
    """Emit ``G(z)`` only when ``D(G(z)) >= threshold``; returns ``(samples, stats)``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    zdim = G.arch.input_shape[0]
    out = []
    attempts = 0
    cap = cap_factor * count
    while len(out) < count and attempts < cap:
        attempts += 1
        img = G(rng.standard_normal(zdim))
        if D(img)[0] >= threshold:
            out.append(img)
    stats = FilterStats(count, len(out), attempts)
    if stats.capped:
        log.warning("generator filter hit its cap: %d of %d accepted in %d attempts (rate %.3f)",
                    stats.accepted, count, attempts, stats.acceptance_rate)
    shape = G.arch.layers()[-1].out_shape if G.arch.layers() else ()
    samples = np.array(out) if out else np.zeros((0,) + tuple(shape))
    return samples, stats


def toy_waterline_images(rng: np.random.Generator, n: int, size: int = 4) -> np.ndarray:
    """Tiny 1-channel images: bright rows above a random boundary row, dark below."""
    out = np.empty((n, 1, size, size))
    for i in range(n):
        k = int(rng.integers(1, size))
        out[i, 0, :k] = 0.8
        out[i, 0, k:] = 0.2
    return np.clip(out + rng.normal(0, 0.05, out.shape), 0, 1)
