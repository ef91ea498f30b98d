"""Unsupervised training: plain reconstruction and adversarial reconstruction."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, mse, no_grad
from .data import SegmentSet
from .errors import ContractError, DimensionError, DivergenceError, ConfigurationError
from .model import Discriminator, Generator, GeneratorSpec, build_discriminator, build_generator, normalize_variant

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    lr_generator: float = 0.001
    lr_discriminator: float = 0.0002
    batch_size: int = 128
    max_epochs: int = 100
    lambda_l1: float = 10.0
    validation_fraction: float = 0.1
    seed: int = 0
    variant: str = "cnn_rnn_gan"
    dtype: str = "float32"
    patience: int | None = None
    restore_best: bool = True

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)

    def validate(self) -> None:
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class TrainHistory:
    loss_g: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    mse_train: list[float] = field(default_factory=list)
    mse_val: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    COLUMNS = ("epoch", "loss_g", "loss_d", "mse_train", "mse_val", "seconds")

    def __len__(self) -> int:
        return len(self.mse_val)

    def losses(self) -> dict[str, list[float]]:
        """Everything except wall-clock time, for determinism comparisons."""
        return {"loss_g": self.loss_g, "loss_d": self.loss_d, "mse_train": self.mse_train, "mse_val": self.mse_val}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for i in range(len(self)):
                w.writerow([i + 1, repr(self.loss_g[i]), repr(self.loss_d[i]), repr(self.mse_train[i]),
                            repr(self.mse_val[i]), f"{self.seconds[i]:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                h.loss_g.append(float(row["loss_g"]))
                h.loss_d.append(float(row["loss_d"]))
                h.mse_train.append(float(row["mse_train"]))
                h.mse_val.append(float(row["mse_val"]))
                h.seconds.append(float(row["seconds"]))
        h.best_epoch = int(np.argmin(h.mse_val)) + 1 if h.mse_val else 0
        return h


@dataclass
class FitResult:
    generator: Generator
    discriminator: Discriminator | None
    history: TrainHistory
    config: TrainConfig


# -- losses ------------------------------------------------------------------------


def mse_loss(X, Y) -> Tensor:
    X, Y = Tensor.lift(X), Tensor.lift(Y)
    if X.shape != Y.shape:
        raise DimensionError(f"mse_loss: shapes differ {X.shape} vs {Y.shape}")
    return mse(X, Y)


def _check_prob(p: Tensor, name: str) -> Tensor:
    p = Tensor.lift(p)
    d = p.data
    if not np.all(np.isfinite(d)) or np.any(d < 0) or np.any(d > 1):
        raise ContractError(f"{name} must hold probabilities in [0, 1]")
    return p.clip(PROB_CLAMP, 1 - PROB_CLAMP)


def discriminator_loss(d_real, d_fake) -> Tensor:
    """``-[log D(X) + log(1 - D(G(X)))]`` averaged over the batch."""
    d_real = _check_prob(d_real, "d_real")
    d_fake = _check_prob(d_fake, "d_fake")
    return -(d_real.log() + (1.0 - d_fake).log()).mean()


def generator_loss(d_fake, X, GX, lambda_l1: float) -> Tensor:
    """Non-saturating adversarial term plus ``lambda * MSE(X, G(X))``."""
    d_fake = _check_prob(d_fake, "d_fake")
    adv = -(d_fake.log()).mean()
    if lambda_l1 == 0:
        return adv
    X, GX = Tensor.lift(X), Tensor.lift(GX)
    return adv + lambda_l1 * mse_loss(X.reshape(GX.shape), GX)


def gan_losses(d_real, d_fake, X, GX, lambda_l1: float) -> tuple[Tensor, Tensor]:
    return discriminator_loss(d_real, d_fake), generator_loss(d_fake, X, GX, lambda_l1)


# -- data splitting ------------------------------------------------------------------


def split_validation(dataset: SegmentSet, fraction: float, seed: int) -> tuple[SegmentSet, SegmentSet]:
    """Hold out ``round(fraction * trials)`` whole trials (at least one each side)."""
    if not 0 < fraction < 1:
        raise ContractError("validation fraction must lie in (0, 1)")
    trials = np.array(dataset.trials())
    if len(trials) < 2:
        raise ContractError(f"need at least 2 trials to split, got {len(trials)}")
    n_val = int(round(fraction * len(trials)))
    n_val = min(max(n_val, 1), len(trials) - 1)
    rng = np.random.default_rng(seed)
    held = set(trials[rng.permutation(len(trials))[:n_val]].tolist())
    mask = np.array([t in held for t in dataset.trial])
    return dataset.subset(~mask), dataset.subset(mask)


# -- fitting ---------------------------------------------------------------------------


def _batch(X: np.ndarray) -> Tensor:
    return Tensor(X.reshape(X.shape[0], 1, X.shape[1], X.shape[2]))


def reconstruction_mse(gen: Generator, X: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode MSE over ``X``, accumulated exactly as a mean over all elements."""
    was = gen.training
    gen.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(X), batch_size):
                xb = _batch(X[i : i + batch_size].astype(gen.dtype))
                y, _ = gen(xb)
                total += float(((y.data - xb.data).astype(np.float64) ** 2).sum())
    finally:
        gen.training = was
    return total / X.size


def _check_finite(value: float, epoch: int, batch: int, what: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} at epoch {epoch}, batch {batch}")


def fit(dataset: SegmentSet, config: TrainConfig | None = None, spec: GeneratorSpec | None = None,
        log=None) -> FitResult:
    """Train a generator (and discriminator for adversarial variants).

    Parameters from the epoch with the lowest validation reconstruction MSE
    are restored before returning unless ``config.restore_best`` is off.
    """
    config = config or TrainConfig()
    config.validate()
    if len(dataset) == 0:
        raise ContractError("cannot fit on an empty dataset")
    if spec is None:
        spec = GeneratorSpec(variant=config.variant, channels=dataset.channels, timepoints=dataset.timepoints)
    else:
        spec = GeneratorSpec(**{**spec.__dict__, "variant": config.variant})
    if (spec.channels, spec.timepoints) != (dataset.channels, dataset.timepoints):
        raise DimensionError(
            f"segments are {dataset.channels}x{dataset.timepoints} but spec expects {spec.channels}x{spec.timepoints}"
        )
    dtype = np.dtype(config.dtype)
    train, val = split_validation(dataset, config.validation_fraction, config.seed)
    Xtr = train.X.astype(dtype)
    Xval = val.X.astype(dtype)

    gen = build_generator(spec, config.seed).astype(dtype).train()
    disc = build_discriminator(spec, config.seed).astype(dtype).train() if spec.adversarial else None
    opt_g = Adam(gen.parameters(), lr=config.lr_generator)
    opt_d = Adam(disc.parameters(), lr=config.lr_discriminator) if disc is not None else None
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best = (np.inf, None, None)
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        gen.train()
        if disc is not None:
            disc.train()
        perm = rng.permutation(len(Xtr))
        sums = {"g": 0.0, "d": 0.0, "mse": 0.0}
        count = 0
        for b, i in enumerate(range(0, len(perm), config.batch_size), start=1):
            xb = _batch(Xtr[perm[i : i + config.batch_size]])
            n = xb.shape[0]
            GX, _ = gen(xb)
            recon = mse_loss(xb, GX)
            if disc is None:
                loss_g = recon
                loss_d_val = np.nan
            else:
                opt_d.zero_grad()
                loss_d = discriminator_loss(disc(xb), disc(GX.detach()))
                _check_finite(loss_d.item(), epoch, b, "discriminator loss")
                loss_d.backward()
                opt_d.step()
                loss_d_val = loss_d.item()
                loss_g = generator_loss(disc(GX), xb, GX, config.lambda_l1)
            _check_finite(loss_g.item(), epoch, b, "generator loss")
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            sums["g"] += loss_g.item() * n
            sums["d"] += loss_d_val * n
            sums["mse"] += recon.item() * n
            count += n
        val_mse = reconstruction_mse(gen, Xval)
        _check_finite(val_mse, epoch, 0, "validation loss")
        history.loss_g.append(sums["g"] / count)
        history.loss_d.append(sums["d"] / count)
        history.mse_train.append(sums["mse"] / count)
        history.mse_val.append(val_mse)
        history.seconds.append(time.perf_counter() - start)
        if val_mse < best[0]:
            best = (val_mse, gen.state_dict(), disc.state_dict() if disc is not None else None)
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if log is not None:
            log(f"epoch {epoch}: loss_g={history.loss_g[-1]:.5f} mse_val={val_mse:.5f}")
        if config.patience is not None and stale >= config.patience:
            break

    if config.restore_best:
        gen.load_state_dict(best[1])
        if disc is not None:
            disc.load_state_dict(best[2])
    gen.eval()
    if disc is not None:
        disc.eval()
    return FitResult(gen, disc, history, config)
