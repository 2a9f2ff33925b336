"""Training runs, γ sweeps and their file formats.

A run is described by a :class:`TrainConfig`, read from a flat ``key = value``
text file. ``train`` fits a :class:`~crvae.CRVAE`, evaluates the held-out split
every ``eval_every`` epochs into ``metrics.csv`` and keeps ``checkpoint.bin``
at the last completed epoch.
"""

import csv
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, fields

from .checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .data import AugmentationSpec, load_dataset
from .estimator import CRVAE
from .exceptions import ConfigurationError, TrainingDivergedError
from .metrics import METRIC_COLUMNS, evaluate

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"
DEFAULT_GAMMAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``model = vae`` trains without the key encoder and records γ as 0.
    ``subset`` keeps the first N images (0 keeps all). The held-out split is
    the last ``holdout_fraction`` of what remains.
    """

    dataset: str = ""
    format: str = "idx"
    labels: str = ""
    subset: int = 0
    holdout_fraction: float = 0.1
    model: str = "crvae"
    latent_dim: int = 16
    batch_size: int = 256
    epochs: int = 50
    gamma: float = 1.0
    likelihood: str = "gaussian"
    optimizer: str = "sgd"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-8
    plateau_patience: int = 20
    plateau_factor: float = 0.9
    plateau_threshold: float = 1e-4
    ema_momentum: float = 0.999
    ema_cadence: str = "epoch"
    temperature: float = 1.0
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    seed: int = 0
    eval_every: int = 1
    mi_samples: int = 4096
    mi_mixture: int = 2048
    au_threshold: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if self.model not in ("crvae", "vae"):
            raise ConfigurationError(f"model must be 'crvae' or 'vae', got {self.model!r}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        for name in ("learning_rate", "temperature", "plateau_factor", "holdout_fraction"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        for name in ("epochs", "eval_every", "mi_samples", "mi_mixture", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.subset < 0:
            raise ConfigurationError("subset must be >= 0")
        try:
            self.augmentation
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def augmentation(self):
        names = [f.name for f in fields(AugmentationSpec)]
        return AugmentationSpec(**{n: getattr(self, n) for n in names})

    @property
    def effective_gamma(self):
        return self.gamma if self.model == "crvae" else 0.0

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def estimator(self):
        """An unfitted :class:`CRVAE` with this configuration's hyperparameters."""
        return CRVAE(
            latent_dim=self.latent_dim, gamma=self.effective_gamma,
            contrastive=self.model == "crvae", likelihood=self.likelihood,
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
            plateau_threshold=self.plateau_threshold, temperature=self.temperature,
            ema_momentum=self.ema_momentum, ema_cadence=self.ema_cadence,
            augmentation=self.augmentation, dtype=self.dtype, random_state=self.seed,
        )

    def load_splits(self):
        """``(train, heldout)`` datasets."""
        if not self.dataset:
            raise ConfigurationError("no dataset configured")
        ds = load_dataset(self.dataset, format=self.format, labels_path=self.labels or None)
        if self.subset:
            if self.subset > len(ds):
                raise ConfigurationError(
                    f"subset {self.subset} exceeds the {len(ds)} images in {self.dataset}"
                )
            ds = ds.subset(self.subset)
        return ds.split_holdout(self.holdout_fraction)

    def to_dict(self):
        return {f.name: _format_value(getattr(self, f.name)) for f in fields(self)}

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, mapping):
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            values[key] = _parse_value(key, raw, hints[key]) if isinstance(raw, str) else raw
        return cls(**values)

    @classmethod
    def from_text(cls, text, source="<config>"):
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            if key in mapping:
                raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
            mapping[key] = value.strip()
        try:
            return cls.from_dict(mapping)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}: {exc}") from exc

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            config = cls.from_text(f.read(), source=os.fspath(path))
        if config.dataset and not os.path.isabs(config.dataset):
            base = os.path.dirname(os.path.abspath(path))
            config = config.replace(dataset=os.path.join(base, config.dataset))
            if config.labels and not os.path.isabs(config.labels):
                config = config.replace(labels=os.path.join(base, config.labels))
        return config


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            parts = tuple(float(p) for p in raw.split(","))
            if len(parts) != 2:
                raise ValueError(raw)
            return parts
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value {raw!r} for {key}") from None


# -- training -----------------------------------------------------------------


@dataclass
class RunResult:
    model: CRVAE
    records: list
    checkpoint_path: str | None
    metrics_path: str | None


def metrics_csv(records):
    """Metric rows as CSV text with the standard header."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for record in records:
        writer.writerow(record.csv_row() if hasattr(record, "csv_row") else record)
    return out.getvalue()


def read_metrics(path):
    """Rows of a metric CSV as dicts with numeric fields converted."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metric header {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({k: (v if k == "split" else (int(v) if k in ("epoch", "au", "seed")
                                                      else float(v))) for k, v in row.items()})
    return rows


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _shape_expectations(config, input_shape):
    return {
        "latent_dim": config.latent_dim,
        "likelihood": config.likelihood,
        "contrastive": config.model == "crvae",
        "input_shape": tuple(input_shape),
    }


def train(config, out_dir=None, resume=None, data=None):
    """Fit a model according to ``config``.

    ``data`` may supply ``(train, heldout)`` datasets instead of loading them
    from ``config.dataset``. With ``resume`` (a checkpoint path) training
    continues from that snapshot and the metric log continues the one stored
    in it, so an interrupted run ends with the same files as an uninterrupted
    one. Non-finite losses raise :class:`TrainingDivergedError` whose
    ``checkpoint_path`` names the last good checkpoint (or ``None``).
    """
    train_set, held = data if data is not None else config.load_splits()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME) if out_dir else None
    metrics_path = os.path.join(out_dir, METRICS_NAME) if out_dir else None

    if resume is not None:
        ckpt = load_checkpoint(resume, expect=_shape_expectations(config, train_set.image_shape))
        model = model_from_checkpoint(ckpt).set_params(epochs=config.epochs)
        rows = [r.split(",") for r in ckpt.config.get("run", {}).get("metrics", [])]
    else:
        model = config.estimator()
        # Architecture and data compatibility are checked here, before any step.
        model._initialize(train_set.image_shape)
        rows = []
    last_good = resume

    while model.n_epochs_ < config.epochs:
        try:
            model.partial_fit(train_set.images)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"{exc}; last good checkpoint: {last_good}",
                epoch=exc.epoch, checkpoint_path=last_good,
            ) from exc
        epoch = model.n_epochs_
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            record = evaluate(
                model, held.images, epoch=epoch, split="heldout", seed=config.seed,
                rng=[config.seed, epoch], num_samples=config.mi_samples,
                max_mixture=config.mi_mixture, threshold=config.au_threshold,
                lr=model.current_lr, gamma=config.effective_gamma,
            )
            rows.append(record.csv_row())
        if out_dir is not None:
            run = {"config": config.to_dict(), "metrics": [",".join(r) for r in rows]}
            save_checkpoint(checkpoint_from_model(model, run), ckpt_path)
            _write_text(metrics_path, metrics_csv(rows))
            last_good = ckpt_path
    return RunResult(model, rows, ckpt_path, metrics_path)


def ablate_gamma(config, gammas=DEFAULT_GAMMAS, out_dir=None, data=None):
    """One run per γ with the shared seed; returns ``{gamma: RunResult}``.

    With ``out_dir`` each run gets its own ``gamma_<value>`` directory and the
    concatenated logs go to ``ablation.csv``.
    """
    if data is None:
        data = config.load_splits()
    results = {}
    all_rows = []
    for gamma in gammas:
        run_dir = os.path.join(out_dir, f"gamma_{gamma:g}") if out_dir else None
        result = train(config.replace(gamma=float(gamma), model="crvae"), run_dir, data=data)
        results[float(gamma)] = result
        all_rows.extend(result.records)
    if out_dir is not None:
        _write_text(os.path.join(out_dir, "ablation.csv"), metrics_csv(all_rows))
    return results


def final_mi(result):
    """Mutual information (nats) of the last evaluated epoch."""
    return float(result.records[-1][METRIC_COLUMNS.index("mi_nats")])


def load_model(path, expect=None):
    """Model and stored run configuration from a checkpoint file."""
    ckpt = load_checkpoint(path, expect=expect)
    run = ckpt.config.get("run", {})
    config = TrainConfig.from_dict(run["config"]) if "config" in run else None
    return model_from_checkpoint(ckpt), config
