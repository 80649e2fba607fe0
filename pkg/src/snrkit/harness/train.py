"""Training loop, checkpoints and run records."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from .. import losses, snrt
from ..data import DatasetManifest, PKSampler
from ..model import Model, ModelConfig, scheme_config
from .schedule import Adam, ConfigError, TrainConfig, lr_schedule

CHECKPOINT_FORMAT = "snrkit-checkpoint/1"

# loss-ablation scheme names -> (architecture scheme, train config overrides)
LOSS_ABLATIONS = {
    "SNR w/o L_SNR": ("Baseline-SNR", {"use_snr_loss": False}),
    "SNR w/o L+": ("Baseline-SNR", {"use_plus": False}),
    "SNR w/o L-": ("Baseline-SNR", {"use_minus": False}),
}


class TrainingAborted(RuntimeError):
    """Loss or activations went non-finite (CLI exit code 3)."""

    def __init__(self, message: str, dump_dir: Path | None = None):
        super().__init__(message)
        self.dump_dir = dump_dir


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    config_digest: str = ""

    def append(self, entry: dict, log_path: Path | None) -> None:
        self.epochs.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def resolve_scheme(train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    """Model config for the run's scheme plus any loss-ablation toggles."""
    name = train_cfg.scheme
    if name in LOSS_ABLATIONS:
        arch, overrides = LOSS_ABLATIONS[name]
        train_cfg = replace(train_cfg, **overrides)
    else:
        arch = name
    base = ModelConfig.from_dict(train_cfg.model) if train_cfg.model else ModelConfig()
    try:
        # "custom" keeps the per-stage modes given in the model dict
        mcfg = base if arch == "custom" else scheme_config(arch, base)
        mcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return mcfg, train_cfg


def train_labels(manifest: DatasetManifest):
    samples = manifest.split("train")
    if not samples:
        raise ConfigError("manifest has no train split")
    ids = sorted({s.identity for s in samples})
    cls = {i: k for k, i in enumerate(ids)}
    return samples, np.array([cls[s.identity] for s in samples])


def _stage_losses(out, triplets, mcfg: ModelConfig, tc: TrainConfig):
    plus, minus, lams = [], [], []
    if not tc.use_snr_loss:
        return plus, minus, lams
    for i, trace in sorted(out.traces.items()):
        dcl = losses.dual_causality_loss(trace, triplets)
        zero = dc.Tensor(np.zeros((), dtype=dcl.plus.dtype))
        plus.append(dcl.plus if tc.use_plus else zero)
        minus.append(dcl.minus if tc.use_minus else zero)
        lams.append(mcfg.lambdas[i])
    return plus, minus, lams


def _dump(out_dir: Path | None, step: int, epoch: int, idx, images, message: str) -> Path | None:
    if out_dir is None:
        return None
    d = out_dir / "nan_dump"
    d.mkdir(parents=True, exist_ok=True)
    snrt.save(d / "batch.snrt", images)
    (d / "diagnostic.json").write_text(
        json.dumps({"step": step, "epoch": epoch, "batch_indices": list(map(int, idx)), "error": message}, indent=2)
    )
    return d


def train_run(
    train_cfg: TrainConfig,
    manifest: DatasetManifest | None = None,
    out_dir=None,
    eval_fn=None,
) -> tuple[Model, RunRecord]:
    """Train one scheme; writes a JSON-lines log and checkpoints when ``out_dir`` is set.

    ``eval_fn(model, epoch)`` returns a metrics dict and is called every
    ``eval_every`` epochs.
    """
    train_cfg.validate()
    mcfg, tc = resolve_scheme(train_cfg)
    if manifest is None:
        if not tc.dataset:
            raise ConfigError("no dataset given")
        manifest = DatasetManifest.read(Path(tc.dataset) / "manifest.jsonl")
    samples, labels = train_labels(manifest)
    n_cls = int(labels.max()) + 1
    mcfg = replace(mcfg, num_identities=n_cls, seed=tc.seed)
    images = manifest.load_images(samples).astype(mcfg.dtype)
    if images.shape[1:] != tuple(mcfg.input_shape):
        raise ConfigError(f"images are {images.shape[1:]}, model expects {mcfg.input_shape}")

    out = Path(out_dir or tc.out_dir) if (out_dir or tc.out_dir) else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.jsonl"
        log_path.write_text("")

    model = Model(mcfg)
    params = model.named_parameters()
    opt = Adam(params, tc.betas, tc.adam_eps, tc.weight_decay)
    try:
        sampler = PKSampler(labels, tc.P, tc.K, seed=tc.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    trip_rng = np.random.default_rng([tc.seed, 1])
    record = RunRecord(seed=tc.seed, config_digest=mcfg.digest())
    t0 = time.perf_counter()
    step = 0
    for epoch in range(tc.epochs):
        lr = lr_schedule(epoch, tc)
        sums: dict[str, float] = {}
        nb = 0
        for idx in sampler.epoch():
            x = images[idx]
            y = labels[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    fwd = model.forward(x, training=True)
                    if tc.triplet_policy == "batch_hard":
                        trip = losses.batch_hard_triplets(fwd.embeddings.data, y)
                    else:
                        trip = losses.random_triplets(y, trip_rng)
                    ce = losses.id_classification_loss(fwd.logits, y)
                    tri = losses.batch_hard_triplet_loss(fwd.embeddings, y)
                    lp, lm, lams = _stage_losses(fwd, trip, mcfg, tc)
                    total, bd = losses.total_loss(ce, tri, lp, lm, lams)
                    model.zero_grad()
                    total.backward()
                if not np.isfinite(bd.total):
                    raise dc.NonFiniteError(f"loss is {bd.total}")
            except dc.NonFiniteError as e:
                d = _dump(out, step, epoch, idx, x, str(e))
                raise TrainingAborted(f"non-finite value at step {step} (epoch {epoch}): {e}", d) from e
            opt.step(lr)
            step += 1
            nb += 1
            for k, v in (("total", bd.total), ("reid_ce", bd.reid_ce), ("reid_triplet", bd.reid_triplet),
                         ("snr_plus", float(sum(bd.snr_plus))), ("snr_minus", float(sum(bd.snr_minus)))):
                sums[k] = sums.get(k, 0.0) + v
        entry = {"epoch": epoch + 1, "lr": lr, "steps": step, **{k: v / nb for k, v in sums.items()}}
        if eval_fn is not None and tc.eval_every and (epoch + 1) % tc.eval_every == 0:
            entry["eval"] = eval_fn(model, epoch + 1)
            record.evals.append({"epoch": epoch + 1, **entry["eval"]})
        record.append(entry, log_path)
        if out is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0 and epoch + 1 < tc.epochs:
            save_checkpoint(out / f"checkpoint_epoch{epoch + 1}", model, tc, step, epoch + 1, entry)
    record.wall_time = time.perf_counter() - t0
    if out is not None:
        final = record.epochs[-1] if record.epochs else {}
        save_checkpoint(out / "checkpoint", model, tc, step, tc.epochs, final)
        (out / "run.json").write_text(
            json.dumps({"wall_time": record.wall_time, "seed": tc.seed, "config_digest": record.config_digest,
                        "steps": step}, indent=2, sort_keys=True)
        )
    return model, record


# checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: Model, tc: TrainConfig, step: int, epoch: int, metrics: dict) -> Path:
    """Directory with manifest.json and one SNRT v1 tensor file per parameter/buffer."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    snrt.save_many(path / "tensors", state)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model": model.config.to_dict(),
        "train": tc.to_dict(),
        "step": step,
        "epoch": epoch,
        "metrics": {k: v for k, v in metrics.items() if k != "eval"},
        "tensors": sorted(state),
        "config_hash": model.config.digest(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unknown checkpoint format {manifest.get('format')!r}")
    model = Model(ModelConfig.from_dict(manifest["model"]))
    state = snrt.load_many(path / "tensors")
    model.load_state_dict(state)
    return model, manifest
