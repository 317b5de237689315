"""Training, evaluation, ablation sweeps and run reports.

Every run writes into ``<out_dir>/<run_id>/``::

    config.txt        flat key = value snapshot (model + training)
    env.json          library versions, seed, deterministic flag
    log.csv           step, epoch, loss, lr
    val.csv           epoch, mean foreground DSC on the validation split
    last.npz best.npz checkpoints
    eval/             metrics.csv (per sample), cases.csv, metrics.json, predictions/
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import platform
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import TABLE6, TABLE7, AblationFlags, ConfigError, ModelConfig, dump_kv
from .data import DataError, SampleRecord, augment, load_dataset, read_manifest
from .encoder import dump_stats
from .losses import combined_loss
from .metrics import MetricsReport, aggregate_reports, segmentation_report, write_csv
from .model import MambaCAFU


class NumericError(RuntimeError):
    """Loss or gradients became non-finite."""


class CheckpointError(ValueError):
    pass


# name -> TrainConfig overrides; "plain-Adam" presets use Adam without decoupled decay
DATASET_PRESETS: dict[str, dict[str, Any]] = {
    "synapse": dict(initial_lr=0.0025, batch_size=18, alpha=0.8, restart_period=2, epochs=100),
    "btcv": dict(initial_lr=0.003, alpha=0.6),
    "acdc": dict(batch_size=12, initial_lr=0.01, epochs=400, alpha=0.6),
    "isic": dict(batch_size=6, initial_lr=0.01, alpha=0.6),
    "glas": dict(batch_size=16, initial_lr=0.1, epochs=100, alpha=0.5, optimizer="adam"),
    "monuseg": dict(batch_size=16, initial_lr=0.1, epochs=100, alpha=0.5, optimizer="adam"),
}

OPTIMIZERS = ("adamw", "adam")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.6
    batch_size: int = 8
    initial_lr: float = 1e-3
    epochs: int = 10
    max_steps: int = 0  # 0 = no step cap
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    restart_period: int = 2  # epochs per warm-restart cycle
    seed: int = 0
    deterministic: bool = True
    augment: bool = True
    train_manifest: str = ""
    val_manifest: str = ""  # empty = validate on the (unaugmented) training split
    val_every: int = 1
    out_dir: str = "runs"
    run_id: str = ""
    device: str = "cpu"

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def preset(cls, dataset: str, model: ModelConfig | None = None, **overrides: Any) -> "TrainConfig":
        try:
            values = dict(DATASET_PRESETS[dataset.lower()])
        except KeyError:
            raise ConfigError([f"unknown dataset preset {dataset!r}"]) from None
        values.update(overrides)
        return cls(model=model or ModelConfig(), **values)

    def to_kv(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        return {**self.model.to_dict(), **d}

    @classmethod
    def from_kv(cls, values: Mapping[str, Any]) -> "TrainConfig":
        """Build from flat keys: training fields, model fields, ablation flags, ``dataset``."""
        values = dict(values)
        train_keys = {f.name for f in dataclasses.fields(cls)} - {"model"}
        base: dict[str, Any] = {}
        if "dataset" in values:
            name = str(values.pop("dataset"))
            if name.lower() not in DATASET_PRESETS:
                raise ConfigError([f"unknown dataset preset {name!r}"])
            base.update(DATASET_PRESETS[name.lower()])
        base.update({k: values.pop(k) for k in list(values) if k in train_keys})
        if values.get("tiny"):
            model_base = ModelConfig.tiny_config(int(values.get("num_classes", 2)),
                                                 int(values.get("input_size", 64))).to_dict()
        else:
            model_base = ModelConfig().to_dict()
        model_base.update(values)
        if "stage_channels" in model_base and not isinstance(model_base["stage_channels"], (list, tuple)):
            model_base["stage_channels"] = [model_base["stage_channels"]]
        model = ModelConfig.from_dict(model_base)
        if "seed" in base:
            model = model.replace(seed=int(base["seed"]))
        casts = {"int": int, "float": float, "bool": bool, "str": str}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        try:
            base = {k: casts[types[k]](v) for k, v in base.items()}
        except (TypeError, ValueError) as err:
            raise ConfigError([f"bad training value: {err}"]) from err
        return cls(model=model, **base)


def validate_train_config(cfg: TrainConfig) -> list[str]:
    from .config import validate_config

    out = list(validate_config(cfg.model))
    if not 0.0 <= cfg.alpha <= 1.0:
        out.append("alpha outside [0, 1]")
    if cfg.batch_size < 1:
        out.append("batch_size must be >= 1")
    if cfg.initial_lr <= 0:
        out.append("initial_lr must be positive")
    if cfg.epochs < 0 or cfg.max_steps < 0:
        out.append("epochs and max_steps must be >= 0")
    if cfg.optimizer not in OPTIMIZERS:
        out.append(f"optimizer must be one of {OPTIMIZERS}")
    if cfg.restart_period < 1:
        out.append("restart_period must be >= 1")
    return out


def check_train_config(cfg: TrainConfig) -> TrainConfig:
    problems = validate_train_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


@dataclass
class RunArtifacts:
    run_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    log_csv: Path
    val_csv: Path
    config_path: Path
    env_path: Path
    steps: int = 0
    best_dsc: float = math.nan


# -- reproducibility ---------------------------------------------------------------

def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=False)
    if deterministic:
        torch.set_num_threads(1)


def environment_snapshot(cfg: TrainConfig) -> dict[str, Any]:
    return {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__,
            "platform": platform.platform(), "seed": cfg.seed, "deterministic": cfg.deterministic,
            "threads": torch.get_num_threads(), "device": cfg.device}


def run_id_for(cfg: TrainConfig) -> str:
    if cfg.run_id:
        return cfg.run_id
    digest = hashlib.sha1(dump_kv({k: v for k, v in cfg.to_kv().items() if k != "out_dir"}).encode())
    return f"{cfg.model.variant}-s{cfg.seed}-{digest.hexdigest()[:8]}"


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: MambaCAFU, step: int, seed: int,
                    extra: Mapping[str, Any] | None = None) -> Path:
    """Named arrays for every state tensor plus a JSON ``__meta__`` record."""
    meta = {"config": model.cfg.to_dict(), "seed": seed, "step": step, **(extra or {})}
    arrays = {f"state/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        with np.load(path) as archive:
            meta = json.loads(str(archive["__meta__"]))
            state = {k[len("state/"):]: archive[k] for k in archive.files if k.startswith("state/")}
    except (OSError, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: not a checkpoint ({err})") from err
    return state, meta


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None,
                    device: str = "cpu") -> tuple[MambaCAFU, dict[str, Any]]:
    """Rebuild the model (from ``cfg`` or the stored snapshot) and load weights after a shape check."""
    state, meta = read_checkpoint(path)
    cfg = cfg or ModelConfig.from_dict(meta["config"])
    model = MambaCAFU(cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    bad = [f"{k}: checkpoint {tuple(state[k].shape)} vs model {expected[k]}"
           for k in expected if k in state and tuple(state[k].shape) != expected[k]]
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if bad or missing or unexpected:
        detail = bad[:3] + [f"missing {m}" for m in missing[:3]] + [f"unexpected {u}" for u in unexpected[:3]]
        raise CheckpointError(f"{path}: checkpoint does not match the config: " + "; ".join(detail))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})
    return model.to(device), meta


# -- batching ----------------------------------------------------------------------

def to_batch(samples: Sequence[SampleRecord], device: str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack([s.mask for s in samples])
    return (torch.from_numpy(np.ascontiguousarray(images)).float().to(device),
            torch.from_numpy(masks).long().to(device))


def _check_samples(samples: Sequence[SampleRecord], cfg: ModelConfig, what: str) -> None:
    if not samples:
        raise DataError(f"{what}: manifest has no samples")
    for s in samples:
        if s.image.shape[:2] != (cfg.input_size, cfg.input_size) or s.image.shape[2] != cfg.in_channels:
            raise DataError(f"sample {s.id}: image {s.image.shape} does not match input_size="
                            f"{cfg.input_size}, in_channels={cfg.in_channels}")


def predict(model: nn.Module, samples: Sequence[SampleRecord], batch_size: int = 8,
            device: str = "cpu") -> list[np.ndarray]:
    """Label maps (argmax, or threshold 0 for a single logit channel)."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            images, _ = to_batch(samples[i:i + batch_size], device)
            logits = model(images)
            labels = (logits[:, 0] > 0).long() if logits.shape[1] == 1 else logits.argmax(1)
            out.extend(labels.cpu().numpy())
    model.train(was_training)
    return out


def mean_dsc(model: nn.Module, samples: Sequence[SampleRecord], num_classes: int,
             batch_size: int = 8, device: str = "cpu") -> float:
    preds = predict(model, samples, batch_size, device)
    return float(np.mean([segmentation_report(p, s.mask, num_classes).mean_dsc for p, s in zip(preds, samples)]))


# -- training ----------------------------------------------------------------------

def make_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.initial_lr)
    return torch.optim.AdamW(params, lr=cfg.initial_lr, weight_decay=cfg.weight_decay)


def make_scheduler(cfg: TrainConfig, optimizer) -> torch.optim.lr_scheduler.CosineAnnealingWarmRestarts:
    return torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(optimizer, T_0=cfg.restart_period)


def lr_at(cfg: TrainConfig, epoch_fraction: float) -> float:
    """Closed-form learning rate at a (fractional) epoch; zero floor, period ``restart_period``."""
    t = epoch_fraction % cfg.restart_period
    return cfg.initial_lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.restart_period))


def _dump_diagnostics(path: Path, images, masks, feats: dict[str, torch.Tensor] | None, step: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"step": step, "batch": int(images.shape[0]),
                             "labels": sorted(int(v) for v in masks.unique())}) + "\n")
        dump_stats({"image": images, **(feats or {})}, fh)


def _load_split(path: str, cfg: ModelConfig, what: str) -> list[SampleRecord]:
    if not path:
        raise DataError(f"{what}: no manifest given")
    manifest = read_manifest(path)
    if manifest.num_classes != max(cfg.num_classes, 2):
        raise DataError(f"{what}: manifest has {manifest.num_classes} classes, model expects {cfg.num_classes}")
    samples = load_dataset(manifest)
    _check_samples(samples, cfg, what)
    return samples


def load_backbone_weights(model: MambaCAFU, cnn: str | None = None, transformer: str | None = None,
                          allow_partial: bool = False) -> None:
    from .backbones import load_weights

    for path, module, what in ((cnn, model.encoder.cnn, "cnn"), (transformer, model.encoder.transformer,
                                                                 "transformer")):
        if not path:
            continue
        if module is None:
            raise ConfigError([f"{what} weights given but the {what} branch is disabled"])
        try:
            load_weights(module, path, allow_partial)
        except OSError as err:
            raise DataError(f"{what} weights: {err}") from err
        except ValueError as err:
            raise ConfigError([f"{what} weights: {err}"]) from err


def train(cfg: TrainConfig, train_samples: Sequence[SampleRecord] | None = None,
          val_samples: Sequence[SampleRecord] | None = None,
          backbone_weights: tuple[str | None, str | None] = (None, None),
          allow_partial: bool = False) -> RunArtifacts:
    """Optimise, logging every step and validating every ``val_every`` epochs.

    Samples may be passed directly; otherwise they are read from the manifests.
    ``backbone_weights`` are optional (cnn, transformer) weight archives.
    """
    check_train_config(cfg)
    mcfg = cfg.model.replace(seed=cfg.seed)
    if train_samples is None:
        train_samples = _load_split(cfg.train_manifest, mcfg, "train")
    _check_samples(train_samples, mcfg, "train")
    if val_samples is None:
        val_samples = _load_split(cfg.val_manifest, mcfg, "val") if cfg.val_manifest else train_samples
    train_samples = sorted(train_samples, key=lambda s: s.id)

    seed_everything(cfg.seed, cfg.deterministic)
    run_dir = Path(cfg.out_dir) / run_id_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(run_dir, run_dir / "last.npz", None, run_dir / "log.csv", run_dir / "val.csv",
                       run_dir / "config.txt", run_dir / "env.json")
    art.config_path.write_text(dump_kv(cfg.to_kv()))
    art.env_path.write_text(json.dumps(environment_snapshot(cfg), indent=1, sort_keys=True))

    model = MambaCAFU(mcfg)
    load_backbone_weights(model, *backbone_weights, allow_partial=allow_partial)
    model = model.to(cfg.device)
    optimizer = make_optimizer(cfg, model.parameters())
    scheduler = make_scheduler(cfg, optimizer)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)

    step, best = 0, -math.inf
    save_checkpoint(art.last_checkpoint, model, 0, cfg.seed, {"epoch": 0})
    with open(art.log_csv, "w", newline="") as log_fh, open(art.val_csv, "w", newline="") as val_fh:
        log = csv.writer(log_fh, lineterminator="\n")
        log.writerow(["step", "epoch", "loss", "lr"])
        val_log = csv.writer(val_fh, lineterminator="\n")
        val_log.writerow(["epoch", "step", "mean_dsc"])
        epoch = 0
        while step < total:
            model.train()
            order = rng.permutation(len(train_samples))
            for i in range(steps_per_epoch):
                if step >= total:
                    break
                batch = [train_samples[j] for j in order[i * cfg.batch_size:(i + 1) * cfg.batch_size]]
                if cfg.augment:
                    batch = [augment(s, rng) for s in batch]
                images, masks = to_batch(batch, cfg.device)
                lr = optimizer.param_groups[0]["lr"]
                feats = model.forward_features(images)
                loss = combined_loss(feats["logits"], masks, cfg.alpha)
                if not torch.isfinite(loss):
                    _dump_diagnostics(run_dir / "nan_dump.jsonl", images, masks, feats, step)
                    raise NumericError(f"non-finite loss at step {step}; batch statistics in "
                                       f"{run_dir / 'nan_dump.jsonl'}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
                scheduler.step(epoch + (i + 1) / steps_per_epoch)
                log.writerow([step, epoch, f"{loss.item():.8g}", f"{lr:.8g}"])
            epoch += 1
            if epoch % cfg.val_every == 0 or step >= total:
                score = mean_dsc(model, val_samples, mcfg.num_classes, cfg.batch_size, cfg.device)
                val_log.writerow([epoch, step, f"{score:.8g}"])
                if score > best:
                    best = score
                    art.best_checkpoint = save_checkpoint(run_dir / "best.npz", model, step, cfg.seed,
                                                          {"epoch": epoch, "val_dsc": score})
            log_fh.flush()
    save_checkpoint(art.last_checkpoint, model, step, cfg.seed, {"epoch": epoch})
    art.steps, art.best_dsc = step, best if step else math.nan
    return art


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalResult:
    overall: MetricsReport
    per_sample: list[tuple[str, str, MetricsReport]]  # (sample id, case id, report)
    per_case: dict[str, MetricsReport]
    out_dir: Path | None = None


def evaluate_model(model: MambaCAFU, samples: Sequence[SampleRecord], batch_size: int = 8,
                   device: str = "cpu", out_dir: str | Path | None = None,
                   metadata: Mapping[str, Any] | None = None) -> EvalResult:
    if not samples:
        raise DataError("evaluation manifest has no samples")
    num_classes = model.cfg.num_classes
    samples = sorted(samples, key=lambda s: s.id)
    _check_samples(samples, model.cfg, "eval")
    preds = predict(model, samples, batch_size, device)
    per_sample = [(s.id, s.case_id, segmentation_report(p, s.mask, num_classes, s.spacing))
                  for p, s in zip(preds, samples)]
    by_case: dict[str, list[MetricsReport]] = defaultdict(list)
    for _, case, rep in per_sample:
        by_case[case].append(rep)
    per_case = {c: aggregate_reports(r, {"case_id": c, "slices": len(r)}) for c, r in sorted(by_case.items())}
    meta = {"samples": len(samples), "cases": len(per_case),
            "hd95": "per-slice, averaged within a case", **(metadata or {})}
    overall = aggregate_reports(list(per_case.values()), meta)
    result = EvalResult(overall, per_sample, per_case)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "predictions").mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w") as fh:
            write_csv([{"sample_id": sid, **r.csv_row(case)} for sid, case, r in per_sample], fh)
        with open(out / "cases.csv", "w") as fh:
            write_csv([r.csv_row(c) for c, r in per_case.items()], fh)
        (out / "metrics.json").write_text(overall.to_json())
        from PIL import Image

        for p, s in zip(preds, samples):
            Image.fromarray(p.astype(np.uint8)).save(out / "predictions" / f"{s.id}.png")
        result.out_dir = out
    return result


def evaluate(checkpoint: str | Path, manifest: str | Path, out_dir: str | Path,
             cfg: ModelConfig | None = None, batch_size: int = 8, device: str = "cpu") -> EvalResult:
    """Load a checkpoint, predict every manifest entry and write CSV/JSON metrics to ``out_dir``."""
    model, meta = load_checkpoint(checkpoint, cfg, device)
    samples = _load_split(str(manifest), model.cfg, "eval")
    return evaluate_model(model, samples, batch_size, device, out_dir,
                          {"checkpoint": str(checkpoint), "manifest": str(Path(manifest).resolve()),
                           "step": meta.get("step")})


# -- ablation ----------------------------------------------------------------------

ABLATION_PLANS = {"table6": TABLE6, "table7": TABLE7}
FLAG_NAMES = tuple(f.name for f in dataclasses.fields(AblationFlags))


def resolve_plan(plan: str) -> list[tuple[str, AblationFlags]]:
    """``table6``, ``table7``, ``all`` or a comma list such as ``table6:Baseline,table7:full``."""
    plan = plan.strip()
    if plan in ABLATION_PLANS:
        return list(ABLATION_PLANS[plan].items())
    if plan == "all":
        return [(f"{t}:{n}", f) for t, rows in ABLATION_PLANS.items() for n, f in rows.items()]
    out = []
    for item in filter(None, (p.strip() for p in plan.split(","))):
        table, _, name = item.partition(":")
        rows = ABLATION_PLANS.get(table)
        if rows is None or name not in rows:
            known = ", ".join(f"{t}:{n}" for t, r in ABLATION_PLANS.items() for n in r)
            raise ConfigError([f"unknown ablation variant {item!r}; known: {known}"])
        out.append((item, rows[name]))
    if not out:
        raise ConfigError(["empty ablation plan"])
    return out


@dataclass
class AblationRow:
    variant: str
    flags: AblationFlags
    dsc: float
    run_dir: Path | None = None

    def as_dict(self) -> dict[str, Any]:
        return {"variant": self.variant, **dataclasses.asdict(self.flags), "dsc": self.dsc}


def ablate(base: TrainConfig, plan: str, train_samples: Sequence[SampleRecord] | None = None,
           val_samples: Sequence[SampleRecord] | None = None) -> list[AblationRow]:
    """Train and validate each variant of ``plan`` with the same seed, data and budget."""
    variants = resolve_plan(plan)
    rows = []
    for name, flags in variants:
        slug = name.replace(":", "-").replace("/", "").replace("+", "p").replace(" ", "_")
        cfg = base.replace(model=base.model.replace(ablation=flags),
                           run_id=f"{base.run_id or 'ablate'}-{slug}")
        art = train(cfg, train_samples, val_samples)
        model, _ = load_checkpoint(art.best_checkpoint or art.last_checkpoint, device=cfg.device)
        vs = val_samples
        if vs is None:
            vs = _load_split(cfg.val_manifest or cfg.train_manifest, model.cfg, "val")
        res = evaluate_model(model, vs, cfg.batch_size, cfg.device, art.run_dir / "eval", {"variant": name})
        rows.append(AblationRow(name, flags, res.overall.mean_dsc, art.run_dir))
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w") as fh:
        write_csv([r.as_dict() for r in rows], fh)
    (out / "ablation.md").write_text(ablation_table(rows))
    return rows


def _mark(v: bool) -> str:
    return "x" if v else ""


def ablation_table(rows: Sequence[AblationRow]) -> str:
    head = "| variant | " + " | ".join(FLAG_NAMES) + " | DSC |"
    lines = [head, "|" + "---|" * (len(FLAG_NAMES) + 2)]
    for r in rows:
        flags = " | ".join(_mark(getattr(r.flags, n)) for n in FLAG_NAMES)
        lines.append(f"| {r.variant} | {flags} | {r.dsc * 100:.2f} |")
    return "\n".join(lines) + "\n"


# -- reports -----------------------------------------------------------------------

PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60]],
                   np.uint8)


def overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Draw each predicted class boundary over the image in its palette colour."""
    from .metrics import boundary

    img = image if image.ndim == 3 else image[:, :, None]
    rgb = (np.clip(img[:, :, :3] if img.shape[2] >= 3 else img.repeat(3, 2), 0, 1) * 255).astype(np.uint8)
    for c in np.unique(labels):
        if c == 0:
            continue
        rgb[boundary(labels == c)] = PALETTE[int(c) % len(PALETTE)]
    return rgb


@dataclass
class ReportResult:
    markdown: str
    rows: list[dict[str, Any]]
    skipped: dict[str, str]


def _read_flags(run_dir: Path) -> dict[str, Any]:
    from .config import load_kv

    path = run_dir / "config.txt"
    return load_kv(path) if path.exists() else {}


def report(run_dirs: Sequence[str | Path], out_path: str | Path | None = None,
           overlays: bool = False) -> ReportResult:
    """Collect ``eval/metrics.json`` from each run into one markdown table.

    Runs without metrics are listed as skipped. With ``overlays`` the saved
    predictions are drawn over their inputs into ``<run>/eval/overlays/``.
    """
    rows, skipped = [], {}
    for rd in map(Path, run_dirs):
        metrics = rd / "eval" / "metrics.json"
        if not metrics.exists():
            skipped[str(rd)] = "missing eval/metrics.json"
            continue
        m = json.loads(metrics.read_text())
        flags = _read_flags(rd)
        row = {"run": rd.name, **{n: flags.get(n, "") for n in FLAG_NAMES},
               "mean_dsc": m["mean_dsc"], "mean_iou": m["mean_iou"], "accuracy": m["accuracy"],
               "mean_hd95": m["mean_hd95"]}
        rows.append(row)
        if overlays:
            _write_overlays(rd / "eval", m.get("metadata", {}).get("manifest"))
    lines = ["| run | " + " | ".join(FLAG_NAMES) + " | DSC | IoU | Acc | HD95 |",
             "|" + "---|" * (len(FLAG_NAMES) + 5)]
    for r in rows:
        flags = " | ".join(_mark(r[n]) if isinstance(r[n], bool) else str(r[n]) for n in FLAG_NAMES)
        lines.append(f"| {r['run']} | {flags} | {r['mean_dsc'] * 100:.2f} | {r['mean_iou'] * 100:.2f} | "
                     f"{r['accuracy'] * 100:.2f} | {r['mean_hd95']:.2f} |")
    if skipped:
        lines += ["", "Skipped runs:"] + [f"- {k}: {v}" for k, v in skipped.items()]
    md = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(md)
    return ReportResult(md, rows, skipped)


def _write_overlays(eval_dir: Path, manifest_path: str | None) -> None:
    from PIL import Image

    if not manifest_path or not Path(manifest_path).exists():
        return
    out = eval_dir / "overlays"
    out.mkdir(exist_ok=True)
    for s in load_dataset(manifest_path):
        pred = eval_dir / "predictions" / f"{s.id}.png"
        if pred.exists():
            with Image.open(pred) as im:
                labels = np.asarray(im)
            Image.fromarray(overlay(s.image, labels)).save(out / f"{s.id}.png")
