"""Joint training of the curve branch and the video branch.

Each case is preprocessed once (clip selection, earliest-enhanced curve
extraction, frame resizing) and cached; the two branches then train jointly
under the weighted sum of the feature-alignment loss and the focal
classification loss, with momentum SGD, a cosine learning-rate schedule with
linear warm-up, and gradient clipping as a divergence guard. Checkpoints are
single files in a documented little-endian layout. The cross-validation
driver trains one model per stratified fold and aggregates the reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import eedetect, objectives, synthgen, ticselect
from .cmtnet import Classifier, CmtConfig, CmtNet
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     ParameterError, ShapeError)
from .eticnet import EticConfig, EticNet
from .objectives import LossConfig, aggregate_folds, compute_metrics
from .video import BimodalVideo

CHECKPOINT_MAGIC = b"BVCKPT01"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    lr: float = 2e-3
    weight_decay: float = 0.05
    momentum: float = 0.9
    warmup_epochs: float = 2.5
    mmd_weight: float = objectives.DEFAULT_MMD_WEIGHT
    focal_alpha: float = objectives.DEFAULT_FOCAL_ALPHA
    focal_gamma: float = objectives.DEFAULT_FOCAL_GAMMA
    grad_clip: float = 5.0
    seed: int = 0
    micro: bool = False
    clinical_dim: int = 0
    # preprocessing
    frames: int = 32
    sg_window: int = 31
    sg_order: int = 2
    grad_threshold: float = 0.2
    tau_wall: float = 0.8
    tau_nwall: float = 0.6

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ParameterError("rates must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ParameterError("warm-up must be shorter than the run")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.mmd_weight, self.focal_alpha, self.focal_gamma)

    @property
    def video_size(self):
        return (32, 64) if self.micro else (224, 448)

    @property
    def temporal_stride(self) -> int:
        return 8 if self.micro else 1


_CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat key = value format (# starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            if kind in ("int", int):
                values[key] = int(val)
            elif kind in ("float", float):
                values[key] = float(val)
            elif kind in ("bool", bool):
                if val.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1")
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def read_config_file(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def write_config_file(path, config: TrainConfig) -> None:
    lines = [f"{name} = {getattr(config, name)}"
             for name in _CONFIG_TYPES]
    Path(path).write_text("\n".join(lines) + "\n")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up to the base rate, then cosine decay to zero."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if warmup > 0 and step <= warmup:
        return config.lr * step / warmup
    progress = (step - warmup) / max(total - warmup, 1e-12)
    progress = min(max(progress, 0.0), 1.0)
    return config.lr * (1.0 + math.cos(math.pi * progress)) / 2.0


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessedCase:
    case_id: str
    tics: np.ndarray        # (6, frames) raw intensities
    video: np.ndarray       # (3, T, vh, vw) in [0, 1]
    label: int
    clinical: np.ndarray | None = None


def _resize_stack(frames: np.ndarray, size) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(frames)).float().unsqueeze(1)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)[:, 0]


def prepare_case(case: synthgen.Case, config: TrainConfig,
                 case_id: str | None = None) -> PreprocessedCase:
    """Clip selection + earliest-enhanced curves + resized model input."""
    clip, _ = ticselect.select_clip(case.video, window=config.sg_window,
                                    order=config.sg_order,
                                    threshold=config.grad_threshold,
                                    frames=config.frames)
    enhanced = eedetect.earliest_enhanced_tics(clip, tau_wall=config.tau_wall,
                                               tau_nwall=config.tau_nwall,
                                               threshold=config.grad_threshold)
    tics = enhanced.tics().astype(np.float32)

    vh, vw = config.video_size
    half = vw // 2
    gs = _resize_stack(clip.gsus, (vh, half))
    ce = _resize_stack(clip.ceus, (vh, half))
    video = torch.cat([gs, ce], dim=2)[::config.temporal_stride]
    video = (video / 255.0).unsqueeze(0).repeat(3, 1, 1, 1).numpy()

    clinical = case.clinical
    if clinical is not None and config.clinical_dim:
        clinical = np.asarray(clinical, dtype=np.float32)[:config.clinical_dim]
    else:
        clinical = None
    return PreprocessedCase(
        case_id=case_id or (str(case.path) if case.path else "case"),
        tics=tics, video=video.astype(np.float32),
        label=case.class_label, clinical=clinical)


def _prep_cache_key(case_id: str, config: TrainConfig) -> str:
    payload = json.dumps({
        "id": case_id, "frames": config.frames, "sg": [config.sg_window, config.sg_order],
        "thr": [config.grad_threshold, config.tau_wall, config.tau_nwall],
        "size": config.video_size, "stride": config.temporal_stride,
        "clinical": config.clinical_dim}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def prepare_cases(sources, config: TrainConfig, cache_dir=None) -> list:
    """Preprocess case directories or in-memory cases, with optional caching."""
    out = []
    cache_dir = Path(cache_dir) if cache_dir else None
    if cache_dir:
        cache_dir.mkdir(parents=True, exist_ok=True)
    for src in sources:
        if isinstance(src, PreprocessedCase):
            out.append(src)
            continue
        if isinstance(src, synthgen.Case):
            case, case_id = src, str(src.path) if src.path else f"mem{len(out)}"
        else:
            case = synthgen.read_case(src)
            case_id = str(src)
        cache_file = None
        if cache_dir:
            cache_file = cache_dir / f"{_prep_cache_key(case_id, config)}.npz"
            if cache_file.is_file():
                with np.load(cache_file, allow_pickle=False) as z:
                    out.append(PreprocessedCase(
                        case_id=case_id, tics=z["tics"], video=z["video"],
                        label=int(z["label"]),
                        clinical=z["clinical"] if z["clinical"].size else None))
                continue
        prep = prepare_case(case, config, case_id=case_id)
        if cache_file:
            np.savez(cache_file, tics=prep.tics, video=prep.video,
                     label=prep.label,
                     clinical=prep.clinical if prep.clinical is not None
                     else np.empty(0, dtype=np.float32))
        out.append(prep)
    return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class DualBranchModel(nn.Module):
    """Curve branch + video branch + fused classifier."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.train_config = config
        self.etic = EticNet(EticConfig(tic_length=config.frames))
        self.cmt = CmtNet(CmtConfig.micro() if config.micro else CmtConfig())
        self.head = Classifier(feature_dim=512, clinical_dim=config.clinical_dim)

    def forward(self, tics, video, clinical=None):
        z_tic = self.etic(tics)
        z_bus = self.cmt(video)
        logit = self.head(z_tic, z_bus, clinical)
        return logit, z_tic, z_bus


def _batch_tensors(batch, config: TrainConfig):
    tics = torch.from_numpy(np.stack([c.tics for c in batch])) / 255.0
    video = torch.from_numpy(np.stack([c.video for c in batch]))
    labels = torch.tensor([float(c.label) for c in batch])
    clinical = None
    if config.clinical_dim:
        clinical = torch.from_numpy(
            np.stack([np.asarray(c.clinical, dtype=np.float32) for c in batch]))
    return tics, video, labels, clinical


# ---------------------------------------------------------------------------
# Checkpoint format: magic, u32 meta length, JSON metadata, raw arrays
# ---------------------------------------------------------------------------

def _array_payload(state: dict, prefix: str):
    entries, blobs = [], []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": f"{prefix}/{name}", "dtype": str(arr.dtype),
                        "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    return entries, blobs


def save_checkpoint(path, model: nn.Module, optimizer=None,
                    config: TrainConfig | None = None, epoch: int = 0,
                    history=None, extra=None) -> Path:
    entries, blobs = _array_payload(model.state_dict(), "model")
    if optimizer is not None:
        momentum = {}
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                if "momentum_buffer" in st and st["momentum_buffer"] is not None:
                    momentum[names[id(p)]] = st["momentum_buffer"]
        om_entries, om_blobs = _array_payload(momentum, "momentum")
        entries += om_entries
        blobs += om_blobs
    meta = {
        "format_version": 1,
        "epoch": epoch,
        "config": dataclasses.asdict(config) if config else None,
        "history": history or [],
        "extra": extra or {},
        "arrays": entries,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Returns (meta dict, {array name: np.ndarray})."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        try:
            meta = json.loads(fh.read(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt metadata ({exc})") from exc
        arrays = {}
        for entry in meta["arrays"]:
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(
                entry["shape"]).astype(np.dtype(entry["dtype"]))
    return meta, arrays


def model_from_checkpoint(path):
    """Rebuild the model (and config) stored in a checkpoint file."""
    meta, arrays = load_checkpoint(path)
    if not meta.get("config"):
        raise CheckpointError(f"{path}: checkpoint carries no configuration")
    config = TrainConfig(**meta["config"])
    model = DualBranchModel(config)
    state = {name[len("model/"):]: torch.from_numpy(arr.copy())
             for name, arr in arrays.items() if name.startswith("model/")}
    model.load_state_dict(state)
    return model, config, meta


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DualBranchModel
    best_epoch: int
    best_val_auc: float
    history: list
    checkpoint_path: Path | None = None


def _evaluate_scores(model: DualBranchModel, cases, config: TrainConfig):
    model.eval()
    scores, labels, losses = [], [], []
    loss_cfg = config.loss
    with torch.no_grad():
        for start in range(0, len(cases), config.batch_size):
            batch = cases[start:start + config.batch_size]
            tics, video, y, clinical = _batch_tensors(batch, config)
            logit, z_tic, z_bus = model(tics, video, clinical)
            mmd = objectives.mmd_loss(z_tic, z_bus)
            fl = objectives.focal_loss(logit, y, loss_cfg.focal_alpha,
                                       loss_cfg.focal_gamma)
            losses.append(float(objectives.total_loss(mmd, fl, loss_cfg.mmd_weight)))
            scores.extend(torch.sigmoid(logit).reshape(-1).tolist())
            labels.extend(int(v) for v in y.tolist())
    return np.asarray(scores), np.asarray(labels), float(np.mean(losses))


def evaluate(model: DualBranchModel, cases, config: TrainConfig,
             threshold: float = 0.5):
    scores, labels, _ = _evaluate_scores(model, cases, config)
    return compute_metrics(scores, labels, threshold=threshold)


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train(config: TrainConfig, train_cases, val_cases,
          out_dir=None) -> TrainResult:
    """Optimize both branches jointly; keep the best-validation-AUC state."""
    if not train_cases:
        raise ParameterError("training set is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = DualBranchModel(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=0.0,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    loss_cfg = config.loss
    steps_per_epoch = math.ceil(len(train_cases) / config.batch_size)
    history = []
    best = {"auc": -1.0, "epoch": -1, "state": None}
    global_step = 0

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train_cases))
        epoch_losses = []
        etic_gnorm = cmt_gnorm = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_cases[i] for i in order[start:start + config.batch_size]]
            tics, video, y, clinical = _batch_tensors(batch, config)
            logit, z_tic, z_bus = model(tics, video, clinical)
            mmd = objectives.mmd_loss(z_tic, z_bus)
            fl = objectives.focal_loss(logit, y, loss_cfg.focal_alpha,
                                       loss_cfg.focal_gamma)
            loss = objectives.total_loss(mmd, fl, loss_cfg.mmd_weight)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {global_step}: {loss}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            etic_gnorm = max(etic_gnorm, _grad_norm(model.etic.parameters()))
            cmt_gnorm = max(cmt_gnorm, _grad_norm(model.cmt.parameters()))
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            current_lr = lr_at(global_step, config, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = current_lr
            optimizer.step()
            epoch_losses.append(loss.item())
            global_step += 1

        val_scores, val_labels, val_loss = _evaluate_scores(model, val_cases, config) \
            if val_cases else (np.empty(0), np.empty(0), float("nan"))
        val_auc = None
        if val_cases:
            try:
                val_auc = objectives.roc_auc(val_scores, val_labels)
            except Exception:
                val_auc = None
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "val_auc": val_auc,
            "lr": lr_at(global_step, config, steps_per_epoch),
            "grad_norm_etic": etic_gnorm,
            "grad_norm_cmt": cmt_gnorm,
        })
        score = val_auc if val_auc is not None else -float(np.mean(epoch_losses))
        if score > best["auc"]:
            best.update(auc=score, epoch=epoch,
                        state={k: v.detach().clone()
                               for k, v in model.state_dict().items()})

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save_checkpoint(
            Path(out_dir) / "checkpoint.bvck", model, optimizer, config,
            epoch=best["epoch"], history=history)
    return TrainResult(model=model, best_epoch=best["epoch"],
                       best_val_auc=best["auc"], history=history,
                       checkpoint_path=checkpoint_path)


def run_cv(config: TrainConfig, cases, k: int = 5, out_dir=None):
    """Stratified k-fold cross-validation; one model per fold."""
    labels = [c.label for c in cases]
    per_class = {lab: labels.count(lab) for lab in set(labels)}
    if any(n < k for n in per_class.values()):
        raise ParameterError(f"need at least {k} cases per class, got {per_class}")
    ids = [c.case_id for c in cases]
    folds = objectives.kfold_split(ids, labels, k=k, seed=config.seed)
    by_id = {c.case_id: c for c in cases}
    fold_reports, results = [], []
    for i, fold_ids in enumerate(folds):
        val = [by_id[cid] for cid in fold_ids]
        tr = [c for c in cases if c.case_id not in set(fold_ids)]
        fold_out = Path(out_dir) / f"fold{i}" if out_dir is not None else None
        result = train(config, tr, val, out_dir=fold_out)
        fold_reports.append(evaluate(result.model, val, config))
        results.append(result)
    return aggregate_folds(fold_reports), results
