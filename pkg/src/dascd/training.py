"""End-to-end training, evaluation, prediction and gradient checking.

A run is fully described by a :class:`RunConfig`; every field has a default
and all randomness (weight init, data order) flows from the single seed, so
identical configs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attention import ChannelAttention, SpatialAttention, fuse
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .data import (
    DatasetManifest,
    ImagePair,
    SyntheticConfig,
    load_pair,
    parse_manifest,
    synthetic_dataset,
)
from .encoder import EncoderConfig, SiamConvEncoder
from .losses import (
    LossConfig,
    class_weights,
    contrastive_loss,
    downsample_labels,
    pixel_distance,
    total_loss,
    wdmc_loss,
)
from .metrics import MetricsReport, confusion, metrics, threshold


class TrainingError(RuntimeError):
    """Training hit a contract violation (non-finite loss, bad data)."""


@dataclass
class RunConfig:
    # encoder
    channels: tuple[int, ...] = (16, 32, 32)
    kernel_size: int = 3
    downsample: tuple[bool, ...] = (True, False, False)
    # attention switches (both off reproduces the plain Siamese baseline)
    spatial: bool = True
    channel: bool = True
    # loss
    loss: str = "wdmc"              # "wdmc" or "contrastive"
    metric: str = "l2"              # "l2" or "cosine"
    m1: float = 0.3
    m2: float = 2.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    weight_mode: str = "dataset"    # "dataset" or "manual"
    w1: float = 1.0
    w2: float = 1.0
    reduction: str = "mean"
    # optimisation
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    # decisioning; None means the (m1+m2)/2 midpoint
    threshold: float | None = None
    # paths
    data: str = ""
    out: str = ""

    def validate(self) -> None:
        if self.loss not in ("wdmc", "contrastive"):
            raise ValueError(f"unknown loss mode {self.loss!r}")
        if self.metric not in ("l2", "cosine"):
            raise ValueError(f"unknown distance metric {self.metric!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.encoder_config().validate()
        self.loss_config().validate()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(blocks=len(self.channels), channels=tuple(self.channels),
                             kernel_size=self.kernel_size, downsample=tuple(self.downsample))

    def loss_config(self) -> LossConfig:
        return LossConfig(m1=self.m1, m2=self.m2, w1=self.w1, w2=self.w2,
                          lambda1=self.lambda1, lambda2=self.lambda2,
                          lambda3=self.lambda3, reduction=self.reduction)

    def decision_threshold(self) -> float:
        return self.threshold if self.threshold is not None else 0.5 * (self.m1 + self.m2)

    # -- plain-text serialisation (key=value per line) ------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("channels",):
                value = ",".join(str(v) for v in value)
            elif f.name == "downsample":
                value = ",".join("true" if v else "false" for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = "auto"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _coerce(key, value))
        return cfg


def _coerce(key: str, value: str):
    if key == "channels":
        return tuple(int(v) for v in value.split(","))
    if key == "downsample":
        return tuple(v.strip().lower() in ("true", "1", "yes") for v in value.split(","))
    if key in ("spatial", "channel"):
        return value.lower() in ("true", "1", "yes")
    if key in ("loss", "metric", "weight_mode", "reduction", "data", "out"):
        return value
    if key in ("kernel_size", "batch_size", "epochs", "seed"):
        return int(value)
    if key == "threshold":
        return None if value in ("auto", "") else float(value)
    return float(value)


# -- the model -------------------------------------------------------------------


@dataclass
class PairForward:
    """Per-branch features retained for deep supervision."""
    f0: Tensor
    f1: Tensor
    sa0: Tensor | None
    sa1: Tensor | None
    ca0: Tensor | None
    ca1: Tensor | None
    final0: Tensor
    final1: Tensor


class SiameseChangeNet:
    """Siamese encoder plus optional spatial/channel attention, shared weights."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.encoder = SiamConvEncoder(cfg.encoder_config(), rng)
        c = self.encoder.out_channels
        self.spatial = SpatialAttention(c, rng) if cfg.spatial else None
        self.channel = ChannelAttention() if cfg.channel else None

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.parameters())
        if self.spatial is not None:
            params.update(self.spatial.parameters())
        if self.channel is not None:
            params.update(self.channel.parameters())
        return params

    def attention_branch(self, f: Tensor) -> tuple[Tensor | None, Tensor | None, Tensor]:
        """Apply the enabled attention modules; the fused output is the final map."""
        fsa = self.spatial(f)[0] if self.spatial is not None else None
        fca = self.channel(f)[0] if self.channel is not None else None
        if fsa is not None and fca is not None:
            final = fuse(fsa, fca) - f
        elif fsa is not None:
            final = fsa
        elif fca is not None:
            final = fca
        else:
            final = f
        return fsa, fca, final

    def forward_pair(self, t0_chw, t1_chw) -> PairForward:
        feats = self.encoder.encode_pair(t0_chw, t1_chw)
        sa0, ca0, final0 = self.attention_branch(feats.f_t0)
        sa1, ca1, final1 = self.attention_branch(feats.f_t1)
        return PairForward(f0=feats.f_t0, f1=feats.f_t1, sa0=sa0, sa1=sa1,
                           ca0=ca0, ca1=ca1, final0=final0, final1=final1)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag


def pair_loss(model: SiameseChangeNet, fwd: PairForward, y_feat: np.ndarray,
              loss_cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Deep-supervised loss for one pair at feature resolution."""
    cfg = model.cfg

    def stage_loss(a, b):
        d = pixel_distance(a, b, cfg.metric)
        if cfg.loss == "wdmc":
            return wdmc_loss(d, y_feat, loss_cfg)
        return contrastive_loss(d, y_feat, loss_cfg.m2, reduction=loss_cfg.reduction)

    zero = Tensor(0.0)
    l_sa = stage_loss(fwd.sa0, fwd.sa1) if fwd.sa0 is not None else zero
    l_ca = stage_loss(fwd.ca0, fwd.ca1) if fwd.ca0 is not None else zero
    l_e = stage_loss(fwd.final0, fwd.final1)
    combined = total_loss(l_sa, l_ca, l_e, loss_cfg)
    parts = {"l_sa": l_sa.item(), "l_ca": l_ca.item(), "l_e": l_e.item(),
             "total": combined.item()}
    return combined, parts


# -- Adam ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# -- dataset plumbing ------------------------------------------------------------------


@dataclass
class PreparedPair:
    """One sample with tensors laid out for the model."""
    t0: np.ndarray            # 3xHxW
    t1: np.ndarray
    label: np.ndarray         # full-resolution HxW {0,1}
    label_feat: np.ndarray    # label at feature resolution


def prepare_pairs(pairs: list[tuple[ImagePair, np.ndarray]],
                  stride_factor: int) -> list[PreparedPair]:
    prepared = []
    for pair, label in pairs:
        t0, t1 = pair.chw()
        prepared.append(PreparedPair(
            t0=t0, t1=t1, label=np.asarray(label, dtype=np.uint8),
            label_feat=downsample_labels(label, stride_factor)))
    return prepared


def load_split(manifest: DatasetManifest, split: str) -> list[tuple[ImagePair, np.ndarray]]:
    entries = manifest.split(split)
    if not entries:
        raise TrainingError(f"manifest has no {split!r} entries")
    return [load_pair(e) for e in entries]


def resolve_class_weights(cfg: RunConfig,
                          pairs: list[tuple[ImagePair, np.ndarray]]) -> tuple[float, float]:
    """Dataset-frequency weights from the training labels, or manual values."""
    if cfg.weight_mode == "manual":
        return cfg.w1, cfg.w2
    if cfg.weight_mode != "dataset":
        raise ValueError(f"unknown weight_mode {cfg.weight_mode!r}")
    changed = sum(int(np.count_nonzero(label)) for _, label in pairs)
    total = sum(label.size for _, label in pairs)
    return class_weights(changed, total - changed)


# -- checkpoints --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    cfg: RunConfig
    epoch: int
    loss_history: list[float]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the tensor container plus a ``<path>.cfg`` run-config sidecar."""
    path = Path(path)
    blob = dict(ckpt.params)
    blob["meta.epoch"] = np.array([float(ckpt.epoch)])
    blob["meta.loss_history"] = np.array(ckpt.loss_history, dtype=np.float64)
    save_tensors(path, blob)
    Path(str(path) + ".cfg").write_text(ckpt.cfg.to_text(), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = load_tensors(path)
    cfg_path = Path(str(path) + ".cfg")
    if not cfg_path.exists():
        raise TrainingError(f"missing config sidecar {cfg_path}")
    cfg = RunConfig.from_text(cfg_path.read_text(encoding="utf-8"))
    epoch = int(blob.pop("meta.epoch")[0])
    history = list(blob.pop("meta.loss_history"))
    return Checkpoint(params=blob, cfg=cfg, epoch=epoch, loss_history=history)


def model_from_checkpoint(ckpt: Checkpoint) -> SiameseChangeNet:
    model = SiameseChangeNet(ckpt.cfg, np.random.default_rng(0))
    params = model.parameters()
    missing = set(params) - set(ckpt.params)
    extra = set(ckpt.params) - set(params)
    if missing or extra:
        raise TrainingError(
            f"checkpoint does not match config: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    for name, p in params.items():
        if p.data.shape != ckpt.params[name].shape:
            raise TrainingError(
                f"checkpoint tensor {name} has shape {ckpt.params[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = ckpt.params[name].copy()
    return model


# -- training loop -------------------------------------------------------------------------


def train(cfg: RunConfig,
          dataset: list[tuple[ImagePair, np.ndarray]] | None = None) -> Checkpoint:
    """Train a model; the dataset defaults to the manifest's train split."""
    cfg.validate()
    if dataset is None:
        dataset = load_split(parse_manifest(cfg.data), "train")
    if not dataset:
        raise TrainingError("training dataset is empty")

    init_rng = np.random.default_rng([cfg.seed, 0])
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    model = SiameseChangeNet(cfg, init_rng)

    w1, w2 = resolve_class_weights(cfg, dataset) if cfg.loss == "wdmc" else (cfg.w1, cfg.w2)
    cfg_effective = replace(cfg, w1=w1, w2=w2)
    loss_cfg = cfg_effective.loss_config()
    loss_cfg.validate()

    prepared = prepare_pairs(dataset, cfg.encoder_config().stride_factor)
    params = model.parameters()
    state = AdamState()
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(prepared))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            for idx in batch:
                sample = prepared[idx]
                fwd = model.forward_pair(sample.t0, sample.t1)
                loss, parts = pair_loss(model, fwd, sample.label_feat, loss_cfg)
                if not math.isfinite(parts["total"]):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}, "
                        f"sample {idx}: components {parts}")
                loss.backward()
                epoch_losses.append(parts["total"])
            scale = 1.0 / len(batch)
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) * scale
                     for name, p in params.items()}
            adam_step(params, grads, state, cfg.lr)
        history.append(float(np.mean(epoch_losses)))

    return Checkpoint(
        params={name: p.data.copy() for name, p in params.items()},
        cfg=cfg_effective, epoch=cfg.epochs, loss_history=history)


# -- evaluation, prediction, sweeps ------------------------------------------------------------


def distance_map(model: SiameseChangeNet, t0_chw, t1_chw) -> np.ndarray:
    fwd = model.forward_pair(t0_chw, t1_chw)
    return pixel_distance(fwd.final0, fwd.final1, model.cfg.metric).data


def evaluate_pairs(model: SiameseChangeNet, pairs: list[tuple[ImagePair, np.ndarray]],
                   t: float | None = None) -> tuple[MetricsReport, list[MetricsReport]]:
    """Micro-averaged metrics over pairs, plus per-image reports."""
    if not pairs:
        raise TrainingError("evaluation set is empty")
    model.set_requires_grad(False)
    try:
        t = model.cfg.decision_threshold() if t is None else t
        factor = model.cfg.encoder_config().stride_factor
        totals = np.zeros(4, dtype=np.int64)
        per_image = []
        for pair, label in pairs:
            t0, t1 = pair.chw()
            d = distance_map(model, t0, t1)
            y = downsample_labels(label, factor)
            counts = confusion(threshold(d, t), y)
            per_image.append(metrics(*counts))
            totals += np.array(counts, dtype=np.int64)
    finally:
        model.set_requires_grad(True)
    return metrics(*(int(c) for c in totals)), per_image


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, split: str,
             t: float | None = None) -> tuple[MetricsReport, list[MetricsReport]]:
    model = model_from_checkpoint(ckpt)
    return evaluate_pairs(model, load_split(manifest, split), t)


def predict_pair(model: SiameseChangeNet, pair: ImagePair,
                 t: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distance map and thresholded change map for one pair."""
    model.set_requires_grad(False)
    try:
        t0, t1 = pair.chw()
        d = distance_map(model, t0, t1)
    finally:
        model.set_requires_grad(True)
    t = model.cfg.decision_threshold() if t is None else t
    return d, threshold(d, t)


def sweep_pairs(model: SiameseChangeNet, pairs: list[tuple[ImagePair, np.ndarray]],
                grid) -> tuple[list[tuple[float, MetricsReport]], float]:
    """Micro-averaged metrics per threshold over a split; best-F1 threshold."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("threshold grid is empty")
    model.set_requires_grad(False)
    try:
        factor = model.cfg.encoder_config().stride_factor
        maps = []
        for pair, label in pairs:
            t0, t1 = pair.chw()
            maps.append((distance_map(model, t0, t1), downsample_labels(label, factor)))
    finally:
        model.set_requires_grad(True)
    rows = []
    for t in grid:
        totals = np.zeros(4, dtype=np.int64)
        for d, y in maps:
            totals += np.array(confusion(threshold(d, t), y), dtype=np.int64)
        rows.append((t, metrics(*(int(c) for c in totals))))
    best_t, _ = max(rows, key=lambda row: (row[1].f1, -row[0]))
    return rows, best_t


# -- gradient checking ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    name: str
    index: int
    analytic: float
    numeric: float
    error: float


@dataclass
class GradcheckReport:
    probes: list[ProbeResult]
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradcheck(cfg: RunConfig, n_probes: int = 50, seed: int = 0,
              step: float = 1e-5, tolerance: float = 1e-3,
              image_size: int = 16) -> GradcheckReport:
    """Backward pass vs central differences through the full pipeline.

    Probes random parameter entries; the error per probe is relative with an
    absolute fallback of 1e-8 so that dead hinges (both sides ~0) pass.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    cfg.validate()
    rng = np.random.default_rng([seed, 2])
    gen = SyntheticConfig(image_size=image_size, n_shapes=2, min_shape=4,
                          max_shape=8, seed=seed)
    pair, label = synthetic_dataset(gen, 1)[0]
    model = SiameseChangeNet(cfg, np.random.default_rng([seed, 0]))
    loss_cfg = cfg.loss_config()
    sample = prepare_pairs([(pair, label)], cfg.encoder_config().stride_factor)[0]

    def loss_value() -> Tensor:
        fwd = model.forward_pair(sample.t0, sample.t1)
        return pair_loss(model, fwd, sample.label_feat, loss_cfg)[0]

    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    loss_value().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_probes, total), replace=False)

    probes = []
    for flat_idx in picks:
        cum = 0
        for name, size in zip(names, sizes):
            if flat_idx < cum + size:
                local = int(flat_idx - cum)
                break
            cum += size
        p = params[name]
        orig = p.data.flat[local]
        p.data.flat[local] = orig + step
        f_plus = loss_value().item()
        p.data.flat[local] = orig - step
        f_minus = loss_value().item()
        p.data.flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[name].flat[local])
        diff = abs(a - numeric)
        error = 0.0 if diff <= 1e-8 else diff / max(abs(a), abs(numeric))
        probes.append(ProbeResult(name=name, index=local, analytic=a,
                                  numeric=numeric, error=error))
    return GradcheckReport(probes=probes,
                           max_error=max(p.error for p in probes),
                           tolerance=tolerance)


__all__ = [
    "AdamState", "Checkpoint", "GradcheckReport", "PairForward", "PreparedPair",
    "ProbeResult", "RunConfig", "SiameseChangeNet", "TrainingError", "adam_step",
    "distance_map", "evaluate", "evaluate_pairs", "gradcheck", "load_checkpoint",
    "load_split", "model_from_checkpoint", "pair_loss", "predict_pair",
    "prepare_pairs", "resolve_class_weights", "save_checkpoint", "sweep_pairs",
    "train",
]
