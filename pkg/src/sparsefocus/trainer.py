"""Training loop: Nadam, joint augmentation, ablation variants, checkpoint selection."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ContractError, NonFiniteGradientError, NonFiniteLossError
from .imaging import HU_MAX, HU_MIN, PhantomSample, partition_regions
from .losses import LossBreakdown, LossWeights, loss_gradients
from .network import ModelConfig, SparseFocusNet, backward, build_model, forward, save_checkpoint
from .variants import Variant

log = logging.getLogger(__name__)

SELECTION_RULES = ("min-train-composite", "min-val-composite")
WEIGHT_SCHEDULES = ("constant", "linear-decay")

_DEFAULT_WEIGHTS = {
    Variant.THREE_TASK: LossWeights(1.0, 1.5, 1.3),
    Variant.TWO_TASK: LossWeights(1.0, 0.0, 1.3),
    Variant.ONE_TASK_FOCUSED: LossWeights(1.0, 0.0, 0.0),
    Variant.ONE_TASK_GLOBAL: LossWeights(1.0, 0.0, 0.0),
}


def make_variant(kind) -> tuple[Variant, LossWeights]:
    variant = Variant.parse(kind)
    return variant, _DEFAULT_WEIGHTS[variant]


# ----------------------------------------------------------------------------
# Nadam


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    # running product of the momentum schedule
    mu_product: float = 1.0


def _momentum(state: OptimizerState, t: int) -> float:
    return state.beta1 * (1.0 - 0.5 * 0.96 ** (t * state.schedule_decay))


@torch.no_grad()
def nadam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: OptimizerState, lr: float) -> OptimizerState:
    """One Nadam update (Adam with a Nesterov look-ahead on the momentum).

    Parameters are updated in place; ``state`` is updated and returned.
    """
    if set(params) != set(grads):
        raise ContractError("params and grads must have the same names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)

    t = state.step + 1
    mu_t = _momentum(state, t)
    mu_next = _momentum(state, t + 1)
    prod_t = state.mu_product * mu_t
    prod_next = prod_t * mu_next
    b1, b2 = state.beta1, state.beta2
    bias2 = 1.0 - b2**t

    for name, p in params.items():
        g = grads[name].to(p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = m * (mu_next / (1.0 - prod_next)) + g * ((1.0 - mu_t) / (1.0 - prod_t))
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m_hat, denom, value=-lr)

    state.step = t
    state.mu_product = prod_t
    return state


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    noise_sigma: float = 0.03
    mirror: bool = True
    rotate_max_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    probability: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        lo, hi = self.scale_range
        if self.noise_sigma < 0 or lo <= 0 or lo > hi:
            raise ContractError("invalid augmentation policy")
        if not 0.0 <= self.probability <= 1.0 or self.rotate_max_deg < 0:
            raise ContractError("invalid augmentation policy")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(noise_sigma=0.0, mirror=False, rotate_max_deg=0.0, scale_range=(1.0, 1.0))

    @property
    def active(self) -> bool:
        return self.probability > 0 and (
            self.noise_sigma > 0 or self.mirror or self.rotate_max_deg > 0 or self.scale_range != (1.0, 1.0)
        )


def augment_rng(master_seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), zlib.crc32(sample_id.encode()), int(epoch)])


def mirror(sample: PhantomSample) -> PhantomSample:
    return PhantomSample(
        mr=sample.mr[:, ::-1].copy(), ct=sample.ct[:, ::-1].copy(), body=sample.body[:, ::-1].copy(),
        seed=sample.seed, id=sample.id, geometry=sample.geometry,
    )


def _affine(img, angle_deg, scale, order, mode, cval=0.0):
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # output -> input coordinate map of a rotation+zoom about the centre
    matrix = np.array([[c, -s], [s, c]]) / scale
    centre = (np.array(img.shape) - 1) / 2.0
    offset = centre - matrix @ centre
    return ndimage.affine_transform(img, matrix, offset=offset, order=order, mode=mode, cval=cval)


def warp(sample: PhantomSample, angle_deg: float, scale: float) -> PhantomSample:
    """Joint rotation/zoom: bilinear for images, nearest for the mask."""
    if angle_deg == 0.0 and scale == 1.0:
        return sample
    mr = _affine(sample.mr.astype(np.float64), angle_deg, scale, 1, "nearest")
    ct = _affine(sample.ct.astype(np.float64), angle_deg, scale, 1, "constant", HU_MIN)
    body = _affine(sample.body.astype(np.uint8), angle_deg, scale, 0, "constant", 0)
    return PhantomSample(
        mr=mr.astype(np.float32), ct=np.clip(ct, HU_MIN, HU_MAX).astype(np.float32),
        body=body.astype(bool), seed=sample.seed, id=sample.id, geometry=sample.geometry,
    )


def augment(sample: PhantomSample, rng: np.random.Generator,
            policy: AugmentPolicy | None = None) -> PhantomSample:
    policy = policy or AugmentPolicy()
    if not policy.active:
        return sample
    p = policy.probability
    # every draw happens unconditionally so the stream layout never depends on outcomes
    do_mirror = rng.random() < p
    do_rotate = rng.random() < p
    angle = rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg)
    do_scale = rng.random() < p
    scale = rng.uniform(*policy.scale_range)
    do_noise = rng.random() < p
    noise = rng.standard_normal(sample.shape)

    out = sample
    if policy.mirror and do_mirror:
        out = mirror(out)
    out = warp(out, angle if do_rotate else 0.0, scale if do_scale else 1.0)
    if policy.noise_sigma > 0 and do_noise:
        out = PhantomSample(
            mr=(out.mr + policy.noise_sigma * noise).astype(np.float32), ct=out.ct, body=out.body,
            seed=out.seed, id=out.id, geometry=out.geometry,
        )
    return out


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 15
    epochs: int = 60
    weights: LossWeights | None = None  # None -> the variant's defaults
    weight_schedule: str = "constant"
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0
    selection: str = "min-train-composite"
    value_scale: float = 1e-3
    model: ModelConfig = field(default_factory=ModelConfig)
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")
        if self.weight_schedule not in WEIGHT_SCHEDULES:
            raise ContractError(f"weight_schedule must be one of {WEIGHT_SCHEDULES}")
        if self.selection not in SELECTION_RULES:
            raise ContractError(f"selection must be one of {SELECTION_RULES}")
        if not self.value_scale > 0:
            raise ContractError("value_scale must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = None if self.weights is None else asdict(self.weights)
        d["augment"] = {**asdict(self.augment), "scale_range": list(self.augment.scale_range)}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        if d.get("weights") is not None:
            w = d["weights"]
            d["weights"] = LossWeights(*w) if isinstance(w, (list, tuple)) else LossWeights(**w)
        if "augment" in d:
            d["augment"] = AugmentPolicy(**d["augment"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def resolved_weights(self, variant) -> LossWeights:
        return self.weights if self.weights is not None else make_variant(variant)[1]

    def effective_weights(self, variant, epoch: int) -> LossWeights:
        w = self.resolved_weights(variant)
        if self.weight_schedule == "linear-decay":
            f = 1.0 - epoch / self.epochs
            return w.scaled(f1=f, f3=f)
        return w

    def hash(self, variant=None) -> str:
        doc = self.to_dict()
        if variant is not None:
            doc["variant"] = Variant.parse(variant).value
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    weights: LossWeights
    train: LossBreakdown
    val: LossBreakdown
    train_running: LossBreakdown
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "steps": self.steps,
            "weights": list(self.weights.as_tuple()),
            "train": self.train.to_dict(),
            "val": self.val.to_dict(),
            "train_running": self.train_running.to_dict(),
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def totals(self, split: str = "train") -> list[float]:
        return [getattr(r, split).total for r in self.records]

    @property
    def steps(self) -> int:
        return self.records[-1].steps if self.records else 0

    def to_json(self) -> str:
        # wall-clock lives in timing.json so this stays byte-reproducible
        return json.dumps([r.to_dict() for r in self.records], indent=2) + "\n"


@dataclass
class SelectedCheckpoint:
    epoch: int
    value: float
    criterion: str
    weights: LossWeights
    state: dict
    path: Path | None = None


@dataclass
class TrainResult:
    model: SparseFocusNet
    history: TrainHistory
    selected: SelectedCheckpoint


@dataclass
class Batch:
    mr: torch.Tensor
    ct: np.ndarray  # scaled value space
    body: np.ndarray
    bone: np.ndarray


def make_batch(samples: list[PhantomSample], value_scale: float) -> Batch:
    mr = torch.from_numpy(np.stack([s.mr for s in samples]).astype(np.float32)[:, None])
    ct = np.stack([s.ct.astype(np.float64) for s in samples])
    body = np.stack([s.body for s in samples])
    bone = np.stack([partition_regions(s.ct, s.body).bone for s in samples])
    return Batch(mr=mr, ct=ct * value_scale, body=body, bone=bone)


def batch_loss(outputs, batch: Batch, variant: Variant, w: LossWeights, smooth: float,
               want_grads: bool = True):
    """Mean per-sample composite loss over a batch and its per-head gradients."""
    planes = outputs.numpy()
    n = batch.ct.shape[0]
    parts, grads = [], {name: np.zeros_like(p) for name, p in planes.items()}
    for i in range(n):
        per = {name: p[i] for name, p in planes.items()}
        breakdown, g = loss_gradients(per, batch.ct[i], batch.body[i], batch.bone[i], w, variant, smooth)
        parts.append(breakdown)
        if want_grads:
            for name, gi in g.items():
                grads[name][i] = gi / n
    return LossBreakdown.mean(parts), {k: v[:, None] for k, v in grads.items() if k in variant.heads}


def evaluate_loss(model: SparseFocusNet, samples: list[PhantomSample], w: LossWeights,
                  value_scale: float | None = None, batch_size: int = 16,
                  smooth: float = 1.0) -> LossBreakdown:
    """Eval-mode composite loss averaged over samples (no augmentation)."""
    scale = model.value_scale if value_scale is None else value_scale
    parts, counts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(chunk, scale)
        outputs = forward(model, batch.mr, train=False)
        breakdown, _ = batch_loss(outputs, batch, model.variant, w, smooth, want_grads=False)
        parts.append(breakdown)
        counts.append(len(chunk))
    return LossBreakdown.mean(parts, counts)


def training_threads() -> int:
    # training numerics stay single-threaded for bit-reproducible reductions,
    # whatever SPARSEFOCUS_THREADS allows elsewhere
    return 1


def _finite(b: LossBreakdown) -> bool:
    return all(math.isfinite(getattr(b, k)) for k in ("body_reg", "bone_class", "bone_reg", "total"))


def train(dataset, cfg: TrainConfig | None = None, variant=Variant.THREE_TASK,
          run_dir=None, progress=None) -> TrainResult:
    """Train one model.

    ``dataset`` needs ``train`` and ``val`` sample lists. When ``run_dir`` is
    given, a checkpoint is written to ``run_dir/ckpt-<epoch>`` at every new
    minimum of the selection criterion, plus ``history.json`` at the end.
    """
    cfg = cfg or TrainConfig()
    variant = Variant.parse(variant)
    train_set, val_set = list(dataset.train), list(dataset.val)
    if not train_set or not val_set:
        raise ContractError("training needs non-empty train and val splits")
    run_dir = Path(run_dir) if run_dir is not None else None

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(training_threads())
    try:
        return _train(train_set, val_set, cfg, variant, run_dir, progress)
    except NonFiniteLossError as exc:
        # keep what was learned up to the divergence
        if run_dir is not None and exc.history is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "history.json").write_text(exc.history.to_json())
        raise
    finally:
        torch.set_num_threads(prev_threads)


def _train(train_set, val_set, cfg, variant, run_dir, progress):
    model = build_model(cfg.model, variant, cfg.seed)
    model.value_scale = cfg.value_scale
    params = dict(model.named_parameters())
    state = OptimizerState()
    history = TrainHistory()
    selected: SelectedCheckpoint | None = None
    shuffle_seed = [int(cfg.seed), zlib.crc32(b"shuffle")]

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        w = cfg.effective_weights(variant, epoch)
        order = np.random.default_rng(shuffle_seed + [epoch]).permutation(len(train_set))
        running, sizes = [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [
                augment(train_set[i], augment_rng(cfg.seed, train_set[i].id, epoch), cfg.augment)
                for i in order[start:start + cfg.batch_size]
            ]
            batch = make_batch(chunk, cfg.value_scale)
            outputs = forward(model, batch.mr, train=True)
            breakdown, head_grads = batch_loss(outputs, batch, variant, w, cfg.dice_smooth)
            if not _finite(breakdown):
                raise NonFiniteLossError(epoch, history, selected)
            grads = backward(model, outputs, head_grads)
            nadam_step(params, grads, state, cfg.learning_rate)
            running.append(breakdown)
            sizes.append(len(chunk))

        train_loss = evaluate_loss(model, train_set, w, cfg.value_scale, smooth=cfg.dice_smooth)
        val_loss = evaluate_loss(model, val_set, w, cfg.value_scale, smooth=cfg.dice_smooth)
        if not (_finite(train_loss) and _finite(val_loss)):
            raise NonFiniteLossError(epoch, history, selected)
        record = EpochRecord(
            epoch=epoch, steps=state.step, weights=w, train=train_loss, val=val_loss,
            train_running=LossBreakdown.mean(running, sizes),
            seconds=time.perf_counter() - started,
        )
        history.records.append(record)

        criterion = train_loss.total if cfg.selection == "min-train-composite" else val_loss.total
        if selected is None or criterion < selected.value:
            path = None
            if run_dir is not None:
                path = save_checkpoint(
                    model, run_dir / f"ckpt-{epoch:04d}",
                    extra={"epoch": epoch, "criterion": cfg.selection, "value": criterion,
                           "weights": list(w.as_tuple())},
                )
            selected = SelectedCheckpoint(epoch, criterion, cfg.selection, w,
                                          copy.deepcopy(model.state_dict()), path)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss.total, val_loss.total)
        if progress is not None:
            progress(record)

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "history.json").write_text(history.to_json())
        (run_dir / "selected.json").write_text(json.dumps({
            "epoch": selected.epoch, "criterion": selected.criterion, "value": selected.value,
            "path": selected.path.name if selected.path else None,
        }, indent=2) + "\n")
        (run_dir / "timing.json").write_text(
            json.dumps([{"epoch": r.epoch, "seconds": r.seconds} for r in history.records], indent=2) + "\n"
        )
    return TrainResult(model=model, history=history, selected=selected)


def selected_model(result: TrainResult) -> SparseFocusNet:
    model = build_model(result.model.cfg, result.model.variant, 0)
    model.load_state_dict(result.selected.state)
    model.value_scale = result.model.value_scale
    model.eval()
    return model
