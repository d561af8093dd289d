"""Joint supervised / masked-reconstruction training with an EMA teacher.

One step:

1. draw a batch and a fresh depth-consistent mask per sample;
2. student logits on the clean view ``F_s`` and on the masked view ``F_s^M``;
   teacher logits ``F_t`` on the clean view, outside the tape;
3. ``L = DiceCE(Y, F_s) + DiceCE(Y, F_s^M) + beta * CL(F_s^M, F_t)``;
4. AdamW on the student parameters and the mask embedding;
5. ``teacher <- lam * teacher + (1 - lam) * student`` with ``lam`` following
   a cosine ramp from ``lambda0`` to 1.

All randomness of step ``k`` is derived from ``(seed, k)``, so a run resumed
from a checkpoint at step ``k`` continues exactly as the uninterrupted run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .autodiff import Tensor, no_grad
from .data import AugmentConfig, VolumeSample, augment, normalize_hu
from .errors import ContractError, FormatError, NumericError, ShapeError, TrainingError, VersionError
from .losses import LossConfig, one_hot, total_loss
from .masking import MaskSpec, sample_mask
from .network import (
    MASK_TOKEN,
    MASK_VALUE,
    NetConfig,
    ParameterSet,
    build,
    copy_params,
    forward,
    layer_shapes,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss_total", "loss_sup", "loss_msl", "loss_cl", "lambda", "lr")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch: int = 2
    lr: float = 3e-3
    weight_decay: float = 3e-5
    mask_ratio: float = 0.4
    lambda0: float = 0.996
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    use_teacher: bool = True
    decay_mask_token: bool = False
    exact_count_mask: bool = False
    flip_axes: tuple[int, ...] = ()
    intensity_shift: float = 0.0
    hu_lo: float = -1000.0
    hu_hi: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "flip_axes", tuple(int(a) for a in self.flip_axes))
        if not 0.0 <= self.lambda0 <= 1.0:
            raise ContractError(f"lambda0 must lie in [0, 1], got {self.lambda0}")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 1 or self.batch < 1:
            raise ContractError("steps and batch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_axes"] = list(self.flip_axes)
        return d


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
        )


@dataclass
class CheckpointBundle:
    net: NetConfig
    train: TrainConfig
    loss: LossConfig
    student: ParameterSet
    teacher: ParameterSet
    opt: OptimizerState
    step: int = 0

    @property
    def seed(self) -> int:
        return self.train.seed


def init_bundle(net: NetConfig, train: TrainConfig, loss: LossConfig) -> CheckpointBundle:
    """Student from ``net.seed``; the teacher starts as an exact copy."""
    student = build(net)
    teacher = copy_params(student)
    return CheckpointBundle(net, train, loss, student, teacher, OptimizerState.zeros_like(student), 0)


# ---------------------------------------------------------------------------
# update rules


def cosine_lambda(step: int, total_steps: int, lambda0: float = 0.996) -> float:
    """EMA momentum rising from ``lambda0`` at step 0 to 1 at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - lambda0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def ema_update(teacher: ParameterSet, student: ParameterSet, lam: float) -> None:
    """In place: ``teacher <- lam * teacher + (1 - lam) * student``."""
    if teacher.keys() != student.keys():
        raise ContractError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ContractError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data = lam * t.data + (1.0 - lam) * s.data


def decays(name: str, decay_mask_token: bool = False) -> bool:
    """Weight decay applies to conv weights/biases and norm gains only."""
    if name in (MASK_TOKEN, MASK_VALUE):
        return decay_mask_token
    return not name.endswith(".shift")


def adamw_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and decays(name, cfg.decay_mask_token):
            p.data = p.data * (1.0 - cfg.lr * cfg.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = (p.data - cfg.lr * update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# training


def mask_dims(extents: Sequence[int]) -> tuple[int, int, int]:
    """(D, H, W) array extents -> (H, W, D) masking dims."""
    D, H, W = extents
    return (H, W, D)


def prepare_batch(samples: Sequence[VolumeSample], num_classes: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ``X[B,1,D,H,W]`` float32 and one-hot ``Y[B,C,D,H,W]``."""
    X = np.stack([normalize_hu(s.image, cfg.hu_lo, cfg.hu_hi).astype(np.float32) for s in samples])[:, None]
    Y = one_hot(np.stack([s.labels for s in samples]).astype(np.int64), num_classes)
    return np.ascontiguousarray(X), Y


def _effective_loss_cfg(bundle: CheckpointBundle) -> LossConfig:
    if not bundle.train.use_teacher and bundle.loss.include_cl:
        return replace(bundle.loss, include_cl=False)
    return bundle.loss


def train_step(batch: Sequence[VolumeSample], bundle: CheckpointBundle) -> dict:
    """Run one training iteration in place on ``bundle`` and return its metrics."""
    if not batch:
        raise ContractError("empty batch")
    net, cfg = bundle.net, bundle.train
    loss_cfg = _effective_loss_cfg(bundle)
    k = bundle.step
    X, Y = prepare_batch(batch, net.num_classes, cfg)
    x = Tensor(X)

    masks = None
    if loss_cfg.include_msl or loss_cfg.include_cl:
        dims = mask_dims(X.shape[2:])
        masks = [
            sample_mask(MaskSpec(cfg.mask_ratio, net.patch, seeding.derive_seed(cfg.seed, "mask", k, b),
                                 cfg.exact_count_mask), dims)
            for b in range(len(batch))
        ]

    for p in bundle.student.values():
        p.zero_grad()
    try:
        F_s = forward(bundle.student, x, net)
        F_sm = forward(bundle.student, x, net, mask=masks) if masks is not None else None
        F_t = None
        if loss_cfg.include_cl:
            with no_grad():
                F_t = forward(bundle.teacher, x, net)
        loss, parts = total_loss(Y, F_s, F_sm, F_t, loss_cfg)
    except NumericError as exc:
        bad = sorted(k for k, p in bundle.student.items() if not np.all(np.isfinite(p.data)))
        raise TrainingError(f"non-finite values at step {bundle.step + 1}: {exc}; "
                            f"non-finite parameters: {bad or 'none'}") from exc
    if not all(math.isfinite(v) for v in parts.values()):
        raise TrainingError(f"non-finite loss at step {bundle.step + 1}: {parts}")
    loss.backward()

    grads = {}
    for name, p in bundle.student.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {bundle.step + 1}")
        grads[name] = g
    if any(t.grad is not None for t in bundle.teacher.values()):
        raise TrainingError("teacher parameters received a gradient")
    if set(grads) != set(bundle.student):
        raise TrainingError("optimizer parameter set does not match the student")

    adamw_step(bundle.student, grads, bundle.opt, cfg)
    lam = cosine_lambda(min(bundle.step, cfg.steps), cfg.steps, cfg.lambda0)
    ema_update(bundle.teacher, bundle.student, lam)
    bundle.step += 1
    return {
        "step": bundle.step,
        "loss_total": parts["total"],
        "loss_sup": parts["sup"],
        "loss_msl": parts["msl"],
        "loss_cl": parts["cl"],
        "lambda": lam,
        "lr": cfg.lr,
    }


def draw_batch(samples: Sequence[VolumeSample], bundle: CheckpointBundle) -> list[VolumeSample]:
    """The seeded, augmented batch for the bundle's next step."""
    cfg = bundle.train
    n = len(samples)
    gen = seeding.rng(cfg.seed, "batch", bundle.step)
    idx = gen.choice(n, size=cfg.batch, replace=cfg.batch > n)
    aug = AugmentConfig(flip_axes=cfg.flip_axes, intensity_shift=cfg.intensity_shift * (cfg.hu_hi - cfg.hu_lo))
    out = []
    for b, i in enumerate(idx):
        s = samples[int(i)]
        if cfg.flip_axes or cfg.intensity_shift:
            s = augment(s, aug, seeding.derive_seed(cfg.seed, "augment", bundle.step, b))
        out.append(s)
    return out


def format_row(row: dict) -> list[str]:
    return [str(row["step"])] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]]


def fit(bundle: CheckpointBundle, samples: Sequence[VolumeSample], metrics_path=None,
        until: Optional[int] = None, callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train until ``bundle.step == until`` (default: ``train.steps``).

    Metric rows are appended to ``metrics_path`` (CSV) when given, writing the
    header only when the file is new.
    """
    until = bundle.train.steps if until is None else until
    if not samples:
        raise ContractError("no training samples")
    rows = []
    fh = writer = None
    if metrics_path is not None:
        new = not Path(metrics_path).exists() or Path(metrics_path).stat().st_size == 0
        fh = open(metrics_path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_COLUMNS)
    try:
        while bundle.step < until:
            row = train_step(draw_batch(samples, bundle), bundle)
            rows.append(row)
            if writer is not None:
                writer.writerow(format_row(row))
                fh.flush()
            if callback is not None:
                callback(row)
            if row["step"] % 50 == 0:
                log.info("step %d loss %.4f sup %.4f", row["step"], row["loss_total"], row["loss_sup"])
    finally:
        if fh is not None:
            fh.close()
    return rows


# ---------------------------------------------------------------------------
# inference


def infer(bundle: CheckpointBundle, volume: np.ndarray, use_teacher: bool = False) -> np.ndarray:
    """Argmax labels for a normalized volume ``(D, H, W)`` or batch ``(B, 1, D, H, W)``."""
    vol = np.asarray(volume, dtype=np.float32)
    single = vol.ndim == 3
    if single:
        vol = vol[None, None]
    if vol.ndim != 5:
        raise ShapeError(f"expected (D, H, W) or (B, 1, D, H, W), got {volume.shape}")
    params = bundle.teacher if use_teacher else bundle.student
    with no_grad():
        logits = forward(params, Tensor(vol), bundle.net).data
    labels = logits.argmax(axis=1).astype(np.uint8)
    return labels[0] if single else labels


def predict_sample(bundle: CheckpointBundle, sample: VolumeSample, use_teacher: bool = False) -> np.ndarray:
    cfg = bundle.train
    return infer(bundle, normalize_hu(sample.image, cfg.hu_lo, cfg.hu_hi), use_teacher)


# ---------------------------------------------------------------------------
# checkpoints
#
# b"MCTX" u32 version u32 config_len config(JSON, utf-8) u32 n_arrays
# per array: u32 name_len name u8 dtype u8 rank u32 extents[rank] payload

MCTX_MAGIC = b"MCTX"
MCTX_VERSION = 1
_DT = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_DT_CODE = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def _config_block(bundle: CheckpointBundle) -> bytes:
    block = {
        "net": bundle.net.to_dict(),
        "train": bundle.train.to_dict(),
        "loss": bundle.loss.to_dict(),
        "step": bundle.step,
        "opt_t": bundle.opt.t,
        "rng": {"root_seed": bundle.train.seed, "next_step": bundle.step},
    }
    return json.dumps(block, sort_keys=True).encode("utf-8")


def _arrays(bundle: CheckpointBundle) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, src in (("student", bundle.student), ("teacher", bundle.teacher)):
        out += [(f"{prefix}/{k}", t.data) for k, t in src.items()]
    out += [(f"adam_m/{k}", a) for k, a in bundle.opt.m.items()]
    out += [(f"adam_v/{k}", a) for k, a in bundle.opt.v.items()]
    return out


def encode_checkpoint(bundle: CheckpointBundle) -> bytes:
    buf = io.BytesIO()
    cfg = _config_block(bundle)
    buf.write(MCTX_MAGIC + struct.pack("<II", MCTX_VERSION, len(cfg)) + cfg)
    arrays = _arrays(bundle)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        code = _DT_CODE.get(arr.dtype)
        if code is None:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DT[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise FormatError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def decode_checkpoint(buf: bytes) -> CheckpointBundle:
    r = _Reader(buf)
    if r.take(4) != MCTX_MAGIC:
        raise VersionError("not a checkpoint file (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != MCTX_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        block = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DT:
            raise FormatError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I")
        dt = _DT[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.off != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")

    try:
        net = _from_dict(NetConfig, block["net"])
        train = _from_dict(TrainConfig, block["train"])
        loss = _from_dict(LossConfig, block["loss"])
        step, opt_t = int(block["step"]), int(block["opt_t"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid checkpoint configuration: {exc}") from None

    def group(prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}

    student = {k: Tensor(v, requires_grad=True, name=k) for k, v in group("student").items()}
    teacher = {k: Tensor(v, name=k) for k, v in group("teacher").items()}
    opt = OptimizerState(group("adam_m"), group("adam_v"), opt_t)
    expected = set(layer_shapes(net))
    for label, part in (("student", student), ("teacher", teacher), ("adam_m", opt.m), ("adam_v", opt.v)):
        if set(part) != expected:
            raise FormatError(f"{label} arrays do not match the network configuration")
    return CheckpointBundle(net, train, loss, student, teacher, opt, step)


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    """Atomic write: the target is replaced only once the file is complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(bundle))
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointBundle:
    return decode_checkpoint(Path(path).read_bytes())
