"""Training loop, schedules, auxiliary losses and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, to_float
from .efd import efd_forward, efd_regularizer
from .metrics import evaluate
from .model import DVPModel
from .nn import AdamState, adam_step, clip_grad_norm
from .renderer import RasterSettings

log = logging.getLogger(__name__)

KIMG = 1024
EFD_REG_WEIGHT = 0.001
EFD_REG_KIMG = 30.0
PROTOTYPE_CLIP = 0.01
CHECKPOINT_VERSION = 1
_MAGIC = b"DVPCKPT\x01"

# fraction -> (freeze_kimg, balance_off_kimg, sharpen_start_epoch) for the small backbone
SMALL_PRESETS = {1.0: (480.0, 960.0, 20), 0.05: (240.0, 480.0, 10), 0.01: (60.0, 240.0, 10)}
# the pretrained-backbone configurations use shorter schedules
STAR_PRESET = (30.0, 120.0, 5)


@dataclass
class TrainConfig:
    program: str = "dvp-d"
    data: str = ""
    fraction: float = 1.0
    indices: list | None = None
    epochs: int = 40
    batch: int = 64
    lr: float = 1e-4
    seed: int = 0
    channels_scale: float = 1.0
    image_size: int = 64
    latent_dim: int = 256
    order: int = 8
    n_prototypes: int = 8
    raster_tau: float = 1.0
    raster_samples: int = 64
    balance_weight: float = 0.01
    preset: str = "small"  # small | star
    freeze_kimg: float | None = None
    balance_off_kimg: float | None = None
    sharpen_start_epoch: int | None = None
    sharpen_epochs: int = 10
    tau_min: float = 0.1
    efd_reg_weight: float = EFD_REG_WEIGHT
    efd_reg_kimg: float = EFD_REG_KIMG
    hard_prototypes: bool = False
    bank_lr_scale: float = 1.0
    proto_jitter: float = 0.1
    val_limit: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.indices is None and self.fraction not in SMALL_PRESETS:
            raise ValueError(f"fraction must be one of {sorted(SMALL_PRESETS)} or an explicit index list")

    def resolved(self):
        """Schedule constants after applying the preset for this fraction."""
        if self.preset == "star":
            base = STAR_PRESET
        else:
            base = SMALL_PRESETS.get(self.fraction, SMALL_PRESETS[1.0])
        return (
            base[0] if self.freeze_kimg is None else self.freeze_kimg,
            base[1] if self.balance_off_kimg is None else self.balance_off_kimg,
            base[2] if self.sharpen_start_epoch is None else self.sharpen_start_epoch,
        )


@dataclass
class ScheduleState:
    kimg: float = 0.0
    epoch: int = 0  # completed epochs
    efd_reg_active: bool = True
    prototypes_frozen: bool = True
    balance_active: bool = True
    tau: float = 1.0


def schedule(st: ScheduleState, cfg: TrainConfig, epoch_progress: float = 0.0) -> ScheduleState:
    """Flags and sharpening temperature for the current training progress.

    ``epoch_progress`` is the fraction of the current epoch already processed,
    so the temperature decays smoothly within epochs.
    """
    freeze, balance_off, sharpen_start = cfg.resolved()
    e = st.epoch + epoch_progress
    if e < sharpen_start:
        tau = 1.0
    else:
        frac = min(1.0, (e - sharpen_start) / max(cfg.sharpen_epochs, 1e-9))
        tau = 1.0 + frac * (cfg.tau_min - 1.0)
    return replace(
        st,
        efd_reg_active=st.kimg < cfg.efd_reg_kimg,
        prototypes_frozen=st.kimg < freeze,
        balance_active=st.kimg < balance_off,
        tau=float(tau),
    )


def load_balance_loss(W):
    """Switch-style balancing loss ``P * sum_i f_i * mean_i`` of routing weights ``[B, P]``."""
    W = T.as_tensor(W)
    if not np.allclose(W.data.sum(axis=1), 1.0, atol=1e-4):
        raise ValueError("routing weight rows must sum to 1")
    B, P = W.shape
    f = np.bincount(np.argmax(W.data, axis=1), minlength=P) / B
    pbar = T.mean(W, axis=0)
    return T.mul(T.tsum(T.mul(pbar, f.astype(W.dtype))), float(P))


def init_prototypes(rng, P=8, N=8, radius=(8.0, 16.0), jitter=0.1):
    """Random jittered hexagons, transformed to order-N EFD coefficients ``[P, 4, N]``."""
    bank = []
    for _ in range(P):
        r = rng.uniform(*radius)
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + np.arange(6) * np.pi / 3
        rad = r * (1 + rng.uniform(-jitter, jitter, 6))
        verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        # densify edges so the transform sees the polygon, not just its corners
        pts = np.concatenate([verts[i] + np.linspace(0, 1, 16, endpoint=False)[:, None] * (verts[(i + 1) % 6] - verts[i])
                              for i in range(6)])
        bank.append(efd_forward(pts, N).as_array())
    return np.stack(bank)


@dataclass
class Metrics:
    loss: float
    mse: float
    efd_reg: float = 0.0
    balance: float = 0.0


def total_loss(batch, model: DVPModel, st: ScheduleState, cfg: TrainConfig | None = None):
    """Reconstruction MSE plus active auxiliaries. Returns ``(loss, metrics, output)``."""
    cfg = cfg or TrainConfig()
    x = T.as_tensor(batch)
    out = model(x, tau=st.tau, hard=cfg.hard_prototypes)
    rec = T.mse_loss(out.recon, x)
    loss = rec
    m = Metrics(0.0, float(rec.data))
    if st.efd_reg_active and cfg.efd_reg_weight > 0:
        for s in out.trace.base_shapes():
            reg = efd_regularizer(s, scale_invariant=True)
            m.efd_reg += float(reg.data)
            loss = T.add(loss, T.mul(reg, cfg.efd_reg_weight))
    w = out.trace.prototype_weights
    if w is not None and st.balance_active and cfg.balance_weight > 0:
        bal = load_balance_loss(w)
        m.balance = float(bal.data)
        loss = T.add(loss, T.mul(bal, cfg.balance_weight))
    m.loss = float(loss.data)
    if not np.isfinite(m.loss):
        raise T.NonFiniteError(f"non-finite loss: {m}")
    return loss, m, out


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    adam: dict
    schedule: ScheduleState
    config: dict
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def make_checkpoint(model: DVPModel, opt: AdamState, st: ScheduleState, cfg: TrainConfig) -> Checkpoint:
    tensors = {k: np.array(v) for k, v in model.state_dict().items()}
    for name in opt.m:
        tensors[f"adam.m.{name}"] = opt.m[name]
        tensors[f"adam.v.{name}"] = opt.v[name]
    adam = dict(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, step=opt.step, t=dict(opt.t))
    return Checkpoint(tensors, adam, st, asdict(cfg), rng={"seed": cfg.seed, "epoch": st.epoch})


def save_checkpoint(path, ckpt: Checkpoint):
    """Header (JSON) + little-endian float32 blob; the header carries a sha256 of the blob."""
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        b = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    blob = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "tensors": entries,
        "adam": ckpt.adam,
        "schedule": asdict(ckpt.schedule),
        "config": ckpt.config,
        "rng": ckpt.rng,
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(hb)) + hb + blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 8 or raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if start + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    blob = raw[start + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise CheckpointError("checkpoint checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        a = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, header["adam"], ScheduleState(**header["schedule"]), header["config"],
                      header.get("rng", {}), header["version"])


def restore(ckpt: Checkpoint):
    """Rebuild ``(model, optimizer state, schedule state, config)`` from a checkpoint."""
    cfg_d = dict(ckpt.config)
    cfg = TrainConfig(**cfg_d)
    model = build_model(cfg)
    model.load_state_dict(ckpt.tensors)
    opt = AdamState(lr=ckpt.adam["lr"], beta1=ckpt.adam["beta1"], beta2=ckpt.adam["beta2"],
                    eps=ckpt.adam["eps"], step=ckpt.adam["step"])
    for name, t in ckpt.adam["t"].items():
        opt.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
        opt.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
        opt.t[name] = t
    return model, opt, ckpt.schedule, cfg


def load_model(path) -> DVPModel:
    model, _, _, _ = restore(load_checkpoint(path))
    return model.eval()


# ---------------------------------------------------------------- training


def build_model(cfg: TrainConfig) -> DVPModel:
    raster = RasterSettings(height=cfg.image_size, width=cfg.image_size, samples=cfg.raster_samples,
                            tau=cfg.raster_tau)
    return DVPModel(cfg.program, seed=cfg.seed, channels_scale=cfg.channels_scale, image_size=cfg.image_size,
                    latent_dim=cfg.latent_dim, order=cfg.order, n_prototypes=cfg.n_prototypes, raster=raster,
                    proto_jitter=cfg.proto_jitter)


LOG_COLUMNS = ("epoch", "kimg", "train_mse", "val_mse", "val_ssim", "val_iou", "val_ari",
               "balance_loss", "tau", "lr")


@dataclass
class TrainResult:
    model: DVPModel
    opt: AdamState
    state: ScheduleState
    log: list
    clip_norms: list = field(default_factory=list)
    usage_after_epoch: list = field(default_factory=list)


def train_step(model, opt, st, cfg, x, clip_log=None):
    with T.Tape() as tape:
        loss, m, out = total_loss(x, model, st, cfg)
    model.zero_grad()
    T.backward(tape, loss)
    params = dict(model.named_parameters())
    bank_name = "dsl.Prototype.bank"
    if bank_name in params:
        bank = params[bank_name]
        if bank.grad is None:
            bank.grad = np.zeros_like(bank.data)
        pre = clip_grad_norm([bank.grad], PROTOTYPE_CLIP)
        if clip_log is not None:
            clip_log.append((pre, float(np.linalg.norm(bank.grad.astype(np.float64)))))
        if st.prototypes_frozen:
            del params[bank_name]
    for name, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(params, None, opt, {bank_name: cfg.bank_lr_scale})
    return m, out


def train(cfg: TrainConfig, dataset: Dataset | None = None, out=None, log_path=None, resume=None,
          callback=None) -> TrainResult:
    """Train end to end; checkpoints every epoch when ``out`` is given."""
    ds = dataset or Dataset(cfg.data)
    train_idx = np.asarray(cfg.indices if cfg.indices is not None else ds.train_indices(cfg.fraction))
    images = ds.images("train")[train_idx]
    val_images = ds.images("val")
    val_specs = ds.labels("val")
    if cfg.val_limit:
        val_images, val_specs = val_images[:cfg.val_limit], val_specs[:cfg.val_limit]

    if resume is not None:
        model, opt, st, _ = restore(resume if isinstance(resume, Checkpoint) else load_checkpoint(resume))
    else:
        model = build_model(cfg)
        opt = AdamState(lr=cfg.lr)
        st = schedule(ScheduleState(), cfg)
    model.train()
    n = len(images)
    result = TrainResult(model, opt, st, [])
    rows = []
    if log_path and resume is not None and Path(log_path).exists():
        with open(log_path) as fh:
            rows = list(csv.DictReader(fh))[:st.epoch]
    while st.epoch < cfg.epochs:
        perm = np.random.default_rng([cfg.seed, st.epoch, 11]).permutation(n)
        mse_sum, bal_sum, seen = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            x = to_float(images[idx])
            m, _ = train_step(model, opt, st, cfg, x, result.clip_norms)
            mse_sum += m.mse * len(idx)
            bal_sum += m.balance * len(idx)
            seen += len(idx)
            st = replace(st, kimg=st.kimg + len(idx) / KIMG)
            st = schedule(st, cfg, seen / n)
        st = schedule(replace(st, epoch=st.epoch + 1), cfg)
        row = {"epoch": st.epoch, "kimg": st.kimg, "train_mse": mse_sum / n, "balance_loss": bal_sum / n,
               "tau": st.tau, "lr": opt.lr}
        if cfg.eval_every and (st.epoch % cfg.eval_every == 0 or st.epoch == cfg.epochs):
            rep, preds = evaluate(model, val_images, val_specs)
            agg = rep.aggregate()
            row.update(val_mse=agg["mse"], val_ssim=agg["ssim"], val_iou=agg["iou"], val_ari=agg["ari"])
            if preds["weights"] is not None:
                u = preds["weights"].sum(axis=0)
                result.usage_after_epoch.append((u / u.sum()).tolist())
            model.train()
        rows.append({k: row.get(k, "") for k in LOG_COLUMNS})
        log.info("epoch %d kimg %.1f train_mse %.5f val_iou %s", st.epoch, st.kimg, row["train_mse"],
                 row.get("val_iou"))
        result.state = st
        if out:
            save_checkpoint(out, make_checkpoint(model, opt, st, cfg))
        if log_path:
            write_log(rows, log_path)
        if callback:
            callback(st, row)
    result.log = rows
    return result


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
