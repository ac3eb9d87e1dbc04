"""Losses, schedule, augmentation, checkpoints and the two training stages."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .config import config_hash
from .core import AnnotationSet, BinaryMask, ConfigError, DataError, NumericError, RasterImage
from .nn.coarse import CoarseNet, CoarseNetConfig, build_coarse, to_batch
from .nn.fine import SrsConfig, SrsNet, build_srs, refine_tensors

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DICE_EPS = 1e-6


def mse_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
    return ((p - g) ** 2).mean()


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(pg) + eps) / (sum(p^2) + sum(g^2) + eps)``; empty vs empty gives 0."""
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    inter = (p * g).sum()
    return 1 - (2 * inter + eps) / ((p * p).sum() + (g * g).sum() + eps)


def poly_lr(it: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1 - it / max_iter) ** power


def rotate_pair(img: RasterImage, ann: AnnotationSet, angle: float):
    """Rotate image (bilinear) and masks (nearest) by ``angle`` degrees; zero fill."""
    if angle == 0:
        return img, ann

    def rot(arr, order):
        return ndimage.rotate(arr, angle, reshape=False, order=order, mode="constant", cval=0.0)

    out_img = RasterImage(np.clip(rot(img.values.astype(np.float64), 1), 0, 1))
    masks = {}
    for name in ("pixel_mask", "centerline_mask"):
        m = getattr(ann, name)
        if m is not None:
            masks[name] = BinaryMask((rot(m.values.astype(np.float32), 0) >= 0.5).astype(np.uint8))
    return out_img, AnnotationSet(**masks)


def augment(img: RasterImage, ann: AnnotationSet, rng: np.random.Generator, max_angle: float = 10.0):
    """Random rotation drawn uniformly from [-max_angle, max_angle] degrees."""
    angle = float(rng.uniform(-max_angle, max_angle)) if max_angle > 0 else 0.0
    return rotate_pair(img, ann, angle)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    poly_power: float = 0.9
    rotation: float = 10.0
    seed: int = 0
    dice_eps: float = DICE_EPS
    pixel_weight: float = 1.0
    centerline_weight: float = 1.0
    joint: bool = False  # fine stage: also update the coarse network

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.rotation < 0:
            raise ConfigError("rotation range must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    stage: str
    epoch: int
    seed: int
    config: dict
    tensors: dict  # name -> np.ndarray (network parameters and buffers)
    optimizer: dict
    version: int = CHECKPOINT_VERSION
    coarse_ref: str = ""

    @property
    def config_hash(self) -> str:
        return config_hash(_flatten(self.config))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _blob(arr: np.ndarray) -> tuple[bytes, str]:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4")
    elif arr.dtype.kind in "iu":
        arr = arr.astype("<i8")
    else:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    return np.ascontiguousarray(arr).tobytes(), arr.dtype.str


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write a zip container: MANIFEST text header, config echo, index, blobs.

    Returns the SHA-256 of the written file.
    """
    header = (
        f"format_version = {ckpt.version}\n"
        f"stage = {ckpt.stage}\n"
        f"epoch = {ckpt.epoch}\n"
        f"seed = {ckpt.seed}\n"
        f"config_hash = {ckpt.config_hash}\n"
        f"coarse_ref = {ckpt.coarse_ref}\n"
    )
    index = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("MANIFEST", header)
        zf.writestr("config.json", json.dumps(ckpt.config, indent=2, sort_keys=True))
        for group, table in (("params", ckpt.tensors), ("optim", ckpt.optimizer)):
            for name in sorted(table):
                data, dtype = _blob(table[name])
                member = f"{group}/{name}"
                zf.writestr(member, data)
                index.append({"name": member, "dtype": dtype, "shape": list(np.shape(table[name]))})
        zf.writestr("index.json", json.dumps(index, indent=1))
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ConfigError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        header = dict(
            line.split(" = ", 1) for line in zf.read("MANIFEST").decode().splitlines() if line
        )
        if int(header["format_version"]) != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header['format_version']}")
        config = json.loads(zf.read("config.json"))
        tables = {"params": {}, "optim": {}}
        for entry in json.loads(zf.read("index.json")):
            group, name = entry["name"].split("/", 1)
            arr = np.frombuffer(zf.read(entry["name"]), dtype=entry["dtype"])
            tables[group][name] = arr.reshape(entry["shape"]).copy()
    ckpt = Checkpoint(
        stage=header["stage"],
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        config=config,
        tensors=tables["params"],
        optimizer=tables["optim"],
        coarse_ref=header.get("coarse_ref", ""),
    )
    if ckpt.config_hash != header["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch, checkpoint is corrupt")
    return ckpt


def _state_arrays(net: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def _optim_arrays(opt: torch.optim.Optimizer, names: list[str]) -> dict:
    out = {}
    state = opt.state_dict()["state"]
    for idx, name in enumerate(names):
        for key, val in state.get(idx, {}).items():
            out[f"{name}/{key}"] = np.asarray(val.cpu().numpy() if torch.is_tensor(val) else val)
    return out


def _load_state(net: torch.nn.Module, tensors: dict, prefix: str = "") -> None:
    state = net.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
    new = {}
    for k, ref in state.items():
        arr = tensors[prefix + k]
        new[k] = torch.from_numpy(np.asarray(arr)).to(ref.dtype).reshape(ref.shape)
    net.load_state_dict(new)


def restore_coarse(ckpt: Checkpoint) -> CoarseNet:
    cfg = CoarseNetConfig(**ckpt.config["coarse"])
    net = CoarseNet(cfg)
    prefix = "" if ckpt.stage == "coarse" else "coarse."
    _load_state(net, ckpt.tensors, prefix)
    net.eval()
    return net


def restore_srs(ckpt: Checkpoint) -> SrsNet:
    if ckpt.stage != "fine":
        raise ConfigError(f"expected a fine-stage checkpoint, got stage={ckpt.stage}")
    d = dict(ckpt.config["srs"])
    d["hidden_channels"] = tuple(d["hidden_channels"])
    net = SrsNet(SrsConfig(**d))
    _load_state(net, ckpt.tensors, "srs.")
    net.eval()
    return net


# ------------------------------------------------------------------------ training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list  # one dict per epoch
    coarse: CoarseNet
    srs: Optional[SrsNet] = None


def write_log(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _check_mode(samples, dual: bool) -> None:
    if not samples:
        raise DataError("empty training set")
    for s in samples:
        ann = s.annotations
        if dual and (ann.pixel_mask is None or ann.centerline_mask is None):
            raise DataError(f"{s.name}: dual-branch training needs pixel and centerline masks")


def single_target(ann: AnnotationSet) -> np.ndarray:
    """Target for a single-branch coarse net: pixel mask when present, else centerline."""
    m = ann.pixel_mask if ann.pixel_mask is not None else ann.centerline_mask
    return m.values


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _augmented(samples, idx, rng, rotation):
    out = []
    for i in idx:
        s = samples[i]
        out.append(augment(s.image, s.annotations, rng, rotation))
    return out


def _masks_tensor(arrs) -> torch.Tensor:
    return to_batch([a.astype(np.float32) for a in arrs])[0]


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_coarse(cfg: TrainConfig, samples, net_cfg: CoarseNetConfig, verbose: bool = False) -> TrainResult:
    """Fit the coarse network with MSE (sum of both heads in dual mode)."""
    _check_mode(samples, net_cfg.dual_branch)
    rng = _seed_everything(cfg.seed)
    net = build_coarse(net_cfg, cfg.seed)
    net.train()
    names = [n for n, _ in net.named_parameters()]
    opt = _adam(net.parameters(), cfg)
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    max_iter = cfg.epochs * per_epoch
    it = 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"loss": 0.0, "pixel": 0.0, "centerline": 0.0}
        for idx in _batches(len(samples), cfg.batch_size, rng):
            lr = poly_lr(it, max_iter, cfg.lr, cfg.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = _augmented(samples, idx, rng, cfg.rotation)
            x, _ = to_batch([b[0] for b in batch])
            out = net(x)
            if net_cfg.dual_branch:
                lp = mse_loss(out["pixel"], _masks_tensor([b[1].pixel_mask.values for b in batch]))
                lc = mse_loss(
                    out["centerline"], _masks_tensor([b[1].centerline_mask.values for b in batch])
                )
                loss = cfg.pixel_weight * lp + cfg.centerline_weight * lc
                sums["centerline"] += lc.item() * len(idx)
            else:
                lp = mse_loss(out["pixel"], _masks_tensor([single_target(b[1]) for b in batch]))
                loss = lp
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite coarse loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += loss.item() * len(idx)
            sums["pixel"] += lp.item() * len(idx)
            it += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / len(samples) for k, v in sums.items()})
        if not net_cfg.dual_branch:
            del row["centerline"]
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        if verbose:
            log.info("coarse epoch %d loss %.5f", epoch, row["loss"])
    net.eval()
    ckpt = Checkpoint(
        stage="coarse",
        epoch=cfg.epochs,
        seed=cfg.seed,
        config={"coarse": net_cfg.to_dict(), "train": cfg.to_dict()},
        tensors=_state_arrays(net),
        optimizer=_optim_arrays(opt, names),
    )
    return TrainResult(ckpt, rows, net)


def fine_target(ann: AnnotationSet) -> np.ndarray:
    return ann.union()


def _coarse_maps(net: CoarseNet, x: torch.Tensor, grad: bool) -> dict:
    if grad:
        return net(x)
    with torch.no_grad():
        return net(x)


def train_fine(
    cfg: TrainConfig,
    samples,
    coarse: CoarseNet,
    srs_cfg: SrsConfig,
    coarse_ref: str = "",
    verbose: bool = False,
) -> TrainResult:
    """Fit the refiner with Dice loss on the max-fused output against the union target.

    The coarse network stays frozen (eval mode, no updates) unless ``cfg.joint``.
    """
    if not samples:
        raise DataError("empty training set")
    dual = coarse.cfg.dual_branch
    if dual != srs_cfg.refine_centerline_branch:
        raise ConfigError(
            "refiner branch layout does not match the coarse checkpoint "
            f"(coarse dual_branch={dual}, refine_centerline_branch={srs_cfg.refine_centerline_branch})"
        )
    _check_mode(samples, dual)
    rng = _seed_everything(cfg.seed)
    srs = build_srs(srs_cfg, cfg.seed)
    srs.train()
    coarse.train(cfg.joint)
    for p in coarse.parameters():
        p.requires_grad_(cfg.joint)
    params = list(srs.named_parameters())
    if cfg.joint:
        params += [("coarse." + n, p) for n, p in coarse.named_parameters()]
    names = [n for n, _ in params]
    opt = _adam([p for _, p in params], cfg)
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    max_iter = cfg.epochs * per_epoch
    it = 0
    rows = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            total = 0.0
            for idx in _batches(len(samples), cfg.batch_size, rng):
                lr = poly_lr(it, max_iter, cfg.lr, cfg.poly_power)
                for group in opt.param_groups:
                    group["lr"] = lr
                batch = _augmented(samples, idx, rng, cfg.rotation)
                x, _ = to_batch([b[0] for b in batch])
                maps = _coarse_maps(coarse, x, cfg.joint)
                _, final = refine_tensors(srs, x, maps)
                g = _masks_tensor([fine_target(b[1]) for b in batch])
                loss = dice_loss(final, g, cfg.dice_eps)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite fine loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                it += 1
            rows.append(
                {"epoch": epoch, "lr": lr, "loss": total / len(samples),
                 "seconds": time.perf_counter() - t0}
            )
            if verbose:
                log.info("fine epoch %d loss %.5f", epoch, rows[-1]["loss"])
    finally:
        for p in coarse.parameters():
            p.requires_grad_(True)
        coarse.eval()
    srs.eval()
    tensors = {**_state_arrays(srs, "srs."), **_state_arrays(coarse, "coarse.")}
    ckpt = Checkpoint(
        stage="fine",
        epoch=cfg.epochs,
        seed=cfg.seed,
        config={"coarse": coarse.cfg.to_dict(), "srs": srs_cfg.to_dict(), "train": cfg.to_dict()},
        tensors=tensors,
        optimizer=_optim_arrays(opt, names),
        coarse_ref=coarse_ref,
    )
    return TrainResult(ckpt, rows, coarse, srs)
