"""Disk formats: images, weight files, dataset manifests and run configs.

Images enter the numerical core in [-1, 1]. 8-bit files map v -> v/127.5 - 1;
raw float files (``.f32`` plus a ``.hdr`` text sidecar holding ``H W C``) store
float32 values unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import tinycnn
from .denoiser import TinyCNN

log = logging.getLogger(__name__)

EIGHT_BIT = {".png", ".pgm"}
RAW = {".f32", ".raw"}


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class IncompatibleWeightsError(FormatError):
    pass


def _check_writable(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".hdr")


def load_image(path) -> np.ndarray:
    """Read an image as float64 (H, W, C) in [-1, 1]."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in RAW:
        hdr = _sidecar(path)
        try:
            h, w, c = (int(v) for v in hdr.read_text().split())
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read sidecar {hdr}: {exc}") from exc
        data = np.fromfile(path, dtype="<f4")
        if data.size != h * w * c:
            raise FormatError(f"{path}: {data.size} values, sidecar says {h}x{w}x{c}")
        return data.reshape(h, w, c).astype(np.float64)
    if ext in EIGHT_BIT:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported mode {im.mode}, need 8-bit L or RGB")
            arr = np.asarray(im, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[..., None]
        return arr / 127.5 - 1.0
    raise FormatError(f"unsupported image extension {ext!r}")


def save_image(img, path, overwrite: bool = False) -> None:
    path = Path(path)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    ext = path.suffix.lower()
    _check_writable(path, overwrite)
    if ext in RAW:
        img.astype("<f4").tofile(path)
        _sidecar(path).write_text(f"{img.shape[0]} {img.shape[1]} {img.shape[2]}\n")
    elif ext in EIGHT_BIT:
        q = np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
        if q.shape[2] == 1:
            Image.fromarray(q[..., 0], mode="L").save(path)
        elif q.shape[2] == 3:
            Image.fromarray(q, mode="RGB").save(path)
        else:
            raise FormatError("8-bit output supports 1 or 3 channels")
    else:
        raise FormatError(f"unsupported image extension {ext!r}")


# -- weights ---------------------------------------------------------------

WEIGHTS_MAGIC = "RDDPM-WEIGHTS"
WEIGHTS_VERSION = 1


def save_weights(model: TinyCNN, path, overwrite: bool = False) -> None:
    path = Path(path)
    _check_writable(path, overwrite)
    block = np.ascontiguousarray(model.params, dtype="<f4").tobytes()
    a = model.arch
    header = (
        f"{WEIGHTS_MAGIC}\n"
        f"format_version: {WEIGHTS_VERSION}\n"
        f"architecture: {tinycnn.ARCH_ID}\n"
        f"channels: {a.channels}\n"
        f"features: {a.features}\n"
        f"temb_dim: {a.temb_dim}\n"
        f"num_params: {a.num_params}\n"
        f"seed: {model.seed}\n"
        f"sha256: {hashlib.sha256(block).hexdigest()}\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(block)


def load_weights(path) -> TinyCNN:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    cut = raw.find(marker)
    if not raw.startswith(WEIGHTS_MAGIC.encode()) or cut < 0:
        raise FormatError(f"{path} is not a weight file")
    lines = raw[:cut].decode("ascii").splitlines()[1:]
    meta = dict(line.split(": ", 1) for line in lines)
    if int(meta.get("format_version", -1)) != WEIGHTS_VERSION:
        raise IncompatibleWeightsError(f"unsupported format version {meta.get('format_version')}")
    if meta.get("architecture") != tinycnn.ARCH_ID:
        raise IncompatibleWeightsError(
            f"weights are for architecture {meta.get('architecture')!r}, expected {tinycnn.ARCH_ID!r}"
        )
    block = raw[cut + len(marker):]
    if hashlib.sha256(block).hexdigest() != meta["sha256"]:
        raise ChecksumError(f"{path}: parameter block checksum mismatch")
    arch = tinycnn.Architecture(int(meta["channels"]), int(meta["features"]), int(meta["temb_dim"]))
    params = np.frombuffer(block, dtype="<f4").astype(np.float32)
    if params.size != int(meta["num_params"]) or params.size != arch.num_params:
        raise IncompatibleWeightsError("parameter count does not match architecture")
    return TinyCNN(arch, params, seed=int(meta["seed"]))


# -- datasets --------------------------------------------------------------

def write_manifest(entries: list[dict], path, overwrite: bool = False) -> None:
    path = Path(path)
    _check_writable(path, overwrite)
    path.write_text(json.dumps({"entries": entries}, indent=1) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = json.loads(path.read_text())["entries"]
    base = path.parent
    for e in entries:
        for key in ("clean", "degraded"):
            if key in e and not Path(e[key]).is_absolute():
                e[key] = str(base / e[key])
    return entries


def count_tiles(length: int, patch: int, stride: int) -> int:
    if patch > length:
        return 0
    return (length - patch) // stride + 1


def tile_dataset(manifest, patch: int, stride: int, out_dir, overwrite: bool = False) -> int:
    """Cut every (clean, degraded) pair into row-major patches; returns the patch count.

    Patches are written as raw float files next to a new ``manifest.json``.
    Images smaller than ``patch`` are skipped with a warning.
    """
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    out_dir = Path(out_dir)
    out = []
    for i, e in enumerate(entries):
        clean = load_image(e["clean"])
        degraded = load_image(e["degraded"]) if e.get("degraded") else None
        h, w = clean.shape[:2]
        nr, nc = count_tiles(h, patch, stride), count_tiles(w, patch, stride)
        if nr == 0 or nc == 0:
            log.warning("skipping %s: %dx%d is smaller than patch %d", e["clean"], h, w, patch)
            continue
        for r in range(nr):
            for c in range(nc):
                sl = (slice(r * stride, r * stride + patch), slice(c * stride, c * stride + patch))
                stem = f"img{i:05d}_r{r:03d}_c{c:03d}"
                item = {"clean": f"{stem}_clean.f32", "spec": e.get("spec")}
                save_image(clean[sl], out_dir / item["clean"], overwrite)
                if degraded is not None:
                    item["degraded"] = f"{stem}_degraded.f32"
                    save_image(degraded[sl], out_dir / item["degraded"], overwrite)
                out.append(item)
    write_manifest(out, out_dir / "manifest.json", overwrite)
    return len(out)


def load_pairs(manifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack all (clean, degraded) images of a manifest into two (N, H, W, C) arrays."""
    entries = read_manifest(manifest)
    clean = np.stack([load_image(e["clean"]) for e in entries])
    noisy = np.stack([load_image(e["degraded"]) for e in entries])
    return clean, noisy


# -- run configuration -----------------------------------------------------

@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerSection:
    kind: str = "ddpm"
    steps: int | None = None
    eta: float = 0.0
    variance: str = "beta"


@dataclass
class RegionalSection:
    window: int = 64
    stride: int = 16
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    batch_size: int = 8

    def __post_init__(self):
        if self.window % self.stride:
            raise ValueError("regional.window must be a multiple of regional.stride")


@dataclass
class TrainingSection:
    learning_rate: float = 2e-5
    batch_size: int = 4
    iterations: int = 20000
    patch: int = 64


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    regional: RegionalSection = field(default_factory=RegionalSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    manifest: str | None = None
    output_dir: str = "out"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


OUTPUT_DIR_ENV = "RDDPM_OUTPUT_DIR"


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value or {})
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a YAML run config; ``overrides`` (dotted keys) win over the file,
    and the output-dir environment variable wins over the file value."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    if os.environ.get(OUTPUT_DIR_ENV):
        data["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = _build(RunConfig, data)
    if cfg.manifest is not None and not Path(cfg.manifest).exists():
        raise FileNotFoundError(f"manifest {cfg.manifest} not found")
    return cfg
