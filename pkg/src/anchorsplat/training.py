"""Parameter optimization, checkpointing, and the train/render/evaluate
loops.

Training is deliberately plain: views are visited round-robin, the optimizer
is Adam with constant per-group learning rates, and any non-finite loss or
gradient aborts immediately (after writing the last-good checkpoint) rather
than being clamped.  Fixed seed + single-threaded execution gives
byte-identical checkpoints and logs across runs.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hgsa import NUM_HEADS
from .image import ImageBuffer
from .losses import LossWeights, nlpd_loss, psnr, ssim
from .model import AblationFlags, SplatModel, blank_model
from .scene import Camera, PointCloud, voxelize_anchors
from .sceneio import SceneDirectory
from .tensor import Tensor, no_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

CHECKPOINT_MAGIC = b"PEPG"
CHECKPOINT_VERSION = 1

LOG_HEADER = "iter,loss,l2,dssim,vol,nlpd"


# -- configuration ------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Resolved run configuration; echoed verbatim into checkpoints and the
    run manifest."""

    iterations: int = 30000
    k: int = 10
    voxel_size: float = 0.25
    tau_alpha: float = 0.0
    seed: int = 0
    lr_features: float = 2.5e-3
    lr_offsets: float = 1e-2
    lr_scales: float = 7e-3
    lr_heads: float = 2e-3
    lambda_dssim: float = 0.2
    lambda_vol: float = 0.01
    lambda_nlpd: float = 0.2
    use_l1: bool = False
    kan_hidden: int = 16
    snapshot_every: int = 0
    disable_nlpd: bool = False
    disable_hgsa: bool = False
    disable_kan_cov: bool = False
    disable_kan_op: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.voxel_size <= 0:
            raise ValueError("invalid voxel size")
        if self.kan_hidden < 1:
            raise ValueError("kan_hidden must be at least 1")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be nonnegative")
        for name in ("lr_features", "lr_offsets", "lr_scales", "lr_heads"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        self.loss_weights()  # validates the lambda ranges

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_dssim=self.lambda_dssim,
            lambda_vol=self.lambda_vol,
            lambda_nlpd=0.0 if self.disable_nlpd else self.lambda_nlpd,
        )

    def flags(self) -> AblationFlags:
        return AblationFlags(
            disable_nlpd=self.disable_nlpd,
            disable_hgsa=self.disable_hgsa,
            disable_kan_cov=self.disable_kan_cov,
            disable_kan_op=self.disable_kan_op,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "TrainConfig":
        """Build a config from (possibly string-valued) key/value pairs,
        rejecting unknown keys with the list of valid ones."""
        defaults = cls()
        valid = [f.name for f in dataclasses.fields(cls)]
        unknown = sorted(set(mapping) - set(valid))
        if unknown:
            raise ValueError(
                f"unknown config keys {unknown}; valid keys are {sorted(valid)}"
            )
        kwargs = {}
        for key, value in mapping.items():
            kwargs[key] = _coerce(value, type(getattr(defaults, key)), key)
        return cls(**kwargs)


def _coerce(value, target: type, key: str):
    if isinstance(value, str):
        text = value.strip()
        if target is bool:
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"config key {key!r}: cannot parse {value!r} as a boolean")
        try:
            return target(text)
        except ValueError as exc:
            raise ValueError(
                f"config key {key!r}: cannot parse {value!r} as {target.__name__}"
            ) from exc
    if target is bool:
        return bool(value)
    if target is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"config key {key!r}: {value!r} is not an integer")
        return int(value)
    if target is float:
        return float(value)
    return value


def parameter_group(name: str) -> str:
    """Learning-rate group for a parameter name."""
    if name == "anchors.features":
        return "features"
    if name == "anchors.offsets":
        return "offsets"
    if name == "anchors.log_scales":
        return "scales"
    return "heads"


# -- parameter store and optimizer ------------------------------------------------


class ParameterStore:
    """Named parameter tensors plus Adam first/second moments and the shared
    step count."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.step_count = 0

    @classmethod
    def for_model(cls, model: SplatModel) -> "ParameterStore":
        return cls(model.parameters())

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def check_finite_grads(self) -> None:
        for name, t in self.params.items():
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


def adam_step(
    store: ParameterStore, learning_rate: float | Mapping[str, float]
) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards.

    ``learning_rate`` is either a single float or a map from group name
    (see ``parameter_group``) to rate."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in store.params.items():
        if isinstance(learning_rate, Mapping):
            lr = learning_rate[parameter_group(name)]
        else:
            lr = learning_rate
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = store.m[name], store.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.zero_grad()


def learning_rates(config: TrainConfig) -> dict[str, float]:
    return {
        "features": config.lr_features,
        "offsets": config.lr_offsets,
        "scales": config.lr_scales,
        "heads": config.lr_heads,
    }


# -- checkpoint format --------------------------------------------------------------


@dataclass
class Checkpoint:
    """Config echo plus named parameter arrays (values exactly representable
    in little-endian float32, as stored)."""

    config: TrainConfig
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, config: TrainConfig, arrays: Mapping[str, np.ndarray]) -> None:
    payload = bytearray()
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(blob)) + blob
    payload += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        # np.ascontiguousarray would promote 0-d gate biases to 1-d
        data = np.asarray(arrays[name], dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded)) + encoded
        payload += struct.pack("<I", data.ndim)
        payload += struct.pack(f"<{data.ndim}I", *data.shape)
        payload += data.tobytes()
    body = CHECKPOINT_MAGIC + bytes(payload)
    checksum = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body + checksum)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    body, tail = raw[:-4], raw[-4:]
    if struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF) != tail:
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    offset = 4

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, body, offset)
        offset += size
        return values

    (version,) = read("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = read("<I")
    config = TrainConfig.from_mapping(
        json.loads(body[offset : offset + config_len].decode("utf-8"))
    )
    offset += config_len
    (count,) = read("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(body, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        arrays[name] = data.reshape(shape).astype(np.float64)
    return Checkpoint(config=config, arrays=arrays)


def checkpoint_arrays(model: SplatModel) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in model.parameters().items()}
    arrays["anchors.positions"] = model.positions
    return arrays


def model_from_checkpoint(ckpt: Checkpoint) -> SplatModel:
    positions = ckpt.arrays.get("anchors.positions")
    if positions is None:
        raise ValueError("checkpoint missing parameter 'anchors.positions'")
    config = ckpt.config
    model = blank_model(
        positions,
        k=config.k,
        tau_alpha=config.tau_alpha,
        flags=config.flags(),
        kan_hidden=config.kan_hidden,
    )
    model.positions = positions.copy()
    params = model.parameters()
    stored = set(ckpt.arrays) - {"anchors.positions"}
    missing = sorted(set(params) - stored)
    extra = sorted(stored - set(params))
    if missing or extra:
        raise ValueError(
            f"checkpoint parameters do not match model: missing {missing}, unexpected {extra}"
        )
    for name, tensor in params.items():
        stored_arr = ckpt.arrays[name]
        if stored_arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {stored_arr.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data[...] = stored_arr
    return model


# -- train loop ---------------------------------------------------------------------


def split_views(count: int) -> tuple[list[int], list[int]]:
    """Every 8th view (0, 8, 16, ...) is held out for testing; a single-view
    scene trains on its only view."""
    if count < 1:
        raise ValueError("scene has no views")
    if count == 1:
        return [0], []
    train = [i for i in range(count) if i % 8 != 0]
    test = [i for i in range(count) if i % 8 == 0]
    return train, test


def model_for_scene(cloud: PointCloud, config: TrainConfig) -> SplatModel:
    """Voxelize anchors and initialize a model, all from the config seed."""
    rng = np.random.default_rng(config.seed)
    anchors = voxelize_anchors(cloud, config.voxel_size, k=config.k, rng=rng)
    return SplatModel.create(
        anchors,
        rng,
        tau_alpha=config.tau_alpha,
        flags=config.flags(),
        kan_hidden=config.kan_hidden,
    )


def format_log_rows(rows: list[dict]) -> str:
    lines = [LOG_HEADER]
    for row in rows:
        lines.append(
            f"{row['iter']},{row['loss']!r},{row['l2']!r},"
            f"{row['dssim']!r},{row['vol']!r},{row['nlpd']!r}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    manifest_path: Path
    rows: list[dict] = field(default_factory=list)
    final_render: np.ndarray | None = None
    final_view: int | None = None


def train(scene: SceneDirectory, config: TrainConfig, out_dir: str | Path) -> TrainResult:
    """Optimize a model against the scene's training views.

    Writes ``checkpoint.bin``, ``train_log.csv``, and ``run_manifest.json``
    into ``out_dir`` (plus ``snapshot_*.bin`` at the configured cadence).
    The recorded final render is produced from the reloaded checkpoint, so
    it agrees bit-for-bit with later ``render`` calls on that file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.bin"
    log_path = out / "train_log.csv"
    manifest_path = out / "run_manifest.json"

    train_views, test_views = split_views(scene.view_count)
    model = model_for_scene(scene.cloud, config)
    store = ParameterStore.for_model(model)
    rates = learning_rates(config)
    weights = config.loss_weights()
    background = np.zeros(3)

    rows: list[dict] = []

    def write_artifacts() -> None:
        save_checkpoint(checkpoint_path, config, checkpoint_arrays(model))
        log_path.write_text(format_log_rows(rows))

    view = train_views[0]
    for it in range(1, config.iterations + 1):
        view = train_views[(it - 1) % len(train_views)]
        camera = scene.cameras[view]
        loss, parts, _ = model.loss_view(
            camera, scene.images[view], weights, background=background, use_l1=config.use_l1
        )
        if not np.isfinite(loss.data):
            write_artifacts()
            raise FloatingPointError(
                f"non-finite loss at iteration {it}; "
                f"last-good checkpoint written to {checkpoint_path}"
            )
        if loss.requires_grad:
            loss.backward()
            store.check_finite_grads()
            adam_step(store, rates)
        # else: the view decoded no retained Gaussians, so the loss is a
        # constant with zero gradients everywhere -- log it and move on.
        rows.append({"iter": it, "loss": float(loss.data), **parts})
        if config.snapshot_every and it % config.snapshot_every == 0:
            save_checkpoint(
                out / f"snapshot_{it:06d}.bin", config, checkpoint_arrays(model)
            )

    write_artifacts()
    manifest = {
        "config": config.to_dict(),
        "attention_heads": NUM_HEADS,
        "anchor_count": model.anchor_count,
        "train_views": train_views,
        "test_views": test_views,
        "artifacts": sorted(p.name for p in out.iterdir() if p.is_file() and p != manifest_path),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    # Round the in-memory parameters through the saved float32 checkpoint
    # before the capture, so capture == render(checkpoint) exactly.
    reloaded = model_from_checkpoint(load_checkpoint(checkpoint_path))
    with no_grad():
        final = reloaded.render_view(scene.cameras[view], background)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        manifest_path=manifest_path,
        rows=rows,
        final_render=final.data.copy(),
        final_view=view,
    )


# -- render / evaluate ---------------------------------------------------------------


def render_model(model: SplatModel, camera: Camera, background: np.ndarray | None = None) -> ImageBuffer:
    with no_grad():
        img = model.render_view(camera, background)
    return ImageBuffer(img.data.copy())


def render_checkpoint(path: str | Path, camera: Camera, background: np.ndarray | None = None) -> ImageBuffer:
    return render_model(model_from_checkpoint(load_checkpoint(path)), camera, background)


def evaluate_model(
    model: SplatModel,
    scene: SceneDirectory,
    view_indices: list[int],
    background: np.ndarray | None = None,
) -> dict:
    """Per-view and mean PSNR / SSIM / NLPD over the given views."""
    if not view_indices:
        raise ValueError("no test views")
    views = []
    for index in view_indices:
        render = render_model(model, scene.cameras[index], background)
        gt = scene.images[index]
        views.append(
            {
                "view": index,
                "psnr": psnr(render, gt),
                "ssim": ssim(render, gt),
                "nlpd": nlpd_loss(render, gt),
            }
        )
    mean = {
        metric: float(np.mean([v[metric] for v in views]))
        for metric in ("psnr", "ssim", "nlpd")
    }
    return {"views": views, "mean": mean}
