"""Losses, deep supervision, Adam, batch sampling, early stopping, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .audio_io import AudioBuffer, ChunkPlan, DatasetIndex, chunk, load_wav
from .denoiser import (Denoiser, DenoiserConfig, HybridModel, htmd_denoiser_config,
                       waveunet_config)
from .diffcore import NumericFault, Tensor
from .masker import Masker, MaskerConfig, convtasnet_config, htmd_masker_config

CHECKPOINT_MAGIC = b"VSEPCKP1"


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, incompatible, or of a different version."""


# ---------------------------------------------------------------------------
# losses

def mse(y, y_hat) -> Tensor:
    """Mean squared error over all elements; differentiable w.r.t. both inputs."""
    y, y_hat = dc.as_tensor(y), dc.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    diff = y_hat.data - y.data
    out = np.asarray(np.mean(diff * diff))

    def vjp(g):
        gd = g * 2.0 * diff / diff.size
        return -gd, gd

    return dc.make_node(out, (y, y_hat), vjp)


def mae(y, y_hat) -> Tensor:
    """Mean absolute error over all elements."""
    y, y_hat = dc.as_tensor(y), dc.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    diff = y_hat.data - y.data
    out = np.asarray(np.mean(np.abs(diff)))

    def vjp(g):
        gd = g * np.sign(diff) / diff.size
        return -gd, gd

    return dc.make_node(out, (y, y_hat), vjp)


_LOSS_FNS = {"mse": mse, "mae": mae}


@dataclass
class LossSpec:
    """Weighted pairing of a final-estimate loss with an optional intermediate one."""
    l1_kind: str = "mse"          # final estimate
    l2_kind: str | None = None    # intermediate estimate; None disables the branch
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.l1_kind not in _LOSS_FNS:
            raise ValueError(f"unknown l1_kind {self.l1_kind!r}")
        if self.l2_kind is not None and self.l2_kind not in _LOSS_FNS:
            raise ValueError(f"unknown l2_kind {self.l2_kind!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if (self.l2_kind is None) != (self.beta == 0):
            raise ValueError("l2_kind is None exactly when beta == 0")


# preset name -> (l2_kind, l1_kind, beta, alpha)
LOSS_PRESETS = {
    "mse-mse": ("mse", "mse", 0.5, 1.0),
    "mae-mae": ("mae", "mae", 0.5, 1.0),
    "mae-mse": ("mae", "mse", 0.05, 1.0),
    "mse-mae": ("mse", "mae", 1.0, 0.1),
    "mse": (None, "mse", 0.0, 1.0),
    "mae": (None, "mae", 0.0, 1.0),
}


def loss_preset(name: str) -> LossSpec:
    try:
        l2, l1, beta, alpha = LOSS_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown loss preset {name!r}; have {sorted(LOSS_PRESETS)}")
    return LossSpec(l1_kind=l1, l2_kind=l2, alpha=alpha, beta=beta)


def deep_loss(y, y_final, y_mid, spec: LossSpec) -> Tensor:
    """alpha * L1(y, y_final) + beta * L2(y, y_mid).

    With beta == 0 the intermediate branch is not built at all, so its
    gradients are exactly those of the plain final-estimate loss.
    """
    l1 = _LOSS_FNS[spec.l1_kind](y, y_final)
    if spec.beta == 0.0:
        return dc.scale(l1, spec.alpha)
    if y_mid is None:
        raise ValueError("loss spec has beta > 0 but the model yields no intermediate estimate")
    l2 = _LOSS_FNS[spec.l2_kind](y, y_mid)
    return dc.add(dc.scale(l1, spec.alpha), dc.scale(l2, spec.beta))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update in place. Missing gradients count as zero."""
    named_params = list(named_params)
    for name, p in named_params:
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.tensor.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# data

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    chunk_len: int = 16384
    patience: int = 20
    max_epochs: int = 100
    steps_per_epoch: int = 1000
    seed: int = 0

    def __post_init__(self):
        for f in ("learning_rate", "batch_size", "chunk_len", "patience",
                  "max_epochs", "steps_per_epoch"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")


class _SongCache:
    """Decoded mixture/vocal pairs, keyed by song id."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        song, mix_path, voc_path = self.index.entries[i]
        if song not in self._cache:
            self._cache[song] = (load_wav(mix_path).mono(), load_wav(voc_path).mono())
        return self._cache[song]


def sample_batch(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator,
                 cache: _SongCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random song, uniform random aligned crop of chunk_len samples.

    Songs shorter than chunk_len are zero-padded at the tail (flagged once
    per call via the returned arrays only; alignment is preserved).
    """
    if not index.entries:
        raise ValueError("empty dataset index")
    cache = cache or _SongCache(index)
    mixes = np.zeros((cfg.batch_size, 1, cfg.chunk_len), dtype=np.float32)
    vocs = np.zeros((cfg.batch_size, 1, cfg.chunk_len), dtype=np.float32)
    for b in range(cfg.batch_size):
        i = int(rng.integers(len(index.entries)))
        mix, voc = cache.get(i)
        if mix.size <= cfg.chunk_len:
            mixes[b, 0, :mix.size] = mix
            vocs[b, 0, :voc.size] = voc
        else:
            off = int(rng.integers(mix.size - cfg.chunk_len + 1))
            mixes[b, 0] = mix[off:off + cfg.chunk_len]
            vocs[b, 0] = voc[off:off + cfg.chunk_len]
    return mixes, vocs


class DiskDataset:
    """Training sampler plus a deterministic validation tiling."""

    def __init__(self, train_index: DatasetIndex, valid_index: DatasetIndex,
                 cfg: TrainConfig):
        self.cfg = cfg
        self.train_cache = _SongCache(train_index)
        self.valid_cache = _SongCache(valid_index)
        self.train_index = train_index
        self.valid_index = valid_index

    def sample_batch(self, rng):
        return sample_batch(self.train_index, self.cfg, rng, self.train_cache)

    def validation_batches(self):
        plan = ChunkPlan(self.cfg.chunk_len, self.cfg.chunk_len)
        for i in range(len(self.valid_index.entries)):
            mix, voc = self.valid_cache.get(i)
            rate = self.valid_index.sample_rate or 22050
            mix_chunks = chunk(AudioBuffer(mix, rate), plan)
            voc_chunks = chunk(AudioBuffer(voc, rate), plan)
            for j in range(0, mix_chunks.shape[0], self.cfg.batch_size):
                mb = mix_chunks[j:j + self.cfg.batch_size][:, None, :]
                vb = voc_chunks[j:j + self.cfg.batch_size][:, None, :]
                yield mb, vb


class ArrayDataset:
    """Fixed in-memory chunks; validation equals the training material."""

    def __init__(self, mixtures: np.ndarray, vocals: np.ndarray, batch_size: int = 1):
        self.mixtures = np.asarray(mixtures, dtype=np.float32)
        self.vocals = np.asarray(vocals, dtype=np.float32)
        if self.mixtures.shape != self.vocals.shape or self.mixtures.ndim != 3:
            raise ValueError("expect matching (n, 1, T) arrays")
        self.batch_size = batch_size

    def sample_batch(self, rng):
        idx = rng.integers(self.mixtures.shape[0], size=self.batch_size)
        return self.mixtures[idx], self.vocals[idx]

    def validation_batches(self):
        yield self.mixtures, self.vocals


# ---------------------------------------------------------------------------
# model factory (used by checkpoints and the CLI)

MODEL_PRESETS = ("htmd", "convtasnet", "waveunet")


def build_model(kind: str, model_config: dict, seed: int = 0):
    rng = np.random.default_rng(seed)
    if kind == "htmd":
        masker = Masker(MaskerConfig(**model_config["masker"]), rng)
        den = Denoiser(DenoiserConfig(**model_config["denoiser"]), rng)
        return HybridModel(masker, den)
    if kind == "convtasnet":
        return Masker(MaskerConfig(**model_config["masker"]), rng)
    if kind == "waveunet":
        return Denoiser(DenoiserConfig(**model_config["denoiser"]), rng)
    raise ValueError(f"unknown model kind {kind!r}")


def model_config_dict(model) -> dict:
    if isinstance(model, HybridModel):
        return {"masker": asdict(model.masker.cfg), "denoiser": asdict(model.denoiser.cfg)}
    if isinstance(model, Masker):
        return {"masker": asdict(model.cfg)}
    if isinstance(model, Denoiser):
        return {"denoiser": asdict(model.cfg)}
    raise ValueError(f"unknown model type {type(model)!r}")


def default_config(kind: str) -> dict:
    if kind == "htmd":
        return {"masker": asdict(htmd_masker_config()),
                "denoiser": asdict(htmd_denoiser_config())}
    if kind == "convtasnet":
        return {"masker": asdict(convtasnet_config())}
    if kind == "waveunet":
        return {"denoiser": asdict(waveunet_config())}
    raise ValueError(f"unknown model kind {kind!r}")


def default_model(kind: str, seed: int = 0):
    return build_model(kind, default_config(kind), seed)


# ---------------------------------------------------------------------------
# checkpointing

def _config_hash(kind: str, model_config: dict) -> str:
    blob = json.dumps({"kind": kind, "config": model_config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(model, opt_state: AdamState | None, path: str, *,
                    history: list | None = None,
                    rng_state: dict | None = None) -> None:
    """Header (JSON) + raw little-endian float32 blobs; bitwise round-trip."""
    kind = model.kind
    model_config = model_config_dict(model)
    arrays = model.state_arrays()
    if opt_state is not None:
        arrays.extend((f"adam.m.{k}", v) for k, v in opt_state.m.items())
        arrays.extend((f"adam.v.{k}", v) for k, v in opt_state.v.items())
    manifest = []
    blob = io.BytesIO()
    offset = 0
    for name, arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr32.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "model_kind": kind,
        "model_config": model_config,
        "config_hash": _config_hash(kind, model_config),
        "adam_step": opt_state.step if opt_state is not None else None,
        "history": history or [],
        "rng_state": rng_state,
        "manifest": manifest,
    }
    hbytes = json.dumps(header).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (model, opt_state, header). Raises CheckpointError on any mismatch."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header ({e})") from e
        blob = fh.read()
    if header.get("format_version") != 1:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{header.get('format_version')}")
    kind = header["model_kind"]
    model_config = header["model_config"]
    if _config_hash(kind, model_config) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch (corrupt or edited header)")
    arrays: dict[str, np.ndarray] = {}
    for item in header["manifest"]:
        start, n = item["offset"], item["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"{path}: manifest entry {item['name']} beyond blob end")
        arrays[item["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n // 4, offset=start).reshape(item["shape"]).copy()
    model = build_model(kind, model_config, seed=0)
    model.load_state_arrays(arrays)
    opt_state = None
    if header.get("adam_step") is not None:
        opt_state = AdamState(step=header["adam_step"])
        for name, arr in arrays.items():
            if name.startswith("adam.m."):
                opt_state.m[name[len("adam.m."):]] = arr
            elif name.startswith("adam.v."):
                opt_state.v[name[len("adam.v."):]] = arr
    return model, opt_state, header


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]        # (epoch, train_loss, valid_loss)
    best_epoch: int
    best_valid: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool
    final_rng_state: dict | None = None            # for resumable checkpoints
    final_state: dict[str, np.ndarray] | None = None


def _clone_state(model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays()}


def evaluate_loss(model, data, spec: LossSpec) -> float:
    """Mean deep loss over the validation batches (eval-mode forward)."""
    total, count = 0.0, 0
    for mix, voc in data.validation_batches():
        final, mid = model.forward(Tensor(mix), training=False)
        loss = deep_loss(Tensor(voc), final, mid, spec)
        n = mix.shape[0]
        total += loss.item() * n
        count += n
    if count == 0:
        raise ValueError("validation set produced no batches")
    return total / count


def train(model, data, cfg: TrainConfig, spec: LossSpec, *,
          resume: str | None = None, save_final_to: str | None = None,
          step_callback=None) -> TrainResult:
    """Adam training with early stopping on validation loss.

    Each epoch runs cfg.steps_per_epoch optimizer steps on random crops,
    then scores the deterministic validation tiling. The best-validation
    parameter snapshot is restored into `model` before returning;
    `save_final_to` writes a resumable end-of-run checkpoint (final
    parameters, optimizer moments, RNG state, history) beforehand. With
    `resume`, training continues from such a checkpoint and reproduces an
    uninterrupted run exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history: list[tuple[int, float, float]] = []
    best_valid = float("inf")
    best_epoch = -1
    best_state = _clone_state(model)
    start_epoch = 0
    if resume is not None:
        ck_model, ck_state, header = load_checkpoint(resume)
        if ck_model.kind != model.kind:
            raise CheckpointError(f"resume kind {ck_model.kind!r} != model {model.kind!r}")
        model.load_state_arrays(dict(ck_model.state_arrays()))
        state = ck_state or AdamState()
        history = [tuple(h) for h in header.get("history", [])]
        if header.get("rng_state"):
            rng.bit_generator.state = header["rng_state"]
        if history:
            start_epoch = int(history[-1][0]) + 1
            best_epoch, best_valid = min(
                ((int(e), v) for e, _t, v in history), key=lambda p: p[1])
        best_state = _clone_state(model)

    stopped_early = False
    named = list(model.named_parameters())
    for epoch in range(start_epoch, cfg.max_epochs):
        train_total = 0.0
        for _ in range(cfg.steps_per_epoch):
            mix, voc = data.sample_batch(rng)
            final, mid = model.forward(Tensor(mix), training=True)
            loss = deep_loss(Tensor(voc), final, mid, spec)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericFault(f"non-finite training loss at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            adam_step(named, state, cfg.learning_rate)
            train_total += value
            if step_callback is not None:
                step_callback(state.step, value)
        valid = evaluate_loss(model, data, spec)
        history.append((epoch, train_total / cfg.steps_per_epoch, valid))
        if valid < best_valid:
            best_valid = valid
            best_epoch = epoch
            best_state = _clone_state(model)
        elif epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break
    final_state = _clone_state(model)
    if save_final_to is not None:
        save_checkpoint(model, state, save_final_to, history=history,
                        rng_state=rng.bit_generator.state)
    model.load_state_arrays(best_state)
    return TrainResult(history=history, best_epoch=best_epoch, best_valid=best_valid,
                       best_state=best_state, stopped_early=stopped_early,
                       final_rng_state=rng.bit_generator.state,
                       final_state=final_state)


def write_history_csv(history, path: str) -> None:
    import csv
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "valid_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
    os.replace(tmp, path)
