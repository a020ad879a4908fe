"""WAV decode/encode, mono mixdown, 2:1 resampling, dataset indexing, chunking.

Audio is held as float32 in [-1, 1]. WAV support covers RIFF little-endian
PCM-16 and IEEE-float-32, mono or stereo, which is all the dataset layout
uses. Integer samples map to floats by division by 32768.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

PCM_SCALE = 32768.0


class WavFormatError(ValueError):
    """File is not a WAV this reader supports (codec, bit depth, structure)."""


class TruncatedWavError(WavFormatError):
    """Data chunk shorter than its declared size."""


class DatasetError(ValueError):
    """Dataset directory violates the expected layout."""


@dataclass
class AudioBuffer:
    """Interleaved samples + rate + channel count.

    Invariants: finite samples, len(samples) divisible by channels.
    """
    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.samples.size % self.channels:
            raise ValueError("sample count not divisible by channel count")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def frame_count(self) -> int:
        return self.samples.size // self.channels

    @property
    def duration(self) -> float:
        return self.frame_count / self.sample_rate

    def as_frames(self) -> np.ndarray:
        """(frames, channels) view of the interleaved data."""
        return self.samples.reshape(self.frame_count, self.channels)

    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise ValueError("buffer is not mono")
        return self.samples


@dataclass
class DatasetIndex:
    split: str
    entries: list[tuple[str, str, str]]  # (song_id, mixture_path, vocals_path)
    sample_rate: int | None = None

    def __len__(self):
        return len(self.entries)


@dataclass
class ChunkPlan:
    chunk_len: int = 16384
    hop: int = 16384
    pad_mode: str = "zero"

    def __post_init__(self):
        if not (0 < self.hop <= self.chunk_len):
            raise ValueError("require 0 < hop <= chunk_len")
        if self.pad_mode != "zero":
            raise ValueError("only zero padding is supported")


# ---------------------------------------------------------------------------
# WAV

@dataclass
class WavInfo:
    sample_rate: int
    channels: int
    frames: int
    codec: str  # "pcm16" | "float32"


def _read_fmt_and_data(raw: bytes, path: str) -> tuple[WavInfo, bytes]:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    declared = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            declared = size
            data = body
            if len(body) < size:
                raise TruncatedWavError(
                    f"{path}: data chunk declares {size} bytes, file holds {len(body)}")
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _byte_rate, _block, bits = fmt
    if channels < 1 or channels > 2:
        raise WavFormatError(f"{path}: {channels} channels unsupported (need 1-2)")
    if tag == 1 and bits == 16:
        codec = "pcm16"
        frame_bytes = 2 * channels
    elif tag == 3 and bits == 32:
        codec = "float32"
        frame_bytes = 4 * channels
    else:
        raise WavFormatError(f"{path}: unsupported codec (format tag {tag}, {bits}-bit)")
    if declared % frame_bytes:
        raise TruncatedWavError(f"{path}: data size {declared} not a whole frame count")
    info = WavInfo(sample_rate=rate, channels=channels,
                   frames=declared // frame_bytes, codec=codec)
    return info, data[:declared]


def wav_info(path: str) -> WavInfo:
    """Header-only inspection (cheap; reads the file once, decodes nothing)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    info, _ = _read_fmt_and_data(raw, path)
    return info


def load_wav(path: str) -> AudioBuffer:
    """Decode PCM-16 (scaled by 1/32768) or IEEE-float-32 (passthrough)."""
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    info, data = _read_fmt_and_data(raw, path)
    if info.codec == "pcm16":
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / PCM_SCALE
    else:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    return AudioBuffer(samples=samples, sample_rate=info.sample_rate,
                       channels=info.channels)


def write_wav(buf: AudioBuffer, path: str, format: str = "pcm16") -> None:
    """Encode to PCM-16 (values outside [-1, 1] clip to full scale) or float-32."""
    if buf.samples.size == 0:
        raise ValueError("refusing to write an empty buffer")
    if not np.all(np.isfinite(buf.samples)):
        raise ValueError("NaN or Inf in samples")
    if format == "pcm16":
        scaled = np.clip(np.round(buf.samples.astype(np.float64) * PCM_SCALE),
                         -32768, 32767).astype("<i2")
        payload = scaled.tobytes()
        tag, bits = 1, 16
    elif format == "float32":
        payload = buf.samples.astype("<f4").tobytes()
        tag, bits = 3, 32
    else:
        raise ValueError(f"unknown format {format!r}")
    block = buf.channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, tag, buf.channels, buf.sample_rate,
        buf.sample_rate * block, block, bits,
        b"data", len(payload))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\x00")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# preprocessing

def to_mono(buf: AudioBuffer) -> AudioBuffer:
    """Arithmetic mean across channels; mono passes through unchanged."""
    if buf.channels == 1:
        return buf
    if buf.channels != 2:
        raise ValueError(f"to_mono supports 1-2 channels, got {buf.channels}")
    mixed = buf.as_frames().mean(axis=1, dtype=np.float64).astype(np.float32)
    return AudioBuffer(samples=mixed, sample_rate=buf.sample_rate, channels=1)


def halfband_fir(taps: int = 65, cutoff_ratio: float = 0.5) -> np.ndarray:
    """Hann-windowed sinc low-pass for decimation by 2.

    `cutoff_ratio` is the corner as a fraction of the input Nyquist; the
    default 0.5 places it at the post-decimation band edge, keeping the
    passband through ~0.9 of the new band while the stopband suppresses
    everything that would alias. Taps are normalized to unit DC gain.
    """
    if taps < 3:
        raise ValueError("need at least 3 taps")
    fc = 0.5 * cutoff_ratio  # cycles/sample at the input rate
    m = (taps - 1) / 2.0
    n = np.arange(taps)
    h = 2.0 * fc * np.sinc(2.0 * fc * (n - m))
    h *= np.hanning(taps)
    return (h / h.sum()).astype(np.float64)


def resample_half(buf: AudioBuffer, taps: int = 65) -> AudioBuffer:
    """Anti-aliased decimation by 2 (windowed-sinc FIR then keep every other frame)."""
    if buf.sample_rate % 2:
        raise ValueError(f"sample rate {buf.sample_rate} is odd; cannot halve")
    if buf.frame_count < taps:
        raise ValueError(f"buffer ({buf.frame_count} frames) shorter than filter ({taps} taps)")
    h = halfband_fir(taps)
    frames = buf.as_frames().astype(np.float64)
    out_cols = []
    for c in range(buf.channels):
        filtered = np.convolve(frames[:, c], h, mode="same")
        out_cols.append(filtered[::2])
    out = np.stack(out_cols, axis=1).reshape(-1).astype(np.float32)
    return AudioBuffer(samples=out, sample_rate=buf.sample_rate // 2,
                       channels=buf.channels)


# ---------------------------------------------------------------------------
# dataset

def index_dataset(root: str, valid_songs: int | None = None
                  ) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Scan root/{train,test}/<song>/{mixture.wav,vocals.wav}.

    Songs are ordered lexicographically; the last `valid_songs` train songs
    form the validation split (default: 25% of the train set, rounded).
    """
    splits = {}
    for part in ("train", "test"):
        part_dir = os.path.join(root, part)
        if not os.path.isdir(part_dir):
            raise DatasetError(f"missing directory {part_dir}")
        entries = []
        for song in sorted(os.listdir(part_dir)):
            song_dir = os.path.join(part_dir, song)
            if not os.path.isdir(song_dir):
                continue
            mixture = os.path.join(song_dir, "mixture.wav")
            vocals = os.path.join(song_dir, "vocals.wav")
            for stem in (mixture, vocals):
                if not os.path.isfile(stem):
                    raise DatasetError(f"song {song!r}: missing {os.path.basename(stem)}")
            mi, vi = wav_info(mixture), wav_info(vocals)
            if mi.frames != vi.frames:
                raise DatasetError(
                    f"song {song!r}: mixture has {mi.frames} frames, vocals {vi.frames}")
            if mi.sample_rate != vi.sample_rate:
                raise DatasetError(
                    f"song {song!r}: sample rates differ ({mi.sample_rate} vs {vi.sample_rate})")
            entries.append((song, mixture, vocals))
        splits[part] = entries
    train_all = splits["train"]
    if not train_all:
        raise DatasetError(f"no songs under {os.path.join(root, 'train')}")
    if valid_songs is None:
        valid_songs = round(len(train_all) * 0.25)
    if not (0 <= valid_songs < len(train_all)):
        raise DatasetError(f"valid_songs={valid_songs} out of range for "
                           f"{len(train_all)} train songs")
    cut = len(train_all) - valid_songs
    rate = wav_info(train_all[0][1]).sample_rate
    return (DatasetIndex("train", train_all[:cut], rate),
            DatasetIndex("valid", train_all[cut:], rate),
            DatasetIndex("test", splits["test"], rate))


# ---------------------------------------------------------------------------
# chunking

def chunk(buf: AudioBuffer, plan: ChunkPlan) -> np.ndarray:
    """Slice a mono buffer into ceil(len/hop) chunks of chunk_len, zero-padding the tail."""
    x = buf.mono()
    if x.size == 0:
        raise ValueError("empty buffer")
    n = math.ceil(x.size / plan.hop)
    out = np.zeros((n, plan.chunk_len), dtype=np.float32)
    for i in range(n):
        start = i * plan.hop
        piece = x[start:start + plan.chunk_len]
        out[i, :piece.size] = piece
    return out


def overlap_add(frames: np.ndarray, plan: ChunkPlan, original_len: int,
                sample_rate: int = 22050) -> AudioBuffer:
    """Rebuild a waveform from chunks.

    hop == chunk_len concatenates; hop < chunk_len cross-fades with a
    triangular window, normalizing by the accumulated window so overlaps
    sum to one everywhere they are covered.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != plan.chunk_len:
        raise ValueError(f"frames must be (n, {plan.chunk_len}), got {frames.shape}")
    n = frames.shape[0]
    total = (n - 1) * plan.hop + plan.chunk_len
    if plan.hop == plan.chunk_len:
        out = frames.reshape(-1)
    else:
        window = np.minimum(np.arange(1, plan.chunk_len + 1),
                            np.arange(plan.chunk_len, 0, -1)).astype(np.float64)
        acc = np.zeros(total)
        wsum = np.zeros(total)
        for i in range(n):
            start = i * plan.hop
            acc[start:start + plan.chunk_len] += frames[i] * window
            wsum[start:start + plan.chunk_len] += window
        out = acc / np.maximum(wsum, 1e-12)
    if original_len > total:
        raise ValueError(f"original_len {original_len} exceeds covered span {total}")
    return AudioBuffer(samples=out[:original_len].astype(np.float32),
                       sample_rate=sample_rate, channels=1)
