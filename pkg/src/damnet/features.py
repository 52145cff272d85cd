"""Waveform to network-input feature pipeline.

Log-Mel filterbank extraction, time derivatives, corpus mean/variance
normalization, context splicing, and the binary feature archive. Frames
flow as (T, channels, bins) float32 arrays where the channels are
static, delta and delta-delta.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError, FormatError, ShapeError

ARCHIVE_MAGIC = b"FBK1"
LABEL_MAGIC = b"LBL1"
ARCHIVE_VERSION = 1

VARIANCE_FLOOR = 1e-8
DELTA_WINDOW = 2
# Regression denominator 2 * sum(n^2) for n in 1..DELTA_WINDOW.
DELTA_DENOM = 2 * sum(n * n for n in range(1, DELTA_WINDOW + 1))


@dataclass(frozen=True)
class FilterbankConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    num_filters: int = 40
    low_freq: float = 20.0
    high_freq: float | None = None  # None means Nyquist
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def resolved_high_freq(self) -> float:
        return self.sample_rate / 2.0 if self.high_freq is None else self.high_freq

    def validate(self) -> None:
        if self.sample_rate < 1:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.frame_samples < 1 or self.shift_samples < 1:
            raise ConfigError("frame length and shift must cover at least one sample")
        if self.fft_size < self.frame_samples:
            raise ConfigError(
                f"fft_size {self.fft_size} smaller than frame of {self.frame_samples} samples"
            )
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.num_filters < 1:
            raise ConfigError(f"num_filters must be >= 1, got {self.num_filters}")
        high = self.resolved_high_freq
        if not 0.0 <= self.low_freq < high <= self.sample_rate / 2.0:
            raise ConfigError(
                f"need 0 <= low_freq < high_freq <= Nyquist, got {self.low_freq}..{high}"
            )
        if self.log_floor <= 0.0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")


@dataclass
class UtteranceFeatures:
    """Per-utterance feature matrix (frames x channels x bins) plus
    optional frame labels."""

    utt_id: str
    frames: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ShapeError(
                f"utterance '{self.utt_id}': frames must be (T, channels, bins), "
                f"got {self.frames.shape}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"utterance '{self.utt_id}': non-finite feature values")
        if self.labels is not None and len(self.labels) != len(self.frames):
            raise DataError(
                f"utterance '{self.utt_id}': {len(self.labels)} labels for "
                f"{len(self.frames)} frames"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def mel_scale(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_edges(cfg: FilterbankConfig) -> np.ndarray:
    """num_filters + 2 edge frequencies, uniform on the mel scale."""
    mels = np.linspace(mel_scale(cfg.low_freq), mel_scale(cfg.resolved_high_freq),
                       cfg.num_filters + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: FilterbankConfig) -> np.ndarray:
    """Triangular filter weights, shape (num_filters, fft_size // 2 + 1)."""
    edges = mel_filter_edges(cfg)
    bin_freqs = np.arange(cfg.fft_size // 2 + 1) * (cfg.sample_rate / cfg.fft_size)
    weights = np.zeros((cfg.num_filters, bin_freqs.size))
    for i in range(cfg.num_filters):
        lower, center, upper = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lower) / (center - lower)
        falling = (upper - bin_freqs) / (upper - center)
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
    return weights


def frame_count(num_samples: int, cfg: FilterbankConfig) -> int:
    return 1 + (num_samples - cfg.frame_samples) // cfg.shift_samples


def compute_logmel(samples: np.ndarray, cfg: FilterbankConfig) -> np.ndarray:
    """Pre-emphasized, Hamming-windowed log-Mel filterbank features,
    shape (T, num_filters) float32."""
    cfg.validate()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ShapeError(f"waveform must be one-dimensional, got {samples.shape}")
    if len(samples) < cfg.frame_samples:
        raise DataError(
            f"waveform of {len(samples)} samples is shorter than one "
            f"{cfg.frame_samples}-sample frame"
        )
    emphasized = np.concatenate([samples[:1], samples[1:] - cfg.pre_emphasis * samples[:-1]])
    num_frames = frame_count(len(samples), cfg)
    idx = cfg.shift_samples * np.arange(num_frames)[:, None] + np.arange(cfg.frame_samples)[None, :]
    windowed = emphasized[idx] * np.hamming(cfg.frame_samples)
    spectrum = np.abs(np.fft.rfft(windowed, n=cfg.fft_size, axis=1))
    energies = spectrum @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor)).astype(np.float32)


def _delta(sequence: np.ndarray) -> np.ndarray:
    padded = np.pad(sequence, ((DELTA_WINDOW, DELTA_WINDOW), (0, 0)), mode="edge")
    t = len(sequence)
    acc = np.zeros_like(sequence)
    for n in range(1, DELTA_WINDOW + 1):
        acc += n * (padded[DELTA_WINDOW + n : DELTA_WINDOW + n + t]
                    - padded[DELTA_WINDOW - n : DELTA_WINDOW - n + t])
    return acc / DELTA_DENOM


def append_deltas(static: np.ndarray) -> np.ndarray:
    """Stack static features with their first and second regression
    derivatives (window +/-2, edge replication): (T, F) -> (T, 3, F)."""
    if static.ndim != 2 or len(static) < 1:
        raise ShapeError(f"expected a (T, bins) matrix with T >= 1, got {static.shape}")
    first = _delta(static)
    second = _delta(first)
    return np.stack([static, first, second], axis=1)


@dataclass
class CmvnStats:
    """Per-(channel, bin) mean and variance over a training corpus."""

    mean: np.ndarray
    var: np.ndarray
    frame_count: int


def compute_cmvn_stats(utterances: list[UtteranceFeatures]) -> CmvnStats:
    if not utterances:
        raise DataError("cannot compute normalization stats over an empty corpus")
    shape = utterances[0].frames.shape[1:]
    total = 0
    acc = np.zeros(shape, dtype=np.float64)
    acc_sq = np.zeros(shape, dtype=np.float64)
    for utt in utterances:
        if utt.frames.shape[1:] != shape:
            raise ShapeError(
                f"utterance '{utt.utt_id}' has geometry {utt.frames.shape[1:]}, "
                f"corpus uses {shape}"
            )
        frames = utt.frames.astype(np.float64)
        acc += frames.sum(axis=0)
        acc_sq += (frames * frames).sum(axis=0)
        total += utt.num_frames
    if total < 2:
        raise DataError(f"need at least 2 frames for statistics, got {total}")
    mean = acc / total
    var = np.maximum(acc_sq / total - mean * mean, VARIANCE_FLOOR)
    return CmvnStats(mean=mean, var=var, frame_count=total)


def apply_cmvn(frames: np.ndarray, stats: CmvnStats) -> np.ndarray:
    if frames.shape[1:] != stats.mean.shape:
        raise ShapeError(
            f"frames have geometry {frames.shape[1:]}, stats cover {stats.mean.shape}"
        )
    return ((frames - stats.mean) / np.sqrt(stats.var)).astype(frames.dtype)


def save_cmvn_stats(stats: CmvnStats, path, filterbank: FilterbankConfig | None = None) -> None:
    payload = {
        "frame_count": stats.frame_count,
        "mean": stats.mean.tolist(),
        "var": stats.var.tolist(),
    }
    if filterbank is not None:
        payload["filterbank"] = {
            "sample_rate": filterbank.sample_rate,
            "frame_length_ms": filterbank.frame_length_ms,
            "frame_shift_ms": filterbank.frame_shift_ms,
            "fft_size": filterbank.fft_size,
            "num_filters": filterbank.num_filters,
            "low_freq": filterbank.low_freq,
            "high_freq": filterbank.resolved_high_freq,
            "pre_emphasis": filterbank.pre_emphasis,
            "log_floor": filterbank.log_floor,
        }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_cmvn_stats(path) -> CmvnStats:
    try:
        payload = json.loads(Path(path).read_text())
        return CmvnStats(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            var=np.asarray(payload["var"], dtype=np.float64),
            frame_count=int(payload["frame_count"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad statistics file {path}: {exc}") from exc


def splice_context(frames: np.ndarray, left: int = 5, right: int = 5) -> np.ndarray:
    """Stack each frame with its context window along a new height axis,
    edge-replicated at utterance boundaries: (T, C, F) -> (T, C, left+1+right, F)."""
    if frames.ndim != 3 or len(frames) < 1:
        raise ShapeError(f"expected (T, channels, bins) with T >= 1, got {frames.shape}")
    if left < 0 or right < 0:
        raise ConfigError(f"context extents must be >= 0, got {left}, {right}")
    t = frames.shape[0]
    offsets = np.arange(-left, right + 1)
    idx = np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)
    return np.ascontiguousarray(frames[idx].transpose(0, 2, 1, 3))


def write_archive(utterances: list[UtteranceFeatures], path) -> None:
    with open(path, "wb") as handle:
        handle.write(ARCHIVE_MAGIC)
        handle.write(struct.pack("<I", ARCHIVE_VERSION))
        handle.write(struct.pack("<I", len(utterances)))
        for utt in utterances:
            encoded = utt.utt_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            t, channels, bins = utt.frames.shape
            handle.write(struct.pack("<III", t, channels, bins))
            handle.write(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())
            if utt.labels is not None:
                handle.write(LABEL_MAGIC)
                handle.write(np.ascontiguousarray(utt.labels, dtype="<u4").tobytes())


class _ArchiveReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0
        self.context = "header"

    def take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(
                f"archive truncated reading {field} in {self.context}", offset=self.offset
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def peek(self, count: int) -> bytes:
        return self.data[self.offset : self.offset + count]


def read_archive(path) -> list[UtteranceFeatures]:
    reader = _ArchiveReader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive magic {magic!r}", offset=0)
    version = reader.u32("version")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}", offset=4)
    count = reader.u32("utterance count")
    utterances = []
    for index in range(count):
        reader.context = f"record {index}"
        id_len = reader.u32("id length")
        if id_len > 65535:
            raise FormatError(
                f"implausible id length {id_len} in record {index}", offset=reader.offset - 4
            )
        try:
            utt_id = reader.take(id_len, "id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(
                f"undecodable id in record {index}: {exc}", offset=reader.offset - id_len
            ) from exc
        t = reader.u32("frame count")
        channels = reader.u32("channel count")
        bins = reader.u32("bin count")
        size = t * channels * bins
        raw = reader.take(4 * size, "feature values")
        frames = np.frombuffer(raw, dtype="<f4").reshape(t, channels, bins).copy()
        labels = None
        if reader.peek(4) == LABEL_MAGIC:
            reader.take(4, "label magic")
            labels = np.frombuffer(reader.take(4 * t, "labels"), dtype="<u4").astype(np.int64)
        utterances.append(UtteranceFeatures(utt_id, frames, labels))
    if reader.offset != len(reader.data):
        raise FormatError(
            f"{len(reader.data) - reader.offset} trailing bytes after record {count - 1}",
            offset=reader.offset,
        )
    return utterances


def read_wav(path) -> tuple[np.ndarray, int]:
    """Single-channel 16-bit PCM WAV as float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as handle:
            channels = handle.getnchannels()
            width = handle.getsampwidth()
            rate = handle.getframerate()
            raw = handle.readframes(handle.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"bad WAV file {path}: {exc}") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    audio_path: Path
    label_path: Path | None = None


def parse_manifest(path) -> list[ManifestEntry]:
    """Line-oriented manifest: id, audio path, optional label path."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) not in (2, 3):
            raise DataError(
                f"{path}:{lineno}: expected 'id audio-path [label-path]', "
                f"got {len(parts)} fields"
            )
        label = Path(parts[2]) if len(parts) == 3 else None
        entries.append(ManifestEntry(parts[0], Path(parts[1]), label))
    return entries


def read_label_file(path) -> np.ndarray:
    """Whitespace-separated integer class ids, one per frame."""
    try:
        labels = np.array([int(token) for token in Path(path).read_text().split()],
                          dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"bad label file {path}: {exc}") from exc
    if labels.size and labels.min() < 0:
        raise DataError(f"bad label file {path}: negative class id")
    return labels


def featurize_utterance(entry: ManifestEntry, cfg: FilterbankConfig,
                        add_deltas: bool = True) -> UtteranceFeatures:
    samples, rate = read_wav(entry.audio_path)
    if rate != cfg.sample_rate:
        raise DataError(
            f"{entry.audio_path} is sampled at {rate} Hz, configuration says "
            f"{cfg.sample_rate} Hz"
        )
    static = compute_logmel(samples, cfg)
    frames = append_deltas(static) if add_deltas else static[:, None, :]
    labels = None
    if entry.label_path is not None:
        labels = read_label_file(entry.label_path)
        if len(labels) != len(frames):
            raise DataError(
                f"{entry.label_path}: {len(labels)} labels for {len(frames)} frames"
            )
    return UtteranceFeatures(entry.utt_id, frames.astype(np.float32), labels)


def featurize_manifest(entries: list[ManifestEntry], cfg: FilterbankConfig,
                       add_deltas: bool = True) -> list[UtteranceFeatures]:
    utterances = []
    for position, entry in enumerate(entries, 1):
        try:
            utterances.append(featurize_utterance(entry, cfg, add_deltas))
        except (DataError, FormatError, OSError) as exc:
            raise DataError(
                f"utterance '{entry.utt_id}' (manifest line entry {position}): {exc}"
            ) from exc
    return utterances
