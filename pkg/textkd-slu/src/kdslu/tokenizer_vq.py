"""Framing and k-means quantization of audio into discrete tokens.

Signals are cut into fixed-rate frames, reduced to log band-energy
features and mapped to the index of the nearest codebook centroid. The
codebook is fitted once with Lloyd's algorithm and never updated by the
later training stages.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Union

import numpy as np

from kdslu.config import NUM_SPEECH_SPECIALS
from kdslu.exceptions import (
    ConfigValidationError,
    DegenerateCorpusError,
    EmptyInputError,
    ParseError,
    ShapeError,
    VocabError,
)


CODEBOOK_FORMAT = "kdslu-codebook v1"

# Rows per block when computing point-to-centroid distances.
_CHUNK_ROWS = 4096


class SpecialIds(NamedTuple):
    """Reserved token ids placed after the K code ids."""

    pad: int
    cls: int
    mask: int


def special_ids(num_codes: int) -> SpecialIds:
    """Return the PAD, CLS and MASK ids for a codebook of size num_codes."""
    return SpecialIds(pad=num_codes, cls=num_codes + 1, mask=num_codes + 2)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Fixed-rate feature frames of one utterance."""

    frames: np.ndarray  # (T, F)
    frame_duration: float = 10.0  # milliseconds

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ShapeError(f"Frames must be a 2D (T, F) array, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise EmptyInputError("Frame sequence is empty")
        if self.frames.shape[1] < 1:
            raise ShapeError("Frame feature dimension must be at least 1")
        if self.frame_duration <= 0:
            raise ConfigValidationError("frame_duration", "Must be positive")

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    def __len__(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Discrete audio codes, one per frame, plus reserved specials."""

    tokens: np.ndarray  # (T,) int64
    num_codes: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        if tokens.ndim != 1 or tokens.shape[0] < 1:
            raise EmptyInputError("Token sequence must be a non-empty 1D array")
        if tokens.min() < 0 or tokens.max() >= self.num_codes + NUM_SPEECH_SPECIALS:
            raise VocabError(
                f"Token ids must lie in [0, {self.num_codes + NUM_SPEECH_SPECIALS})"
            )
        cls_positions = np.flatnonzero(tokens == self.specials.cls)
        if cls_positions.size and (cls_positions.size > 1 or cls_positions[0] != 0):
            raise VocabError("CLS may only appear at position 0")

    @property
    def specials(self) -> SpecialIds:
        return special_ids(self.num_codes)

    @property
    def has_cls(self) -> bool:
        return bool(self.tokens[0] == self.specials.cls)

    def without_cls(self) -> "TokenSequence":
        """Return the sequence with a leading CLS removed."""
        if not self.has_cls:
            return self
        return TokenSequence(self.tokens[1:], self.num_codes)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


@dataclass(frozen=True, eq=False)
class Codebook:
    """Fitted k-means centroids."""

    centroids: np.ndarray  # (K, F)
    seed: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=np.float64)
        object.__setattr__(self, "centroids", centroids)
        centroids.setflags(write=False)
        if centroids.ndim != 2:
            raise ShapeError(f"Centroids must be (K, F), got shape {centroids.shape}")
        if centroids.shape[0] < 2:
            raise ConfigValidationError("codebook.k", "Must be at least 2")
        if not np.all(np.isfinite(centroids)):
            raise DegenerateCorpusError("Codebook contains non-finite centroids")
        if np.unique(centroids, axis=0).shape[0] != centroids.shape[0]:
            raise DegenerateCorpusError("Codebook contains duplicate centroids")

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def checksum(self) -> str:
        """SHA-256 over the centroid bytes."""
        return hashlib.sha256(np.ascontiguousarray(self.centroids).tobytes()).hexdigest()


# --- Framing ---


def frame(
    signal: np.ndarray,
    sample_rate: int,
    frame_ms: float = 10.0,
    feature_dim: int = 16,
) -> FrameSequence:
    """
    Cut a waveform into non-overlapping frames of log band energies.

    Each frame holds floor(sample_rate * frame_ms / 1000) samples; the
    trailing remainder is dropped. Samples are mean-removed per frame and
    the power spectrum is summed over feature_dim equal-width bands.

    Raises:
        EmptyInputError: If the signal is shorter than one frame.
    """
    if frame_ms <= 0:
        raise ConfigValidationError("frame_ms", "Must be positive")
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    samples_per_frame = int(np.floor(sample_rate * frame_ms / 1000.0))
    if samples_per_frame < 1:
        raise EmptyInputError("Frame length rounds to zero samples")
    num_frames = signal.shape[0] // samples_per_frame
    if num_frames < 1:
        raise EmptyInputError(
            f"Signal of {signal.shape[0]} samples is shorter than one frame "
            f"({samples_per_frame} samples)"
        )

    windows = signal[: num_frames * samples_per_frame].reshape(num_frames, samples_per_frame)
    windows = windows - windows.mean(axis=1, keepdims=True)
    power = np.abs(np.fft.rfft(windows, axis=1)) ** 2
    if power.shape[1] < feature_dim:
        raise ShapeError(
            f"{power.shape[1]} spectral bins cannot fill {feature_dim} bands"
        )
    bands = np.array_split(np.arange(power.shape[1]), feature_dim)
    energies = np.stack([power[:, band].sum(axis=1) for band in bands], axis=1)
    return FrameSequence(np.log(energies + 1e-10), frame_duration=float(frame_ms))


# --- k-means ---


def _stack_frames(corpus: Iterable[Union[FrameSequence, np.ndarray]]) -> np.ndarray:
    arrays = [item.frames if isinstance(item, FrameSequence) else np.asarray(item) for item in corpus]
    if not arrays:
        raise EmptyInputError("Corpus contains no frames")
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise ShapeError(f"Frames have mixed dimensions: {sorted(dims)}")
    return np.concatenate(arrays, axis=0).astype(np.float64)


def _distance_blocks(points: np.ndarray, centroids: np.ndarray) -> Iterator[np.ndarray]:
    """Yield squared Euclidean distances block by block."""
    for start in range(0, points.shape[0], _CHUNK_ROWS):
        block = points[start : start + _CHUNK_ROWS]
        diff = block[:, None, :] - centroids[None, :, :]
        yield np.einsum("nkf,nkf->nk", diff, diff)


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest-centroid assignment (lowest index on ties) and total inertia."""
    labels = []
    inertia = 0.0
    for dist in _distance_blocks(points, centroids):
        nearest = np.argmin(dist, axis=1)
        labels.append(nearest)
        inertia += float(dist[np.arange(dist.shape[0]), nearest].sum())
    return np.concatenate(labels), inertia


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding."""
    centroids = [points[rng.integers(points.shape[0])]]
    closest = np.full(points.shape[0], np.inf)
    for _ in range(1, k):
        latest = centroids[-1][None, :]
        for start in range(0, points.shape[0], _CHUNK_ROWS):
            block = points[start : start + _CHUNK_ROWS]
            d = ((block - latest) ** 2).sum(axis=1)
            closest[start : start + _CHUNK_ROWS] = np.minimum(closest[start : start + _CHUNK_ROWS], d)
        total = closest.sum()
        probs = closest / total
        centroids.append(points[rng.choice(points.shape[0], p=probs)])
    return np.stack(centroids)


def corpus_fingerprint(points: np.ndarray) -> str:
    """Short content hash of a frame matrix."""
    return hashlib.sha256(np.ascontiguousarray(points).tobytes()).hexdigest()[:16]


def lloyd_iterations(
    points: np.ndarray, centroids: np.ndarray, max_iters: int
) -> Iterator[tuple[np.ndarray, np.ndarray, float]]:
    """
    Lloyd refinement from initial centroids.

    Yields (centroids, labels, inertia) for the initial assignment and after
    each update, stopping once the assignment no longer changes or after
    max_iters updates. Inertia never increases between yields.
    """
    labels, inertia = _assign(points, centroids)
    yield centroids, labels, inertia
    k = centroids.shape[0]
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k)
        updated = centroids.copy()
        filled = counts > 0
        # Empty clusters keep their previous centroid.
        updated[filled] = sums[filled] / counts[filled, None]

        new_labels, inertia = _assign(points, updated)
        converged = np.array_equal(new_labels, labels)
        centroids, labels = updated, new_labels
        yield centroids, labels, inertia
        if converged:
            return


def fit_codebook(
    corpus: Iterable[Union[FrameSequence, np.ndarray]],
    k: int,
    max_iters: int = 100,
    seed: int = 0,
) -> Codebook:
    """
    Fit a k-means codebook with k-means++ seeding and Lloyd iterations.

    Iterates until the assignment no longer changes or max_iters is
    reached. Within-cluster squared distance never increases between
    iterations. Deterministic given seed.

    Raises:
        ConfigValidationError: If k < 2.
        DegenerateCorpusError: If the corpus has fewer than k distinct frames.
    """
    if k < 2:
        raise ConfigValidationError("codebook.k", "Must be at least 2")
    points = _stack_frames(corpus)
    if points.shape[0] < k or np.unique(points, axis=0).shape[0] < k:
        raise DegenerateCorpusError(
            f"Corpus has fewer than {k} distinct frames"
        )

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, k, rng)
    for centroids, _, _ in lloyd_iterations(points, centroids, max_iters):
        continue
    return Codebook(centroids, seed=seed, fingerprint=corpus_fingerprint(points))


def encode(frames: FrameSequence, codebook: Codebook) -> TokenSequence:
    """
    Map each frame to its nearest centroid index.

    Raises:
        ShapeError: If the frame dimension does not match the codebook.
    """
    if frames.dim != codebook.dim:
        raise ShapeError(f"Frame dimension {frames.dim} does not match codebook {codebook.dim}")
    labels, _ = _assign(frames.frames.astype(np.float64), codebook.centroids)
    return TokenSequence(labels.astype(np.int64), codebook.k)


# --- Persistence ---


def save_codebook(codebook: Codebook, path: Path) -> None:
    """
    Write a codebook as a versioned text file.

    Line 1 is the format tag, line 2 the header (dim, k, seed,
    fingerprint), then one row-major centroid per line.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(CODEBOOK_FORMAT + "\n")
        f.write(
            f"dim={codebook.dim} k={codebook.k} seed={codebook.seed} "
            f"fingerprint={codebook.fingerprint}\n"
        )
        for row in codebook.centroids:
            f.write(" ".join(f"{value:.17g}" for value in row) + "\n")


def load_codebook(path: Path) -> Codebook:
    """
    Read a codebook written by save_codebook.

    Raises:
        ParseError: If the file is malformed.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CODEBOOK_FORMAT:
        raise ParseError(str(path), 1, f"Expected format tag '{CODEBOOK_FORMAT}'")
    if len(lines) < 2:
        raise ParseError(str(path), 2, "Missing header line")

    try:
        header = dict(item.split("=", 1) for item in lines[1].split())
        dim, k, seed = int(header["dim"]), int(header["k"]), int(header["seed"])
        fingerprint = header.get("fingerprint", "")
    except (KeyError, ValueError) as e:
        raise ParseError(str(path), 2, f"Invalid header: {e}")

    rows = []
    for number, line in enumerate(lines[2:], start=3):
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise ParseError(str(path), number, "Non-numeric centroid value")
        if len(values) != dim:
            raise ParseError(str(path), number, f"Expected {dim} values, got {len(values)}")
        rows.append(values)
    if len(rows) != k:
        raise ParseError(str(path), len(lines), f"Expected {k} centroids, got {len(rows)}")

    return Codebook(np.array(rows, dtype=np.float64), seed=seed, fingerprint=fingerprint)
