"""Synthetic spoken-command corpus.

Commands follow a small grammar over (action, object, location) intents.
Each transcript is rendered into feature frames by concatenating
per-character prototypes, each held for a speaker-specific number of
frames, with a per-speaker offset and additive noise. In waveform mode
each character becomes a pair of tones and the waveform is framed with
the same front end used for real audio.
"""

import difflib
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kdslu.config import SynthConfig
from kdslu.data.labels import IntentTriple, LabelSpace, label_decode
from kdslu.exceptions import ConfigError, ConfigValidationError
from kdslu.text_pipeline import CHARSET
from kdslu.tokenizer_vq import frame

ACTION_WORDS = ("increase", "decrease", "activate", "bring", "deactivate", "change language")
OBJECT_WORDS = (
    "heat", "lamp", "lights", "music", "volume", "shoes", "socks",
    "juice", "newspaper", "german", "korean", "english", "chinese", "tea",
)
LOCATION_WORDS = ("none", "kitchen", "bedroom", "washroom")

# (command pattern, location phrase); location index 0 adds no phrase.
TEMPLATES = (
    ("{action} the {object}", " in the {location}"),
    ("{action} {object}", " {location}"),
    ("{object} {action}", " in {location}"),
    ("please {action} the {object}", " in the {location}"),
)

SPLITS = ("train", "valid", "test")

# Reverb taps after the direct path.
_REVERB_TAPS = 3


@dataclass
class Utterance:
    """One synthetic or manifest-loaded recording."""

    utterance_id: str
    transcript: Optional[str]
    intent: IntentTriple
    speaker_id: str
    split: str
    frames: Optional[np.ndarray] = None  # (T, F)
    signal: Optional[np.ndarray] = None  # waveform samples
    signal_path: str = ""


@dataclass
class Corpus:
    """Utterances with the settings needed to read their signals."""

    utterances: list[Utterance]
    label_space: LabelSpace
    feature_dim: int
    signal_format: str = "frames"
    sample_rate: int = 16000
    frame_ms: float = 10.0
    metadata: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def speakers(self, name: str) -> set[str]:
        return {u.speaker_id for u in self.utterances if u.split == name}

    def fingerprint(self) -> str:
        """SHA-256 over ids, transcripts, labels, speakers, splits and frames."""
        digest = hashlib.sha256()
        for u in self.utterances:
            digest.update(
                f"{u.utterance_id}|{u.transcript}|{u.intent.action},{u.intent.object},"
                f"{u.intent.location}|{u.speaker_id}|{u.split}".encode("utf-8")
            )
            if u.frames is not None:
                digest.update(np.ascontiguousarray(u.frames, dtype=np.float64).tobytes())
        return digest.hexdigest()


class Grammar:
    """Renders intents into transcripts and parses transcripts back."""

    def __init__(self, label_space: LabelSpace, num_templates: int = 3):
        if label_space.num_actions > len(ACTION_WORDS):
            raise ConfigValidationError("data.num_actions", f"At most {len(ACTION_WORDS)} actions")
        if label_space.num_objects > len(OBJECT_WORDS):
            raise ConfigValidationError("data.num_objects", f"At most {len(OBJECT_WORDS)} objects")
        if label_space.num_locations > len(LOCATION_WORDS):
            raise ConfigValidationError(
                "data.num_locations", f"At most {len(LOCATION_WORDS)} locations"
            )
        if not 1 <= num_templates <= len(TEMPLATES):
            raise ConfigValidationError("data.num_templates", f"Must be in [1, {len(TEMPLATES)}]")
        self.label_space = label_space
        self.num_templates = num_templates
        self._table: dict[str, IntentTriple] = {}
        for triple in label_space.triples():
            for template in range(num_templates):
                text = self.render(triple, template)
                if text in self._table and self._table[text] != triple:
                    raise ConfigError(f"Transcript {text!r} is ambiguous")
                self._table[text] = triple

    def render(self, triple: IntentTriple, template: int) -> str:
        pattern, location_phrase = TEMPLATES[template]
        text = pattern.format(action=ACTION_WORDS[triple.action], object=OBJECT_WORDS[triple.object])
        if triple.location > 0:
            text += location_phrase.format(location=LOCATION_WORDS[triple.location])
        return text

    @property
    def transcripts(self) -> dict[str, IntentTriple]:
        return dict(self._table)

    def parse(self, transcript: str) -> Optional[IntentTriple]:
        """Exact template match, else the closest rendered transcript."""
        text = " ".join(transcript.lower().split())
        if text in self._table:
            return self._table[text]
        closest = difflib.get_close_matches(text, list(self._table), n=1, cutoff=0.0)
        return self._table[closest[0]] if closest else None


def oracle_parse(transcript: str, grammar: Grammar) -> Optional[IntentTriple]:
    """Intent of a transcript under the generating grammar."""
    return grammar.parse(transcript)


class UtteranceRenderer:
    """Turns transcripts into frames for a fixed set of speakers."""

    def __init__(self, config: SynthConfig, num_speakers: int):
        self.config = config
        dim = config.feature_dim
        self.prototypes = np.random.default_rng((config.seed, 0)).normal(size=(len(CHARSET), dim))
        self.speaker_offsets = np.random.default_rng((config.seed, 1)).normal(
            scale=config.speaker_scale, size=(num_speakers, dim)
        )
        jitter = config.duration_jitter
        self.durations = config.frames_per_char + np.random.default_rng((config.seed, 2)).integers(
            -jitter, jitter + 1, size=(num_speakers, len(CHARSET))
        )
        self._char_index = {ch: i for i, ch in enumerate(CHARSET)}

    def char_durations(self, transcript: str, speaker: int) -> list[int]:
        return [int(self.durations[speaker, self._char_index[ch]]) for ch in transcript]

    def render_frames(self, transcript: str, speaker: int, rng: np.random.Generator) -> np.ndarray:
        """(T, F) frames: silence, held character prototypes, silence."""
        config = self.config
        silence = np.zeros((config.silence_frames, config.feature_dim))
        pieces = [silence]
        for ch, duration in zip(transcript, self.char_durations(transcript, speaker)):
            pieces.append(np.repeat(self.prototypes[self._char_index[ch]][None, :], duration, axis=0))
        pieces.append(silence)
        frames = np.concatenate(pieces, axis=0) + self.speaker_offsets[speaker]
        if config.noise_sigma > 0:
            frames = frames + rng.normal(scale=config.noise_sigma, size=frames.shape)
        return apply_reverb(frames, config.reverb_decay)

    def render_waveform(self, transcript: str, speaker: int, rng: np.random.Generator) -> np.ndarray:
        """Samples where each character is two tones held for its duration."""
        config = self.config
        samples_per_frame = int(config.sample_rate * config.frame_ms / 1000.0)
        nyquist = config.sample_rate / 2.0
        pitch = 1.0 + 0.05 * float(self.speaker_offsets[speaker, 0])
        pieces = [np.zeros(config.silence_frames * samples_per_frame)]
        for ch, duration in zip(transcript, self.char_durations(transcript, speaker)):
            index = self._char_index[ch]
            t = np.arange(duration * samples_per_frame) / config.sample_rate
            low = min((200.0 + 60.0 * index) * pitch, 0.45 * nyquist)
            high = min((1200.0 + 110.0 * index) * pitch, 0.9 * nyquist)
            pieces.append(np.sin(2 * np.pi * low * t) + 0.5 * np.sin(2 * np.pi * high * t))
        pieces.append(np.zeros(config.silence_frames * samples_per_frame))
        signal = np.concatenate(pieces)
        if config.noise_sigma > 0:
            signal = signal + rng.normal(scale=0.1 * config.noise_sigma, size=signal.shape)
        return apply_reverb(signal[:, None], config.reverb_decay)[:, 0]


def apply_reverb(x: np.ndarray, decay: float) -> np.ndarray:
    """Smear along axis 0 with geometrically decaying echoes; decay 0 is identity."""
    if decay <= 0:
        return x
    out = x.copy()
    for tap in range(1, _REVERB_TAPS + 1):
        out[tap:] += (decay**tap) * x[:-tap]
    return out / sum(decay**tap for tap in range(_REVERB_TAPS + 1))


def _speaker_split(num_speakers: int, config: SynthConfig) -> dict[str, list[int]]:
    total = config.train_utterances + config.valid_utterances + config.test_utterances
    n_valid = max(1, round(num_speakers * config.valid_utterances / total))
    n_test = max(1, round(num_speakers * config.test_utterances / total))
    n_train = num_speakers - n_valid - n_test
    if n_train < 1:
        raise ConfigValidationError("data.num_speakers", "Too few speakers for disjoint splits")
    order = np.random.default_rng((config.seed, 3)).permutation(num_speakers)
    return {
        "train": sorted(int(s) for s in order[:n_train]),
        "valid": sorted(int(s) for s in order[n_train : n_train + n_valid]),
        "test": sorted(int(s) for s in order[n_train + n_valid :]),
    }


def synth_generate(config: SynthConfig) -> Corpus:
    """
    Generate a labelled corpus with speaker-disjoint train/valid/test splits.

    The training split is class-balanced: every intent occurs
    floor(train_utterances / C) or one more times. Identical configs
    produce identical corpora.

    Raises:
        ConfigError: If the grammar is ambiguous or the training split
            cannot cover every intent.
    """
    label_space = LabelSpace(config.num_actions, config.num_objects, config.num_locations)
    grammar = Grammar(label_space, config.num_templates)
    if config.train_utterances < label_space.size:
        raise ConfigValidationError(
            "data.train_utterances", f"Need at least one utterance per intent ({label_space.size})"
        )

    renderer = UtteranceRenderer(config, config.num_speakers)
    speakers = _speaker_split(config.num_speakers, config)
    counts = {
        "train": config.train_utterances,
        "valid": config.valid_utterances,
        "test": config.test_utterances,
    }

    utterances = []
    for split_index, split in enumerate(SPLITS):
        labels = np.arange(counts[split]) % label_space.size
        labels = np.random.default_rng((config.seed, 4, split_index)).permutation(labels)
        for i, label in enumerate(labels):
            rng = np.random.default_rng((config.seed, 5, split_index, i))
            triple = label_decode(int(label), label_space)
            template = int(rng.integers(grammar.num_templates))
            speaker = speakers[split][int(rng.integers(len(speakers[split])))]
            transcript = grammar.render(triple, template)
            utterance = Utterance(
                utterance_id=f"{split}-{i:05d}",
                transcript=transcript,
                intent=triple,
                speaker_id=f"spk{speaker:03d}",
                split=split,
            )
            if config.signal_format == "waveform":
                utterance.signal = renderer.render_waveform(transcript, speaker, rng)
                utterance.frames = frame(
                    utterance.signal, config.sample_rate, config.frame_ms, config.feature_dim
                ).frames
            else:
                utterance.frames = renderer.render_frames(transcript, speaker, rng)
            utterances.append(utterance)

    corpus = Corpus(
        utterances=utterances,
        label_space=label_space,
        feature_dim=config.feature_dim,
        signal_format=config.signal_format,
        sample_rate=config.sample_rate,
        frame_ms=config.frame_ms,
    )
    corpus.metadata["fingerprint"] = corpus.fingerprint()
    return corpus
