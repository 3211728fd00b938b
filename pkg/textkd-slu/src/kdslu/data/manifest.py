"""Tab-separated corpus manifest.

The first line is a header of the form

    # kdslu-manifest v1<TAB>signal_format=frames<TAB>dim=16<TAB>...

followed by one row per utterance:

    signal_path  transcript  action  object  location  speaker_id  split

Signal paths are relative to the manifest's directory and point to raw
little-endian float32 files: flattened (T, dim) frames, or waveform
samples when signal_format is "waveform". Transcripts may be empty.
"""

from pathlib import Path

import numpy as np

from kdslu.data.labels import IntentTriple, LabelSpace
from kdslu.data.synth import SPLITS, Corpus, Utterance
from kdslu.exceptions import ParseError
from kdslu.tokenizer_vq import frame

MANIFEST_FORMAT = "# kdslu-manifest v1"

MANIFEST_COLUMNS = ("signal_path", "transcript", "action", "object", "location", "speaker_id", "split")

SIGNAL_DIR = "signals"


def _header(corpus: Corpus) -> str:
    fields = {
        "signal_format": corpus.signal_format,
        "dim": corpus.feature_dim,
        "sample_rate": corpus.sample_rate,
        "frame_ms": corpus.frame_ms,
        "actions": corpus.label_space.num_actions,
        "objects": corpus.label_space.num_objects,
        "locations": corpus.label_space.num_locations,
    }
    return "\t".join([MANIFEST_FORMAT] + [f"{k}={v}" for k, v in fields.items()])


def write_manifest(corpus: Corpus, path: Path) -> Path:
    """
    Write the manifest and one signal file per utterance beside it.

    Returns:
        Path of the manifest file.
    """
    path = Path(path)
    signal_dir = path.parent / SIGNAL_DIR
    signal_dir.mkdir(parents=True, exist_ok=True)

    lines = [_header(corpus)]
    for u in corpus.utterances:
        relative = f"{SIGNAL_DIR}/{u.utterance_id}.f32"
        data = u.signal if corpus.signal_format == "waveform" else u.frames
        if data is not None:
            np.asarray(data, dtype="<f4").tofile(path.parent / relative)
        u.signal_path = relative
        transcript = (u.transcript or "").replace("\t", " ")
        lines.append(
            "\t".join(
                [
                    relative,
                    transcript,
                    str(u.intent.action),
                    str(u.intent.object),
                    str(u.intent.location),
                    u.speaker_id,
                    u.split,
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_header(line: str, path: Path) -> dict[str, str]:
    parts = line.rstrip("\n").split("\t")
    if parts[0].strip() != MANIFEST_FORMAT:
        raise ParseError(str(path), 1, f"Expected header starting with '{MANIFEST_FORMAT}'")
    header = {}
    for item in parts[1:]:
        if "=" not in item:
            raise ParseError(str(path), 1, f"Malformed header field {item!r}")
        key, value = item.split("=", 1)
        header[key] = value
    missing = {"signal_format", "dim", "actions", "objects", "locations"} - set(header)
    if missing:
        raise ParseError(str(path), 1, f"Header lacks {', '.join(sorted(missing))}")
    return header


def read_manifest(path: Path, load_signals: bool = True) -> Corpus:
    """
    Read a manifest written by write_manifest.

    Raises:
        ParseError: With the offending line number for a malformed header,
            a row without seven fields, a non-integer or out-of-range label,
            or an unknown split.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].strip():
        raise ParseError(str(path), 1, "Empty manifest")
    header = _parse_header(lines[0], path)
    try:
        label_space = LabelSpace(int(header["actions"]), int(header["objects"]), int(header["locations"]))
        dim = int(header["dim"])
        sample_rate = int(header.get("sample_rate", 16000))
        frame_ms = float(header.get("frame_ms", 10.0))
    except ValueError as e:
        raise ParseError(str(path), 1, f"Invalid header value: {e}")
    signal_format = header["signal_format"]
    if signal_format not in {"frames", "waveform"}:
        raise ParseError(str(path), 1, f"Unknown signal_format {signal_format!r}")

    corpus = Corpus(
        utterances=[],
        label_space=label_space,
        feature_dim=dim,
        signal_format=signal_format,
        sample_rate=sample_rate,
        frame_ms=frame_ms,
    )
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ParseError(str(path), number, f"Expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}")
        signal_path, transcript, action, obj, location, speaker_id, split = fields
        if split not in SPLITS:
            raise ParseError(str(path), number, f"Unknown split {split!r}")
        try:
            intent = IntentTriple(int(action), int(obj), int(location))
        except ValueError:
            raise ParseError(str(path), number, "Labels must be integers")
        if not label_space.contains(intent):
            raise ParseError(str(path), number, f"Label {intent} is outside {label_space}")

        utterance = Utterance(
            utterance_id=Path(signal_path).stem,
            transcript=transcript or None,
            intent=intent,
            speaker_id=speaker_id,
            split=split,
            signal_path=signal_path,
        )
        if load_signals:
            _load_signal(utterance, path.parent, corpus, number, path)
        corpus.utterances.append(utterance)
    return corpus


def _load_signal(utterance: Utterance, root: Path, corpus: Corpus, number: int, path: Path) -> None:
    signal_file = root / utterance.signal_path
    if not signal_file.exists():
        raise ParseError(str(path), number, f"Signal file {signal_file} does not exist")
    data = np.fromfile(signal_file, dtype="<f4").astype(np.float64)
    if corpus.signal_format == "waveform":
        utterance.signal = data
        utterance.frames = frame(data, corpus.sample_rate, corpus.frame_ms, corpus.feature_dim).frames
    else:
        if data.size == 0 or data.size % corpus.feature_dim:
            raise ParseError(str(path), number, f"Signal size {data.size} is not a multiple of {corpus.feature_dim}")
        utterance.frames = data.reshape(-1, corpus.feature_dim)
