"""Corpus generation, label codec, manifests and split protocol."""

from kdslu.data.labels import (
    FSC_LABELS,
    TOY_LABELS,
    IntentTriple,
    LabelSpace,
    label_decode,
    label_encode,
)
from kdslu.data.manifest import read_manifest, write_manifest
from kdslu.data.splits import make_low_resource_splits
from kdslu.data.synth import Corpus, Grammar, Utterance, oracle_parse, synth_generate

__all__ = [
    "FSC_LABELS",
    "TOY_LABELS",
    "Corpus",
    "Grammar",
    "IntentTriple",
    "LabelSpace",
    "Utterance",
    "label_decode",
    "label_encode",
    "make_low_resource_splits",
    "oracle_parse",
    "read_manifest",
    "synth_generate",
    "write_manifest",
]
