"""Stage orchestration: corpus, codebook, model construction and stage runs.

Model sizes that depend on data (number of codes, intent classes,
alphabet size, AM input width) are taken from the data and the codebook,
so configuration files cannot disagree with them.
"""

import copy
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from kdslu.acoustic_model import AcousticModel, CtcAlphabet
from kdslu.bundle import ModelBundle
from kdslu.config import AMConfig, Config, SpeechEncoderConfig, TextEncoderConfig
from kdslu.data.labels import LabelSpace, label_encode
from kdslu.data.manifest import read_manifest, write_manifest
from kdslu.data.synth import Corpus, Utterance, synth_generate
from kdslu.exceptions import EmptyInputError
from kdslu.logging import EventLogger
from kdslu.optim import seed_everything
from kdslu.speech_encoder import SpeechEncoder
from kdslu.text_pipeline import (
    TeacherReport,
    TextTeacher,
    TextTokenSequence,
    TextVocabulary,
    finetune_teacher,
    teacher_accuracy,
    tokenize_text,
)
from kdslu.tokenizer_vq import Codebook, FrameSequence, encode, fit_codebook
from kdslu.training import (
    AmPretrainResult,
    Example,
    FinetuneResult,
    PretrainResult,
    paired_text,
    run_am_pretrain,
    run_finetune,
    run_pt_kd,
)


@dataclass
class PreparedData:
    """Tokenized splits plus the vocabularies used to build them."""

    train: list[Example]
    valid: list[Example]
    test: list[Example]
    label_space: LabelSpace
    vocab: TextVocabulary
    alphabet: CtcAlphabet


# --- Data ---


def generate_corpus(config: Config, manifest_path: Path) -> Corpus:
    """Generate the synthetic corpus and write its manifest."""
    corpus = synth_generate(config.data)
    write_manifest(corpus, manifest_path)
    return corpus


def load_corpus(manifest_path: Path) -> Corpus:
    return read_manifest(manifest_path, load_signals=True)


def utterance_frames(utterance: Utterance, corpus: Corpus) -> FrameSequence:
    if utterance.frames is None:
        raise EmptyInputError(f"Utterance {utterance.utterance_id!r} has no frames loaded")
    return FrameSequence(utterance.frames, frame_duration=corpus.frame_ms)


def fit_corpus_codebook(corpus: Corpus, k: int, max_iters: int, seed: int) -> Codebook:
    """Fit the codebook on frames of the training split only."""
    frames = [utterance_frames(u, corpus) for u in corpus.split("train")]
    if not frames:
        raise EmptyInputError("Corpus has no training utterances")
    return fit_codebook(frames, k=k, max_iters=max_iters, seed=seed)


def prepare_examples(
    utterances: Sequence[Utterance],
    corpus: Corpus,
    codebook: Codebook,
    vocab: TextVocabulary,
    alphabet: CtcAlphabet,
) -> list[Example]:
    """Quantize frames and attach label, text tokens and CTC targets."""
    examples = []
    for u in utterances:
        transcript = u.transcript or None
        examples.append(
            Example(
                tokens=encode(utterance_frames(u, corpus), codebook),
                label=label_encode(u.intent, corpus.label_space),
                text=tokenize_text(transcript, vocab) if transcript else None,
                ctc_targets=alphabet.encode(transcript) if transcript else None,
                utterance_id=u.utterance_id,
            )
        )
    return examples


def prepare_data(corpus: Corpus, codebook: Codebook) -> PreparedData:
    vocab, alphabet = TextVocabulary(), CtcAlphabet()
    return PreparedData(
        train=prepare_examples(corpus.split("train"), corpus, codebook, vocab, alphabet),
        valid=prepare_examples(corpus.split("valid"), corpus, codebook, vocab, alphabet),
        test=prepare_examples(corpus.split("test"), corpus, codebook, vocab, alphabet),
        label_space=corpus.label_space,
        vocab=vocab,
        alphabet=alphabet,
    )


def text_pairs(examples: Sequence[Example]) -> list[tuple[TextTokenSequence, int]]:
    return list(zip(paired_text(examples), [e.label for e in examples]))


# --- Model construction ---


def speech_config(config: Config, codebook: Codebook) -> SpeechEncoderConfig:
    return replace(config.speech, num_codes=codebook.k)


def text_config(config: Config, data: PreparedData) -> TextEncoderConfig:
    return replace(config.text, vocab_size=data.vocab.size, num_classes=data.label_space.size)


def am_config(config: Config, data: PreparedData) -> AMConfig:
    return replace(
        config.am,
        input_dim=config.speech.hidden_dim,
        num_classes=data.label_space.size,
        alphabet_size=data.alphabet.size,
    )


def build_speech_encoder(config: Config, codebook: Codebook, seed: int) -> SpeechEncoder:
    seed_everything(seed)
    return SpeechEncoder(speech_config(config, codebook))


def build_acoustic_model(config: Config, data: PreparedData, seed: int) -> AcousticModel:
    seed_everything(seed)
    return AcousticModel(am_config(config, data))


# --- Stages ---


def train_teacher(
    config: Config, data: PreparedData, seed: int, train: Optional[Sequence[Example]] = None
) -> tuple[TextTeacher, TeacherReport, float]:
    """
    Fine-tune the text teacher on training transcripts (`train`, by default
    the full training split).

    Returns:
        The teacher, its report and its validation accuracy (training
        accuracy when there is no validation split).
    """
    pairs, valid = text_pairs(data.train if train is None else train), text_pairs(data.valid)
    teacher, report = finetune_teacher(
        pairs,
        valid,
        text_config(config, data),
        replace(config.training.teacher, seed=seed),
        data.vocab,
    )
    accuracy = report.best_valid_accuracy
    if accuracy is None:
        accuracy = teacher_accuracy(teacher, pairs)
    return teacher, report, accuracy


def pretrain_encoder(
    config: Config,
    data: PreparedData,
    codebook: Codebook,
    seed: int,
    teacher: Optional[TextTeacher] = None,
    init: Optional[SpeechEncoder] = None,
    train: Optional[Sequence[Example]] = None,
    logger: Optional[EventLogger] = None,
) -> tuple[SpeechEncoder, PretrainResult]:
    """
    MLM pre-training (no teacher) or PT-KD (with a teacher).

    `init` is copied, never modified; PT-KD normally starts from the
    MLM-pre-trained base encoder. `train` defaults to the training split.
    """
    name = "pt_kd" if teacher is not None else "mlm"
    stage = replace(getattr(config.training, name), seed=seed)
    encoder = copy.deepcopy(init) if init is not None else build_speech_encoder(config, codebook, seed)
    bundle = ModelBundle(codebook, encoder, build_acoustic_model(config, data, seed), teacher)
    result = run_pt_kd(
        bundle,
        data.train if train is None else list(train),
        stage,
        config.training.mlm_mask,
        heldout=data.valid if teacher is not None else (),
        stage_name=name,
        logger=logger,
    )
    return encoder, result


def pretrain_am(
    config: Config,
    data: PreparedData,
    codebook: Codebook,
    encoder: SpeechEncoder,
    seed: int,
    train: Optional[Sequence[Example]] = None,
    logger: Optional[EventLogger] = None,
) -> tuple[AcousticModel, AmPretrainResult]:
    """
    CTC pre-training on `train` (default: the training split).

    The returned AM gets a freshly initialized intent head.
    """
    am = build_acoustic_model(config, data, seed)
    bundle = ModelBundle(codebook, encoder, am)
    examples = data.train if train is None else list(train)
    result = run_am_pretrain(
        bundle, examples, replace(config.training.am_pt, seed=seed), data.valid, config.da, logger
    )
    seed_everything(seed)
    am.reset_intent_head()
    return am, result


def finetune_slu(
    config: Config,
    data: PreparedData,
    codebook: Codebook,
    encoder: SpeechEncoder,
    seed: int,
    teacher: Optional[TextTeacher] = None,
    teacher_acc: Optional[float] = None,
    am_init: Optional[AcousticModel] = None,
    use_kd: bool = True,
    augment: Optional[bool] = None,
    train: Optional[Sequence[Example]] = None,
    logger: Optional[EventLogger] = None,
) -> tuple[ModelBundle, FinetuneResult]:
    """
    Fine-tune an SLU system.

    Args:
        use_kd: Keep the configured kd weight; False sets it to zero.
        augment: Override stage augmentation when not None.
        train: Training subset (low-resource split); defaults to the full split.
    """
    stage = replace(config.training.ft, seed=seed)
    if not use_kd:
        stage = replace(stage, loss_weights={**stage.loss_weights, "kd": 0.0})
    if augment is not None:
        stage = replace(stage, augment=augment)
    am = copy.deepcopy(am_init) if am_init is not None else build_acoustic_model(config, data, seed)
    bundle = ModelBundle(codebook, encoder, am, teacher)
    result = run_finetune(
        bundle,
        list(train) if train is not None else data.train,
        stage,
        valid=data.valid,
        test=data.test,
        da=config.da,
        teacher_accuracy=teacher_acc,
        min_teacher_accuracy=config.training.teacher_min_accuracy,
        logger=logger,
    )
    return bundle, result
