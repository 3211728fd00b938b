"""Tests for the training stages and their loss bookkeeping."""

import numpy as np
import pytest
import torch

from kdslu.acoustic_model import AcousticModel, CtcAlphabet
from kdslu.bundle import ModelBundle, set_frozen
from kdslu.config import DAConfig, MaskSpec, ScheduleConfig, StageConfig
from kdslu.exceptions import (
    ConfigValidationError,
    EmptyInputError,
    PairingError,
    TeacherQualityError,
)
from kdslu.optim import build_optimizer
from kdslu.speech_encoder import SpeechEncoder
from kdslu.text_pipeline import TextTeacher, tokenize_text
from kdslu.tokenizer_vq import Codebook, TokenSequence
from kdslu.training import (
    REQUIRED_FROZEN,
    EarlyStopper,
    Example,
    LossReport,
    character_accuracy,
    compute_ft_loss,
    compute_pt_kd_loss,
    ctc_feasible,
    ctc_validation_loss,
    evaluate,
    ft_step,
    l1_distance,
    predict_intents,
    run_am_pretrain,
    run_finetune,
    run_pt_kd,
    sample_mlm_mask,
    weighted_sum,
)
from kdslu.transformer import pad_sequences

WORDS = ["on", "off", "up", "down"]


def make_examples(count: int = 8, seed: int = 0, length: int = 12, with_text: bool = True) -> list[Example]:
    rng = np.random.default_rng(seed)
    alphabet = CtcAlphabet()
    examples = []
    for i in range(count):
        label = i % len(WORDS)
        word = WORDS[label]
        examples.append(
            Example(
                tokens=TokenSequence(rng.integers(0, 8, size=length), num_codes=8),
                label=label,
                text=tokenize_text(word) if with_text else None,
                ctc_targets=alphabet.encode(word),
                utterance_id=f"u{i}",
            )
        )
    return examples


def stage_config(name: str, **overrides) -> StageConfig:
    weights = {
        "mlm": {"mlm": 1.0, "kd": 0.0},
        "pt_kd": {"mlm": 1.0, "kd": 1.0},
        "am_pt": {"ctc": 1.0},
        "ft": {"ce": 1.0, "kd": 1.0},
    }[name]
    freeze = {
        "mlm": ["quantizer_codebook", "teacher", "am", "heads"],
        "pt_kd": ["quantizer_codebook", "teacher", "am", "heads"],
        "am_pt": ["quantizer_codebook", "speech_encoder", "teacher"],
        "ft": ["quantizer_codebook", "speech_encoder", "teacher"],
    }[name]
    values = dict(
        stage=name,
        schedule=ScheduleConfig(kind="constant", lr=1e-2),
        loss_weights=weights,
        freeze=freeze,
        max_steps=3,
        max_epochs=2,
        batch_size=4,
        eval_every=1,
    )
    values.update(overrides)
    return StageConfig(**values)


@pytest.fixture
def bundle(speech_config, text_config, am_config) -> ModelBundle:
    torch.manual_seed(0)
    codebook = Codebook(np.arange(16, dtype=float).reshape(8, 2))
    return ModelBundle(codebook, SpeechEncoder(speech_config), AcousticModel(am_config), TextTeacher(text_config))


class TestLossBookkeeping:
    """Tests for LossReport, weighted_sum and l1_distance."""

    def test_from_terms_total(self):
        """The total is the weighted sum of the terms."""
        report = LossReport.from_terms(0, {"ce": torch.tensor(2.0), "kd": torch.tensor(3.0)}, {"ce": 1.0, "kd": 0.5})
        assert report.total == pytest.approx(3.5)

    def test_inconsistent_total(self):
        """A total that disagrees with its terms is rejected."""
        with pytest.raises(ValueError):
            LossReport(step=0, terms={"ce": 1.0}, weights={"ce": 2.0}, total=1.0)

    def test_unweighted_term_counts_once(self):
        """Terms without a weight contribute with weight one."""
        assert weighted_sum({"ce": 2.0, "x": 1.0}, {"ce": 0.5}) == 2.0

    def test_l1_distance(self):
        """Row-wise L1 over the last axis."""
        a = torch.tensor([[1.0, -1.0], [0.0, 0.0]])
        b = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
        assert l1_distance(a, b).tolist() == [3.0, 0.0]


class TestEarlyStopper:
    """Tests for EarlyStopper."""

    def test_stops_after_patience_rising_windows(self):
        """Two consecutive rising windows stop with patience 2."""
        stopper = EarlyStopper(window=2, patience=2)
        decisions = [stopper.update(v) for v in [1, 1, 2, 2, 3, 3]]
        assert decisions == [False] * 5 + [True]

    def test_fall_resets(self):
        """A falling window resets the count."""
        stopper = EarlyStopper(window=1, patience=2)
        decisions = [stopper.update(v) for v in [1, 2, 1, 2, 3]]
        assert decisions == [False, False, False, False, True]


class TestStageFreeze:
    """Tests for required frozen groups."""

    def test_required_sets(self):
        """Every stage freezes the codebook; fine-tuning also the encoder and teacher."""
        assert all("quantizer_codebook" in groups for groups in REQUIRED_FROZEN.values())
        assert REQUIRED_FROZEN["ft"] == {"quantizer_codebook", "speech_encoder", "teacher"}

    def test_missing_required_group(self, bundle):
        """Fine-tuning with a trainable encoder is a config error."""
        stage = stage_config("ft", freeze=["quantizer_codebook", "teacher"], loss_weights={"ce": 1.0})
        with pytest.raises(ConfigValidationError) as exc:
            run_finetune(bundle, make_examples(), stage)
        assert exc.value.field == "training.ft.freeze"


class TestPretraining:
    """Tests for MLM and PT-KD pre-training."""

    def test_mlm_mask_never_empty(self):
        """Rows too short for a span start still mask one position."""
        batch = pad_sequences([torch.arange(3), torch.arange(5)], pad_id=8)
        mask = sample_mlm_mask(batch, MaskSpec(p=0.05, M=10), seed=0)
        assert mask.sum(dim=1).tolist() == [1, 1]
        assert not (mask & batch.padding_mask).any()

    def test_pt_kd_terms(self, bundle):
        """With a kd weight both terms are reported."""
        total, terms = compute_pt_kd_loss(bundle, make_examples(), stage_config("pt_kd"), MaskSpec(0.1, 2), seed=0)
        assert set(terms) == {"mlm", "kd"}
        assert float(total) == pytest.approx(float(terms["mlm"] + terms["kd"]))

    def test_mlm_has_no_kd(self, bundle):
        """Without a kd weight no transcript is needed."""
        _, terms = compute_pt_kd_loss(
            bundle, make_examples(with_text=False), stage_config("mlm"), MaskSpec(0.1, 2), seed=0
        )
        assert set(terms) == {"mlm"}

    def test_missing_transcript(self, bundle):
        """Distillation needs a transcript for every example."""
        with pytest.raises(PairingError):
            compute_pt_kd_loss(bundle, make_examples(with_text=False), stage_config("pt_kd"), MaskSpec(0.1, 2), 0)

    def test_only_encoder_changes(self, bundle):
        """PT-KD updates the encoder and leaves every frozen group bit-identical."""
        before = bundle.checksums()
        result = run_pt_kd(bundle, make_examples(), stage_config("pt_kd"), MaskSpec(0.1, 2), heldout=make_examples(4))
        after = bundle.checksums()
        assert result.steps == 3
        assert after["speech_encoder"] != before["speech_encoder"]
        for group in ("quantizer_codebook", "teacher", "am", "heads"):
            assert after[group] == before[group]
        assert result.initial_distance is not None
        assert result.final_distance is not None

    def test_history_is_consistent(self, bundle):
        """Every step report sums its weighted terms."""
        result = run_pt_kd(bundle, make_examples(), stage_config("pt_kd"), MaskSpec(0.1, 2))
        for report in result.history:
            assert report.total == pytest.approx(weighted_sum(report.terms, report.weights))

    def test_no_examples(self, bundle):
        """Pre-training needs data."""
        with pytest.raises(EmptyInputError):
            run_pt_kd(bundle, [], stage_config("mlm"), MaskSpec(0.1, 2))

    @staticmethod
    def scripted_step(mlm_slope: float, kd_slope: float):
        """A pt_kd_step stand-in whose loss terms follow straight lines in the step."""

        def scripted(bundle, examples, stage, optimizer, step, mlm_mask):
            terms = {"mlm": 5.0 + mlm_slope * step, "kd": 1.0 + kd_slope * step}
            return LossReport(step, terms, dict(stage.loss_weights), weighted_sum(terms, stage.loss_weights))

        return scripted

    def test_rising_kd_does_not_stop_training(self, bundle, monkeypatch):
        """Only the MLM term drives early stopping; a growing KD term is ignored."""
        monkeypatch.setattr("kdslu.training.pt_kd_step", self.scripted_step(-0.01, 0.05))
        stage = stage_config("pt_kd", max_steps=200, smoothing_window=10, patience=3)
        result = run_pt_kd(bundle, make_examples(), stage, MaskSpec(0.1, 2))
        assert not result.stopped_early
        assert result.steps == 200

    def test_rising_mlm_stops_training(self, bundle, monkeypatch):
        """A smoothed MLM loss that keeps rising ends pre-training after patience windows."""
        monkeypatch.setattr("kdslu.training.pt_kd_step", self.scripted_step(0.01, -0.001))
        stage = stage_config("pt_kd", max_steps=200, smoothing_window=10, patience=3)
        result = run_pt_kd(bundle, make_examples(), stage, MaskSpec(0.1, 2))
        assert result.stopped_early
        assert result.steps == 40

    def test_pt_kd_gradients(self, speech_config, text_config, am_config, grad_check):
        """Gradients of mlm + kd with respect to the encoder agree with central differences."""
        torch.manual_seed(5)
        codebook = Codebook(np.arange(16, dtype=float).reshape(8, 2))
        bundle = ModelBundle(
            codebook,
            SpeechEncoder(speech_config).double().eval(),
            AcousticModel(am_config).double().eval(),
            TextTeacher(text_config).double().eval(),
        )
        examples = make_examples(4)
        stage = stage_config("pt_kd")
        params = [bundle.speech.backbone.token_embedding.weight, bundle.speech.mlm_head.weight]
        grad_check(lambda: compute_pt_kd_loss(bundle, examples, stage, MaskSpec(0.2, 2), seed=3)[0], params)


class TestAmPretraining:
    """Tests for CTC pre-training."""

    def test_feasibility(self, bundle):
        """Short outputs cannot emit long transcripts."""
        example = make_examples(1)[0]
        assert ctc_feasible(example, bundle.am)
        example.ctc_targets = CtcAlphabet().encode("turn on the lights")
        assert not ctc_feasible(example, bundle.am)

    def test_skips_infeasible_and_freezes_encoder(self, bundle):
        """Infeasible examples are counted; the encoder is untouched."""
        train = make_examples()
        train[0].ctc_targets = CtcAlphabet().encode("turn on the lights")
        before = bundle.checksums()
        result = run_am_pretrain(bundle, train, stage_config("am_pt"), valid=make_examples(4, seed=1))
        after = bundle.checksums()
        assert result.skipped == 1
        assert after["speech_encoder"] == before["speech_encoder"]
        assert after["teacher"] == before["teacher"]
        assert after["am"] != before["am"]
        assert result.best_valid_ctc is not None

    def test_best_weights_restored(self, bundle):
        """The kept AM scores the best validation CTC seen."""
        valid = make_examples(4, seed=1)
        result = run_am_pretrain(bundle, make_examples(), stage_config("am_pt"), valid=valid)
        assert ctc_validation_loss(bundle.slu, valid) == pytest.approx(result.best_valid_ctc, rel=1e-5)

    def test_augmented_pretraining_runs(self, bundle):
        """CTC pre-training accepts DA masks when enabled."""
        stage = stage_config("am_pt", augment=True)
        result = run_am_pretrain(bundle, make_examples(), stage, da=DAConfig())
        assert len(result.history) == 3

    def test_character_accuracy_bounds(self, bundle):
        """Character accuracy is a fraction."""
        accuracy = character_accuracy(bundle.slu, make_examples(), CtcAlphabet())
        assert 0.0 <= accuracy <= 1.0

    def test_nothing_feasible(self, bundle):
        """All-infeasible data is an error."""
        train = make_examples(2)
        for e in train:
            e.ctc_targets = None
        with pytest.raises(EmptyInputError):
            run_am_pretrain(bundle, train, stage_config("am_pt"))

    @pytest.mark.parametrize("kind", ["linear", "anneal"])
    def test_scheduler_steps_after_optimizer(self, bundle, recwarn, kind):
        """Schedules advance only after an optimizer update, per step or per epoch."""
        stage = stage_config("am_pt", schedule=ScheduleConfig(kind=kind, lr=1e-2, total_steps=3, gamma=1.05))
        run_am_pretrain(bundle, make_examples(), stage)
        assert not any("lr_scheduler.step()" in str(w.message) for w in recwarn)


class TestFinetuning:
    """Tests for fine-tuning and evaluation."""

    def test_teacher_below_threshold(self, bundle):
        """Distilling from a weak teacher is refused."""
        with pytest.raises(TeacherQualityError) as exc:
            run_finetune(bundle, make_examples(), stage_config("ft"), teacher_accuracy=0.5, min_teacher_accuracy=0.9)
        assert exc.value.threshold == 0.9

    def test_unknown_teacher_accuracy(self, bundle):
        """Without a measured accuracy distillation is refused."""
        with pytest.raises(TeacherQualityError):
            run_finetune(bundle, make_examples(), stage_config("ft"), teacher_accuracy=None)

    def test_kd_off_ignores_teacher_quality(self, bundle):
        """With kd weight zero the teacher is not consulted."""
        stage = stage_config("ft", loss_weights={"ce": 1.0, "kd": 0.0})
        result = run_finetune(bundle, make_examples(), stage, teacher_accuracy=0.0)
        assert all(set(r.terms) == {"ce"} for r in result.history)

    def test_frozen_groups_unchanged(self, bundle):
        """Fine-tuning updates only the AM and its heads."""
        before = bundle.checksums()
        result = run_finetune(
            bundle,
            make_examples(),
            stage_config("ft"),
            valid=make_examples(4, seed=1),
            test=make_examples(4, seed=2),
            teacher_accuracy=1.0,
        )
        after = bundle.checksums()
        assert after["speech_encoder"] == before["speech_encoder"]
        assert after["teacher"] == before["teacher"]
        assert after["heads"] != before["heads"]
        assert len(result.valid_accuracies) == 2
        assert result.best_valid_accuracy == max(result.valid_accuracies)
        assert result.test_accuracy is not None

    def test_anneal_steps_after_optimizer(self, bundle, recwarn):
        """The annealed rate decays at epoch ends, after the optimizer update."""
        stage = stage_config("ft", schedule=ScheduleConfig(kind="anneal", lr=1e-2, gamma=1.05))
        run_finetune(bundle, make_examples(), stage, teacher_accuracy=1.0)
        assert not any("lr_scheduler.step()" in str(w.message) for w in recwarn)

    def test_step_leaves_teacher_without_gradients(self, bundle):
        """The teacher never receives gradients."""
        stage = stage_config("ft")
        run_finetune(bundle, make_examples(), stage, teacher_accuracy=1.0)
        assert all(p.grad is None for p in bundle.teacher.parameters())

    def test_ft_step_report(self, bundle):
        """One step reports ce and kd with the stage weights."""
        stage = stage_config("ft")
        set_frozen(bundle, stage.freeze)
        report = ft_step(bundle, make_examples(4), stage, build_optimizer(bundle.trainable_parameters(), stage), 0)
        assert set(report.terms) == {"ce", "kd"}
        assert report.weights == {"ce": 1.0, "kd": 1.0}

    def test_ft_gradients(self, speech_config, text_config, am_config, grad_check):
        """Gradients of ce + kd with respect to the AM agree with central differences."""
        torch.manual_seed(3)
        codebook = Codebook(np.arange(16, dtype=float).reshape(8, 2))
        bundle = ModelBundle(
            codebook,
            SpeechEncoder(speech_config).double().eval(),
            AcousticModel(am_config).double().eval(),
            TextTeacher(text_config).double().eval(),
        )
        examples = make_examples(4)
        params = [bundle.am.intent_head.weight, bundle.am.rnn.weight_hh_l0]
        grad_check(lambda: compute_ft_loss(bundle, examples, stage_config("ft"))[0], params)

    def test_evaluate_without_transcripts(self, bundle):
        """Evaluation uses speech only and matches the predictions."""
        examples = make_examples(with_text=False)
        accuracy = evaluate(bundle.slu, examples)
        predictions = predict_intents(bundle.slu, examples)
        expected = np.mean([p == e.label for p, e in zip(predictions, examples)])
        assert accuracy == pytest.approx(expected)

    def test_evaluate_empty(self, bundle):
        """Evaluation needs data."""
        with pytest.raises(EmptyInputError):
            evaluate(bundle.slu, [])
