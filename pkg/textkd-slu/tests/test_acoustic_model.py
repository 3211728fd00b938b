"""Tests for the acoustic model and CTC utilities."""

import itertools
import math

import numpy as np
import pytest
import torch

from kdslu.acoustic_model import (
    BLANK_ID,
    AcousticModel,
    AMFeatures,
    CtcAlphabet,
    collapse_ctc,
    ctc_negative_log_likelihood,
    ctc_required_length,
    min_input_length,
    output_length,
)
from kdslu.config import AMConfig, ConvLayerConfig
from kdslu.exceptions import InfeasibleAlignmentError, LengthError, ShapeError, VocabError
from kdslu.speech_encoder import HiddenSequence


def brute_force_nll(log_probs: np.ndarray, targets: list[int]) -> float:
    """Sum the probability of every frame path that collapses to targets."""
    frames, symbols = log_probs.shape
    total = 0.0
    for path in itertools.product(range(symbols), repeat=frames):
        if collapse_ctc(path) == targets:
            total += math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return -math.log(total)


def states(lengths: list[int], dim: int = 8, seed: int = 0, dtype=torch.float32) -> HiddenSequence:
    generator = torch.Generator().manual_seed(seed)
    steps = max(lengths)
    values = torch.randn((len(lengths), steps, dim), generator=generator, dtype=dtype)
    padding = torch.arange(steps)[None, :] >= torch.tensor(lengths)[:, None]
    return HiddenSequence(values[:, 0], values, padding)


@pytest.fixture
def am(am_config) -> AcousticModel:
    torch.manual_seed(0)
    return AcousticModel(am_config).eval()


class TestCtcAlphabet:
    """Tests for CtcAlphabet."""

    def test_blank_is_zero(self):
        """Characters start at id 1; size counts the blank."""
        alphabet = CtcAlphabet()
        assert alphabet.size == 29
        assert alphabet.encode("a") == [1]
        assert BLANK_ID not in alphabet.encode("turn on the lights")

    def test_decode_inverts_encode(self):
        """decode(encode(text)) gives the normalized text."""
        alphabet = CtcAlphabet()
        assert alphabet.decode(alphabet.encode("Turn  ON the lights")) == "turn on the lights"

    def test_unknown_character(self):
        """Characters outside the alphabet are rejected."""
        with pytest.raises(VocabError):
            CtcAlphabet().encode("bring 2 shoes")


class TestLengths:
    """Tests for CTC and convolution length helpers."""

    def test_required_length_counts_repeats(self):
        """Each adjacent repeat needs a blank between."""
        assert ctc_required_length([1, 2, 3]) == 3
        assert ctc_required_length([1, 1, 2, 2, 2]) == 8

    def test_collapse(self):
        """Repeats merge before blanks drop."""
        assert collapse_ctc([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]

    def test_output_length(self, am_config):
        """Kernel 3 stride 2 with same padding halves, rounding up."""
        assert output_length(10, am_config.conv_layers) == 5
        assert output_length(11, am_config.conv_layers) == 6

    def test_output_length_closed_form(self):
        """Odd kernels with same padding give ceil(T / s) frames per layer, over 50 random cases."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            convs = [
                ConvLayerConfig(
                    channels=1,
                    kernel=(int(rng.choice([1, 3, 5, 7])), 3),
                    stride=(int(rng.integers(1, 4)), 1),
                )
                for _ in range(int(rng.integers(1, 4)))
            ]
            length = int(rng.integers(1, 60))
            expected = length
            for conv in convs:
                expected = math.ceil(expected / conv.stride[0])
            assert output_length(length, convs) == expected

            model = AcousticModel(
                AMConfig(conv_layers=convs, rnn_layers=1, rnn_hidden=2, input_dim=4, num_classes=2)
            )
            with torch.no_grad():
                features = model(states([length], dim=4, seed=int(rng.integers(1000))))
            assert features.lengths.tolist() == [expected]
            assert features.values.shape[1] == expected

    def test_min_input_length_even_kernel(self):
        """An even kernel with stride 2 needs at least two inputs."""
        convs = [ConvLayerConfig(channels=1, kernel=(4, 3), stride=(2, 1))]
        assert min_input_length(convs) == 2
        assert output_length(2, convs) == 1


class TestCtcLikelihood:
    """Tests for ctc_negative_log_likelihood()."""

    @pytest.mark.slow
    def test_matches_brute_force(self):
        """Dynamic programming equals path enumeration on 250 random cases."""
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(250):
            frames = int(rng.integers(1, 6))
            symbols = 3
            logits = rng.normal(size=(frames, symbols))
            log_probs = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
            targets = rng.integers(1, symbols, size=int(rng.integers(1, 4))).tolist()
            tensor = torch.tensor(log_probs, dtype=torch.float64)
            if ctc_required_length(targets) > frames:
                with pytest.raises(InfeasibleAlignmentError):
                    ctc_negative_log_likelihood(tensor, targets)
                continue
            nll = float(ctc_negative_log_likelihood(tensor, targets))
            assert nll == pytest.approx(brute_force_nll(log_probs, targets), abs=1e-9)
            checked += 1
        assert checked >= 100

    def test_blank_target_rejected(self):
        """Targets may not contain the blank."""
        with pytest.raises(VocabError):
            ctc_negative_log_likelihood(torch.zeros((3, 3)), [0, 1])

    def test_exact_fit(self):
        """A target needing exactly T frames has one alignment."""
        log_probs = torch.log(torch.full((3, 3), 1 / 3, dtype=torch.float64))
        nll = float(ctc_negative_log_likelihood(log_probs, [1, 2, 1]))
        assert nll == pytest.approx(3 * math.log(3))


class TestAcousticModel:
    """Tests for AcousticModel."""

    def test_shapes(self, am):
        """Output frames follow output_length; heads have their sizes."""
        features = am(states([10, 7]))
        assert features.lengths.tolist() == [5, 4]
        assert features.values.shape == (2, 5, 8)
        assert am.intent_logits(features).shape == (2, 4)
        assert am.ctc_log_probs(features).shape == (2, 5, 29)

    def test_padding_invariance(self, am):
        """A row's intent logits do not depend on its batch mates."""
        batch = states([10, 6], seed=3)
        alone = HiddenSequence(batch.cls[1:], batch.states[1:, :6], batch.padding_mask[1:, :6])
        with torch.no_grad():
            a = am.intent_logits(am(alone))
            b = am.intent_logits(am(batch))
        assert torch.allclose(a[0], b[1], atol=1e-5)

    def test_reversal_changes_recurrent_output(self, am):
        """The recurrent stack is order-sensitive: reversing the input changes interior outputs."""
        hidden = states([12], seed=6)
        reversed_hidden = HiddenSequence(hidden.cls, hidden.states.flip(1), hidden.padding_mask)
        with torch.no_grad():
            forward = am(hidden).values[0]
            backward = am(reversed_hidden).values[0]
        interior = slice(1, forward.shape[0] - 1)
        assert not torch.allclose(forward[interior], backward.flip(0)[interior], atol=1e-4)

    def test_wrong_input_dim(self, am):
        """States of the wrong width are rejected."""
        with pytest.raises(ShapeError):
            am(states([5], dim=6))

    def test_too_short(self, am_config):
        """Inputs shorter than the convolutions allow are rejected."""
        am_config.conv_layers = [ConvLayerConfig(channels=1, kernel=(4, 3), stride=(2, 1))]
        model = AcousticModel(am_config)
        with pytest.raises(LengthError):
            model(states([1]))

    def test_ctc_loss_infeasible(self, am):
        """Too few output frames for a target raises."""
        features = am(states([4]))
        with pytest.raises(InfeasibleAlignmentError) as exc:
            am.ctc_loss(features, [[1, 2, 3]])
        assert exc.value.available == 2

    def test_ctc_loss_is_batch_mean(self, am):
        """The batch loss is the mean of per-row likelihoods."""
        features = am(states([10, 8]))
        targets = [[1, 2], [3]]
        log_probs = am.ctc_log_probs(features)
        rows = [
            ctc_negative_log_likelihood(log_probs[i, : int(features.lengths[i])], targets[i])
            for i in range(2)
        ]
        assert float(am.ctc_loss(features, targets)) == pytest.approx(float(sum(rows) / 2), rel=1e-5)

    def test_greedy_decode(self, am):
        """Decoding yields one alphabet string per row."""
        alphabet = CtcAlphabet()
        with torch.no_grad():
            texts = am.greedy_decode(am(states([10, 6])), alphabet)
        assert len(texts) == 2
        assert all(set(t) <= set(alphabet.characters) for t in texts)

    def test_reset_intent_head(self, am):
        """Re-initialising changes only the intent head."""
        ctc_before = am.ctc_head.weight.clone()
        intent_before = am.intent_head.weight.clone()
        torch.manual_seed(5)
        am.reset_intent_head()
        assert torch.equal(am.ctc_head.weight, ctc_before)
        assert not torch.equal(am.intent_head.weight, intent_before)

    def test_ctc_gradients(self, am_config, grad_check):
        """CTC loss gradients agree with central differences."""
        torch.manual_seed(2)
        model = AcousticModel(am_config).double()
        hidden = states([10, 8], dtype=torch.float64, seed=4)
        params = [model.ctc_head.weight, model.rnn.weight_ih_l0]
        grad_check(lambda: model.ctc_loss(model(hidden), [[1, 2], [3, 3]]), params)


class TestIntentLogits:
    """Tests for AcousticModel.intent_logits()."""

    def features(self, frames: int = 6, seed: int = 0) -> AMFeatures:
        generator = torch.Generator().manual_seed(seed)
        return AMFeatures(torch.randn((1, frames, 8), generator=generator), torch.tensor([frames]))

    def test_single_frame_is_projection(self, am):
        """With one frame, max-pooling is the identity."""
        single = self.features(frames=1)
        with torch.no_grad():
            assert torch.allclose(am.intent_logits(single), am.intent_head(single.values[:, 0]))

    def test_invariant_to_frame_duplication(self, am):
        """Repeating every frame leaves the logits unchanged."""
        source = self.features()
        doubled = AMFeatures(source.values.repeat_interleave(2, dim=1), source.lengths * 2)
        with torch.no_grad():
            assert torch.allclose(am.intent_logits(source), am.intent_logits(doubled))

    @pytest.mark.parametrize("seed", range(3))
    def test_invariant_to_frame_permutation(self, am, seed):
        """Shuffling frames leaves the logits unchanged."""
        source = self.features(seed=seed)
        order = torch.randperm(6, generator=torch.Generator().manual_seed(seed + 10))
        shuffled = AMFeatures(source.values[:, order], source.lengths)
        with torch.no_grad():
            assert torch.allclose(am.intent_logits(source), am.intent_logits(shuffled))

    def test_padded_frames_ignored(self, am):
        """Frames past a row's length never win the max."""
        source = self.features(frames=4)
        padded = AMFeatures(torch.cat([source.values, torch.full((1, 3, 8), 100.0)], dim=1), source.lengths)
        with torch.no_grad():
            assert torch.allclose(am.intent_logits(source), am.intent_logits(padded))

    def test_gradients_match_finite_differences(self, am_config, grad_check):
        """Intent cross-entropy gradients agree with central differences."""
        torch.manual_seed(3)
        model = AcousticModel(am_config).double()
        hidden = states([10, 7], dtype=torch.float64, seed=5)
        labels = torch.tensor([1, 3])
        params = [model.intent_head.weight, model.rnn.weight_hh_l0, model.convs[0].weight]
        def loss():
            return torch.nn.functional.cross_entropy(model.intent_logits(model(hidden)), labels)

        grad_check(loss, params)
