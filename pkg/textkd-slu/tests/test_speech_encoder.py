"""Tests for the speech encoder and its shared transformer backbone."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from kdslu.exceptions import LengthError, MaskError, NoMaskedPositionsError, VocabError
from kdslu.speech_encoder import HiddenSequence, SpeechEncoder
from kdslu.tokenizer_vq import TokenSequence, special_ids
from kdslu.transformer import IdBatch, pad_sequences


def codes(values, num_codes: int = 8) -> TokenSequence:
    return TokenSequence(np.array(values), num_codes=num_codes)


@pytest.fixture
def encoder(speech_config) -> SpeechEncoder:
    torch.manual_seed(0)
    return SpeechEncoder(speech_config).eval()


class TestPadSequences:
    """Tests for pad_sequences()."""

    def test_right_pads(self):
        """Shorter rows are padded on the right and flagged."""
        batch = pad_sequences([torch.tensor([1, 2, 3]), torch.tensor([4])], pad_id=9)
        assert batch.ids.tolist() == [[1, 2, 3], [4, 9, 9]]
        assert batch.padding_mask.tolist() == [[False, False, False], [False, True, True]]


class TestForward:
    """Tests for SpeechEncoder.forward()."""

    def test_shapes(self, encoder):
        """CLS is (B, D); states exclude CLS."""
        hidden = encoder(encoder.collate([codes([0, 1, 2]), codes([3])]))
        assert isinstance(hidden, HiddenSequence)
        assert hidden.cls.shape == (2, 8)
        assert hidden.states.shape == (2, 3, 8)
        assert hidden.lengths.tolist() == [3, 1]

    def test_single_sequence(self, encoder):
        """A TokenSequence is encoded as a batch of one."""
        assert encoder.cls_representation(codes([0, 1])).shape == (8,)

    def test_leading_cls_is_stripped(self, encoder):
        """A sequence that already carries CLS encodes like one without."""
        cls = special_ids(8).cls
        with torch.no_grad():
            a = encoder.cls_representation(codes([cls, 4, 5]))
            b = encoder.cls_representation(codes([4, 5]))
        assert torch.allclose(a, b)

    def test_padding_does_not_leak(self, encoder):
        """A sequence's CLS is the same alone or padded in a batch."""
        short = codes([1, 2])
        with torch.no_grad():
            alone = encoder.cls_representation(short)
            batched = encoder.cls_representation(encoder.collate([short, codes([3, 4, 5, 6, 7])]))
        assert torch.allclose(alone, batched[0], atol=1e-5)

    def test_token_order_matters(self, encoder):
        """Permuting the tokens changes the encoding."""
        with torch.no_grad():
            forward = encoder(codes([0, 1, 2, 3, 4]))
            backward = encoder(codes([4, 3, 2, 1, 0]))
        assert not torch.allclose(forward.cls, backward.cls, atol=1e-4)
        assert not torch.allclose(forward.states, backward.states.flip(1), atol=1e-4)

    def test_too_long(self, encoder):
        """max_length counts CLS, so max_length tokens is one too many."""
        with pytest.raises(LengthError):
            encoder(codes([0] * encoder.config.max_length))
        encoder(codes([0] * (encoder.config.max_length - 1)))

    def test_codebook_size_mismatch(self, encoder):
        """Sequences from a different codebook are rejected."""
        with pytest.raises(VocabError):
            encoder.collate([codes([0, 1], num_codes=16)])

    def test_out_of_vocab_batch(self, encoder):
        """Raw batches are range-checked."""
        ids = torch.tensor([[0, 99]])
        with pytest.raises(VocabError):
            encoder(IdBatch(ids, torch.zeros_like(ids, dtype=torch.bool)))


class TestParameterCount:
    """Tests for the closed-form parameter count."""

    def test_matches_module(self, speech_config, encoder):
        """expected_parameter_count equals the module's parameter total."""
        total = sum(p.numel() for p in encoder.parameters())
        assert SpeechEncoder.expected_parameter_count(speech_config) == total


class TestMlmLoss:
    """Tests for SpeechEncoder.mlm_loss()."""

    def test_positive_finite(self, encoder):
        """The loss is a positive finite scalar."""
        loss = encoder.mlm_loss(codes([0, 1, 2, 3]), np.array([False, True, False, True]))
        assert loss.dim() == 0
        assert torch.isfinite(loss)
        assert loss.item() > 0

    def test_no_masked_positions(self, encoder):
        """An all-false mask is rejected."""
        with pytest.raises(NoMaskedPositionsError):
            encoder.mlm_loss(codes([0, 1]), np.zeros(2, dtype=bool))

    def test_mask_shape_mismatch(self, encoder):
        """Mask length must match the sequence."""
        with pytest.raises(MaskError):
            encoder.mlm_loss(codes([0, 1, 2]), np.array([True, False]))

    def test_mask_over_padding(self, encoder):
        """Masking a padded position is an error."""
        batch = encoder.collate([codes([0, 1, 2]), codes([3])])
        mask = torch.tensor([[True, False, False], [False, False, True]])
        with pytest.raises(MaskError):
            encoder.mlm_loss(batch, mask)

    def test_cls_cannot_be_masked(self, encoder):
        """With a leading CLS, masking position 0 is an error."""
        cls = special_ids(8).cls
        with pytest.raises(MaskError):
            encoder.mlm_loss(codes([cls, 1, 2]), np.array([True, False, True]))

    def test_gradients_match_finite_differences(self, speech_config, grad_check):
        """Backprop gradients of the MLM loss agree with central differences."""
        torch.manual_seed(1)
        encoder = SpeechEncoder(speech_config).double().eval()
        batch = encoder.collate([codes([0, 1, 2, 3, 4]), codes([5, 6, 7])])
        mask = torch.tensor([[False, True, False, True, False], [True, False, False, False, False]])
        params = [encoder.mlm_head.weight, encoder.backbone.token_embedding.weight]
        grad_check(lambda: encoder.mlm_loss(batch, mask), params)

    def test_uniform_head_gives_log_codebook_size(self, speech_config):
        """A head with constant logits costs ln k per masked position."""
        encoder = SpeechEncoder(dataclasses.replace(speech_config, num_codes=64)).eval()
        with torch.no_grad():
            encoder.mlm_head.weight.zero_()
            encoder.mlm_head.bias.zero_()
        tokens = codes([3, 17, 40, 63, 0, 22], num_codes=64)
        loss = encoder.mlm_loss(tokens, np.array([True, False, True, True, False, True]))
        assert loss.item() == pytest.approx(math.log(64), rel=1e-6)

    def test_rng_seed_fixes_dropout(self, speech_config):
        """In training mode the seed alone decides the dropout draws."""
        torch.manual_seed(0)
        encoder = SpeechEncoder(dataclasses.replace(speech_config, dropout=0.5)).train()
        tokens = codes([0, 1, 2, 3, 4, 5])
        mask = np.array([False, True, False, True, True, False])
        with torch.no_grad():
            a = encoder.mlm_loss(tokens, mask, rng_seed=11)
            torch.rand(5)
            b = encoder.mlm_loss(tokens, mask, rng_seed=11)
            c = encoder.mlm_loss(tokens, mask, rng_seed=12)
        assert a.item() == b.item()
        assert a.item() != c.item()

    def test_rng_seed_leaves_global_state(self, encoder):
        """Seeding the loss does not advance the global generator."""
        torch.manual_seed(5)
        expected = torch.rand(3)
        torch.manual_seed(5)
        encoder.mlm_loss(codes([0, 1, 2]), np.array([True, False, True]), rng_seed=99)
        assert torch.equal(torch.rand(3), expected)
