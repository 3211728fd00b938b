"""Shared BERT-style encoder stack used by the speech and text encoders."""

from typing import NamedTuple

import torch
import torch.nn as nn


class IdBatch(NamedTuple):
    """Right-padded id batch."""

    ids: torch.Tensor  # (B, T) long
    padding_mask: torch.Tensor  # (B, T) bool, True where padded


def pad_sequences(sequences: list[torch.Tensor], pad_id: int) -> IdBatch:
    """Right-pad 1D id tensors into a batch."""
    length = max(int(s.shape[0]) for s in sequences)
    ids = torch.full((len(sequences), length), pad_id, dtype=torch.long)
    padding = torch.ones((len(sequences), length), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, : seq.shape[0]] = seq
        padding[row, : seq.shape[0]] = False
    return IdBatch(ids, padding)


class EncoderBackbone(nn.Module):
    """Token + learned absolute position embeddings followed by a transformer stack.

    The caller prepends the CLS id; position 0 of the output is the CLS state.
    """

    def __init__(
        self,
        vocab_size: int,
        hidden_dim: int,
        num_layers: int,
        num_heads: int,
        ffn_dim: int,
        max_length: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.max_length = max_length
        self.token_embedding = nn.Embedding(vocab_size, hidden_dim)
        self.position_embedding = nn.Embedding(max_length, hidden_dim)
        self.embedding_norm = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=hidden_dim,
            nhead=num_heads,
            dim_feedforward=ffn_dim,
            dropout=dropout,
            activation="gelu",
            batch_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, num_layers=num_layers, enable_nested_tensor=False)

    @staticmethod
    def parameter_count(vocab_size: int, hidden_dim: int, num_layers: int, ffn_dim: int, max_length: int) -> int:
        """Closed-form number of trainable parameters."""
        embeddings = vocab_size * hidden_dim + max_length * hidden_dim + 2 * hidden_dim
        # attention in/out projections, two feed-forward layers, two layer norms
        per_layer = (
            4 * hidden_dim * hidden_dim + 4 * hidden_dim
            + 2 * hidden_dim * ffn_dim + ffn_dim + hidden_dim
            + 4 * hidden_dim
        )
        return embeddings + num_layers * per_layer

    def forward(self, ids: torch.Tensor, padding_mask: torch.Tensor) -> torch.Tensor:
        """Encode (B, T) ids into (B, T, D) states."""
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None, :, :]
        x = self.dropout(self.embedding_norm(x))
        return self.layers(x, src_key_padding_mask=padding_mask)
