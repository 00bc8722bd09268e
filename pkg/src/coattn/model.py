"""The full question-answering model: embeddings, coattention encoder, dynamic decoder."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Batch
from .decoder import DecodeTrace, DynamicDecoder
from .encoder import CoattentionEncoder, FusedEncoding
from .nn import Module, uniform
from .tensor import Tensor

N_RESERVED = 2  # padding and unknown rows are frozen at zero


class QAModel(Module):
    def __init__(self, config: RunConfig, vocab_size: int, seed: Optional[int] = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        e, h = config.model.emb_dim, config.model.hidden
        d = config.decoder
        self.config = config
        self.vocab_size = vocab_size
        # a lookup is a linear map from a one-hot input, so fan_in is 1
        self.embeddings = T.parameter(uniform(rng, (max(vocab_size - N_RESERVED, 0), e), 1))
        self.encoder = CoattentionEncoder(rng, e, h, residual=config.model.residual_coattention)
        self.decoder = DynamicDecoder(
            rng, h, pool=d.maxout_pool, moe=d.moe_enabled, n_experts=d.moe_experts, top_k=d.moe_topk
        )
        # learned log-variances of the two task losses
        self.log_var_ce = T.parameter(np.zeros(()))
        self.log_var_rl = T.parameter(np.zeros(()))

    def embed(self, ids: np.ndarray) -> Tensor:
        zeros = Tensor(np.zeros((N_RESERVED, self.embeddings.shape[1])))
        return T.embedding(T.concat([zeros, self.embeddings], axis=0), ids)

    def encode(self, batch: Batch) -> FusedEncoding:
        return self.encoder(
            self.embed(batch.doc_token_ids), self.embed(batch.q_token_ids), batch.doc_mask, batch.q_mask
        )

    def decode(self, enc: FusedEncoding, batch: Batch, rng=None, t_max: Optional[int] = None) -> DecodeTrace:
        return self.decoder(
            enc.U,
            batch.doc_mask,
            t_max=self.config.decoder.t_max if t_max is None else t_max,
            rng=rng,
            early_stop=self.config.decoder.early_stop,
        )

    def predict_spans(self, batch: Batch):
        """Greedy final-step (start, end) per example, without recording gradients."""
        with T.no_grad():
            trace = self.decode(self.encode(batch), batch)
        return trace.final_positions()
