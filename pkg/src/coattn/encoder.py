"""Deep residual coattention encoder.

Layout note: tensors are batched as (B, positions, features), i.e. each
example's matrix is the transpose of the usual (features x positions) column
layout.  Sentinels occupy the last position, after any padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BiLstm, Linear, Module
from .tensor import Tensor


@dataclass
class InitialEncodings:
    E1_D: Tensor  # (B, m+1, h)
    E1_Q: Tensor  # (B, n+1, h)


@dataclass
class CoattentionOutput:
    S_D: Tensor  # (B, m+1, w)
    S_Q: Tensor  # (B, n+1, w)
    C_D: Tensor  # (B, m, w)
    doc_attention: np.ndarray  # (B, m+1, n+1), each row a distribution over question positions
    q_attention: np.ndarray  # (B, m+1, n+1), each column a distribution over document positions


@dataclass
class FusedEncoding:
    U: Tensor  # (B, m, 2h)
    layer1: CoattentionOutput
    layer2: CoattentionOutput
    initial: InitialEncodings
    E2_D: Tensor  # (B, m, 2h), before the sentinel is appended


def with_sentinel_mask(mask: np.ndarray) -> np.ndarray:
    return np.concatenate([mask, np.ones((mask.shape[0], 1))], axis=1)


def append_sentinel(x: Tensor, sentinel: Tensor) -> Tensor:
    B, _, w = x.shape
    return T.concat([x, T.broadcast_to(T.reshape(sentinel, (1, 1, w)), (B, 1, w))], axis=1)


def affinity(E_Q: Tensor, E_D: Tensor) -> Tensor:
    """``A[b, i, j]`` = inner product of document position i with question position j."""
    if E_Q.shape[-1] != E_D.shape[-1]:
        raise T.DimensionError(f"affinity width mismatch: question {E_Q.shape}, document {E_D.shape}")
    return E_D @ T.swapaxes(E_Q, -1, -2)


def coattend(E_D: Tensor, E_Q: Tensor, doc_mask: np.ndarray, q_mask: np.ndarray) -> CoattentionOutput:
    """One coattention layer over sentinel-extended encodings.

    ``doc_mask``/``q_mask`` cover the real tokens only (B, m) and (B, n); the
    sentinel column is always attendable.
    """
    B, m1, _ = E_D.shape
    n1 = E_Q.shape[1]
    if doc_mask.shape != (B, m1 - 1) or q_mask.shape != (B, n1 - 1):
        raise ValueError(
            f"coattend expects sentinel-extended inputs: E_D {E_D.shape} vs mask {doc_mask.shape}, "
            f"E_Q {E_Q.shape} vs mask {q_mask.shape}"
        )
    dm = with_sentinel_mask(doc_mask)
    qm = with_sentinel_mask(q_mask)
    A = affinity(E_Q, E_D)
    over_q = T.softmax(A, axis=2, mask=qm[:, None, :])
    over_d = T.softmax(A, axis=1, mask=dm[:, :, None])
    S_D = over_q @ E_Q
    S_Q = T.swapaxes(over_d, 1, 2) @ E_D
    C_full = over_q @ S_Q
    keep = dm[:, :, None]
    return CoattentionOutput(
        S_D=S_D * keep,
        S_Q=S_Q * qm[:, :, None],
        C_D=C_full[:, : m1 - 1] * doc_mask[:, :, None],
        doc_attention=over_q.data,
        q_attention=over_d.data,
    )


class CoattentionEncoder(Module):
    def __init__(self, rng, emb_dim: int, hidden: int, residual: bool = True):
        h = hidden
        self.hidden = h
        self.residual = residual
        self.lstm1 = BiLstm(rng, emb_dim, h)
        self.lstm1_proj = Linear(rng, 2 * h, h)
        self.q_transform = Linear(rng, h, h)
        self.sentinel_d1 = T.parameter(rng.uniform(-1, 1, h) / np.sqrt(h))
        self.sentinel_q1 = T.parameter(rng.uniform(-1, 1, h) / np.sqrt(h))
        self.lstm2 = BiLstm(rng, h, h)
        self.sentinel_d2 = T.parameter(rng.uniform(-1, 1, 2 * h) / np.sqrt(2 * h))
        self.sentinel_q2 = T.parameter(rng.uniform(-1, 1, 2 * h) / np.sqrt(2 * h))
        fused = 9 * h if residual else 2 * h
        self.lstm_out = BiLstm(rng, fused, h)

    def encode_initial(self, L_D: Tensor, L_Q: Tensor, doc_mask, q_mask) -> InitialEncodings:
        if L_D.shape[1] < 1 or L_Q.shape[1] < 1:
            raise ValueError("document and question must each contain at least one token")
        d_len = doc_mask.sum(axis=1).astype(np.int64)
        q_len = q_mask.sum(axis=1).astype(np.int64)
        enc_d = self.lstm1_proj(self.lstm1(L_D, d_len, doc_mask)) * doc_mask[:, :, None]
        enc_q = self.lstm1_proj(self.lstm1(L_Q, q_len, q_mask))
        enc_q = T.tanh(self.q_transform(enc_q)) * q_mask[:, :, None]
        return InitialEncodings(append_sentinel(enc_d, self.sentinel_d1), append_sentinel(enc_q, self.sentinel_q1))

    def __call__(self, L_D: Tensor, L_Q: Tensor, doc_mask: np.ndarray, q_mask: np.ndarray) -> FusedEncoding:
        m, n = L_D.shape[1], L_Q.shape[1]
        d_len = doc_mask.sum(axis=1).astype(np.int64)
        q_len = q_mask.sum(axis=1).astype(np.int64)
        init = self.encode_initial(L_D, L_Q, doc_mask, q_mask)
        c1 = coattend(init.E1_D, init.E1_Q, doc_mask, q_mask)
        E2_D = self.lstm2(c1.S_D[:, :m], d_len, doc_mask)
        E2_Q = self.lstm2(c1.S_Q[:, :n], q_len, q_mask)
        c2 = coattend(append_sentinel(E2_D, self.sentinel_d2), append_sentinel(E2_Q, self.sentinel_q2), doc_mask, q_mask)
        if self.residual:
            fused = T.concat(
                [init.E1_D[:, :m], E2_D, c1.S_D[:, :m], c2.S_D[:, :m], c1.C_D, c2.C_D], axis=-1
            )
        else:
            fused = c2.C_D
        U = self.lstm_out(fused, d_len, doc_mask)
        return FusedEncoding(U=U, layer1=c1, layer2=c2, initial=init, E2_D=E2_D)
