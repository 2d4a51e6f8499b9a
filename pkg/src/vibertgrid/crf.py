"""BiLSTM emissions and a linear-chain CRF.

For a document with emissions ``E`` (N x K) and transitions ``T`` (K x K),
``score(y) = sum_i E[i, y_i] + sum_{i<N} T[y_i, y_{i+1}]``. Optional ``start`` and
``end`` vectors add boundary terms; they are off unless a caller passes them.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


def _check_labels(y: torch.Tensor, N: int, K: int):
    if y.shape != (N,):
        raise ValueError(f"label sequence has shape {tuple(y.shape)}, expected ({N},)")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= K):
        raise ValueError(f"label id out of range [0, {K})")


def crf_score(E: torch.Tensor, T: torch.Tensor, y, start=None, end=None) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    N, K = E.shape
    _check_labels(y, N, K)
    s = E[torch.arange(N), y].sum()
    if N > 1:
        s = s + T[y[:-1], y[1:]].sum()
    if start is not None:
        s = s + start[y[0]]
    if end is not None:
        s = s + end[y[-1]]
    return s


def crf_log_partition(E: torch.Tensor, T: torch.Tensor, start=None, end=None) -> torch.Tensor:
    """Forward algorithm in log space."""
    N, K = E.shape
    if N == 0:
        raise ValueError("empty sequence")
    alpha = E[0] if start is None else E[0] + start
    for i in range(1, N):
        alpha = torch.logsumexp(alpha[:, None] + T, dim=0) + E[i]
    if end is not None:
        alpha = alpha + end
    return torch.logsumexp(alpha, dim=0)


def crf_nll(E: torch.Tensor, T: torch.Tensor, y, start=None, end=None) -> torch.Tensor:
    """-log P(y | D); differentiable in E, T (and boundary vectors)."""
    log_z = crf_log_partition(E, T, start, end)
    nll = log_z - crf_score(E, T, y, start, end)
    # log Z >= score up to round-off, i.e. P(y|D) <= 1
    tol = 64 * torch.finfo(E.dtype).eps * max(1.0, abs(float(log_z.detach())))
    assert float(nll.detach()) >= -tol, "CRF probability exceeds 1"
    return nll


@torch.no_grad()
def viterbi_decode(E: torch.Tensor, T: torch.Tensor, start=None, end=None):
    """Best label sequence and its score.

    Ties go to the lowest label id, both when choosing the final label and
    at every backpointer. The returned score is ``crf_score`` of the path.
    """
    N, K = E.shape
    if N == 0:
        raise ValueError("empty sequence")
    E64, T64 = E.detach().double(), T.detach().double()
    delta = E64[0] if start is None else E64[0] + start.detach().double()
    back = []
    for i in range(1, N):
        cand = delta[:, None] + T64  # prev x next
        # torch.argmax returns the first maximal index, i.e. the lowest label id
        idx = cand.argmax(dim=0)
        back.append(idx)
        delta = cand.gather(0, idx[None])[0] + E64[i]
    if end is not None:
        delta = delta + end.detach().double()
    last = int(delta.argmax())
    path = [last]
    for idx in reversed(back):
        path.append(int(idx[path[-1]]))
    path.reverse()
    score = crf_score(E.detach(), T.detach(), path,
                      None if start is None else start.detach(),
                      None if end is None else end.detach())
    return path, float(score)


@dataclass
class CRFConfig:
    hidden: int = 512
    boundary_transitions: bool = False


class BiLSTMCRF(nn.Module):
    def __init__(self, in_dim: int, num_tags: int, cfg: CRFConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(in_dim, cfg.hidden, batch_first=True, bidirectional=True)
        self.emit = nn.Linear(2 * cfg.hidden, num_tags)
        self.transitions = nn.Parameter(torch.zeros(num_tags, num_tags))
        if cfg.boundary_transitions:
            self.start = nn.Parameter(torch.zeros(num_tags))
            self.end = nn.Parameter(torch.zeros(num_tags))
        else:
            self.start = self.end = None

    def emissions(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` (N, in_dim) in reading order -> (N, num_tags)."""
        if x.shape[0] == 0:
            raise ValueError("BiLSTM needs at least one word")
        h, _ = self.lstm(x[None])
        return self.emit(h[0])

    def nll(self, E: torch.Tensor, y) -> torch.Tensor:
        return crf_nll(E, self.transitions, y, self.start, self.end)

    def decode(self, E: torch.Tensor):
        return viterbi_decode(E, self.transitions, self.start, self.end)
