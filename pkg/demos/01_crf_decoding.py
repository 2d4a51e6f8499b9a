"""
Linear-chain CRF: scores, partition function and Viterbi
=========================================================

A CRF over N words and K tags scores a tag sequence by summing per-word
emissions and tag-to-tag transitions. This walk-through checks the forward
algorithm and Viterbi against plain enumeration on a small instance.
"""
import itertools
import math

import torch

from vibertgrid.crf import crf_log_partition, crf_nll, crf_score, viterbi_decode

torch.manual_seed(0)
N, K = 4, 3
E = torch.randn(N, K, dtype=torch.float64)   # emissions, one row per word
T = torch.randn(K, K, dtype=torch.float64)   # T[i, j]: score of tag i followed by tag j

# every one of the K**N sequences, scored directly
scores = {y: float(crf_score(E, T, list(y))) for y in itertools.product(range(K), repeat=N)}
print(f"{len(scores)} sequences")

# log Z from the forward recursion equals log-sum-exp over the enumeration
logz = float(crf_log_partition(E, T))
brute = math.log(sum(math.exp(s) for s in scores.values()))
print(f"log Z forward = {logz:.12f}   enumeration = {brute:.12f}")

# the Viterbi path is the best-scoring sequence
path, best = viterbi_decode(E, T)
print("viterbi", path, f"{best:.6f}", " enumeration", list(max(scores, key=scores.get)),
      f"{max(scores.values()):.6f}")

# the NLL gradient w.r.t. emissions is (marginals - one-hot); rows sum to zero
Ed = E.clone().requires_grad_()
crf_nll(Ed, T, path).backward()
print("row sums of dNLL/dE:", Ed.grad.sum(1).numpy().round(12))
