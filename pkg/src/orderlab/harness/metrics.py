"""Ranking metrics under the sampled-negative leave-one-out protocol."""
from __future__ import annotations

import math

import numpy as np

from ..corpus import Corpus, LooSplit, sample_negatives
from ..errors import InvalidArgument
from ..numkit import SeededRng
from ..params import ParamVector
from ..seqrec import SeqRecModel


def rank_of_positive(pos_score: float, neg_scores: np.ndarray) -> int:
    """1-based rank with ties broken against the positive (pessimistic)."""
    return 1 + int((neg_scores > pos_score).sum()) + int((neg_scores == pos_score).sum())


def hit_rate(ranks: np.ndarray, k: int) -> float:
    return float((ranks <= k).mean())


def ndcg(ranks: np.ndarray, k: int) -> float:
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def evaluate_topk(
    model: SeqRecModel,
    params: ParamVector,
    corpus: Corpus,
    split: LooSplit,
    mode: str = "test",
    negatives: int = 100,
    ks=(10, 20),
    rng: SeededRng | None = None,
    batch_users: int = 64,
) -> dict:
    """HR@k / NDCG@k of the positive item among itself plus seeded negatives.

    mode "valid" scores the validation target given the train prefix;
    mode "test" scores the test target given prefix + validation item.
    Negatives are drawn per user from items outside the user's full
    sequence, deterministically from a per-user child of `rng`.
    """
    if mode not in ("valid", "test"):
        raise InvalidArgument("mode must be 'valid' or 'test'")
    if rng is None:
        raise InvalidArgument("evaluate_topk needs a SeededRng")
    table = params.view("item_embeddings")
    ranks = np.empty(len(split.users), dtype=np.int64)
    # length-sorted batches bound the padding waste; ranks scatter back per user
    order = sorted(range(len(split.users)), key=lambda i: len(split.prefixes[i]))
    for start in range(0, len(order), batch_users):
        part = order[start : start + batch_users]
        inputs = []
        for i in part:
            prefix = split.prefixes[i]
            if mode == "test":
                prefix = np.append(prefix, split.valid_targets[i])
            inputs.append(prefix)
        finals = model.final_states(params, inputs)
        for j, i in enumerate(part):
            user = split.users[i]
            target = int(split.test_targets[i] if mode == "test" else split.valid_targets[i])
            user_rng = rng.child(f"neg-{mode}-{corpus.user_ids[user]}")
            negs = sample_negatives(corpus, user, negatives, user_rng)
            scores = table[np.concatenate([[target], negs])] @ finals[j]
            ranks[i] = rank_of_positive(float(scores[0]), scores[1:])
    report = {"users_evaluated": int(ranks.size), "negatives": int(negatives)}
    for k in ks:
        report[f"HR@{k}"] = hit_rate(ranks, k)
        report[f"NDCG@{k}"] = ndcg(ranks, k)
    return report


def round_up_to_cadence(epoch: int, cadence: int) -> int:
    return int(math.ceil(epoch / cadence) * cadence)


def convergence_report(traces: dict[str, list[float]], cadence: int = 5, rel_tol: float = 1e-3,
                       patience: int = 3) -> dict:
    """Epochs-to-converge per stage, rounded up to the evaluation cadence.

    Never-converged traces report their full length, flagged."""
    from ..params import convergence_epoch

    out = {}
    for name, trace in traces.items():
        epoch = convergence_epoch(trace, rel_tol, patience)
        if epoch is None:
            out[name] = {
                "epochs": len(trace),
                "reported": round_up_to_cadence(max(len(trace), 1), cadence),
                "converged": False,
            }
        else:
            out[name] = {
                "epochs": epoch,
                "reported": round_up_to_cadence(epoch, cadence),
                "converged": True,
            }
    return out
