"""Scalar metrics read from one row of the logits (default: the final position).

The prob ratio is the plain P(correct)/P(incorrect) of the softmax over the
full vocabulary; reports sometimes call it "normalized", there is no extra
normalization here.
"""
import numpy as np

from app.errors import UsageError
from app.models import AnswerPair, LogitRecord
from app.services.tensor_core import Tensor, log_softmax
from app.services.tokenizer import BPETokenizer


def answer_pair(tokenizer: BPETokenizer, correct: str, incorrect: str) -> AnswerPair:
    """Answer words are encoded with a leading space, as mid-sentence continuations."""
    correct_id = tokenizer.single_token_id(correct)
    incorrect_id = tokenizer.single_token_id(incorrect)
    if correct_id == incorrect_id:
        raise UsageError(f"answers '{correct}' and '{incorrect}' encode to the same token {correct_id}")
    return AnswerPair(correct_id=correct_id, incorrect_id=incorrect_id, labels=(correct, incorrect))


def logit_diff(logits: Tensor, pair: AnswerPair, position: int = -1) -> float:
    row = logits[position]
    return float(row[pair.correct_id]) - float(row[pair.incorrect_id])


def answer_probs(logits: Tensor, pair: AnswerPair, position: int = -1) -> tuple[float, float]:
    logp = log_softmax(logits[position])
    return float(np.exp(logp[pair.correct_id])), float(np.exp(logp[pair.incorrect_id]))


def prob_ratio(logits: Tensor, pair: AnswerPair, position: int = -1) -> float:
    # ratio of log-probabilities, so tokens deep in the tail do not underflow
    logp = log_softmax(logits[position])
    return float(np.exp(logp[pair.correct_id] - logp[pair.incorrect_id]))


def token_rank(logits: Tensor, token_id: int, position: int = -1) -> int:
    """1-based rank under descending logits; ties go to the lower id first."""
    row = logits[position]
    value = row[token_id]
    higher = int(np.count_nonzero(row > value))
    tied_before = int(np.count_nonzero(row[:token_id] == value))
    return higher + tied_before + 1


def logit_record(prompt: str, logits: Tensor, pair: AnswerPair, n_tokens: int,
                 prepend_bos: bool, position: int = -1) -> LogitRecord:
    row = logits[position]
    p_yes, p_no = answer_probs(logits, pair, position)
    return LogitRecord(
        prompt=prompt,
        n_tokens=n_tokens,
        prepend_bos=prepend_bos,
        logit_yes=float(row[pair.correct_id]),
        logit_no=float(row[pair.incorrect_id]),
        p_yes=p_yes,
        p_no=p_no,
        rank_yes=token_rank(logits, pair.correct_id, position),
        rank_no=token_rank(logits, pair.incorrect_id, position),
        logit_diff=logit_diff(logits, pair, position),
        prob_ratio=prob_ratio(logits, pair, position),
    )
