"""Client interface for an external answer-quality judge.

Request ``{"question": ..., "answer": ...}``, response with three integer
scores in 1..5. Only a stub ships; the harness scores with token F1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

SCORE_FIELDS = ("answer_correctness_score", "clarity_readability_score", "text_quality_score")


class JudgeError(ValueError):
    pass


@dataclass(frozen=True)
class JudgeScores:
    answer_correctness_score: int
    clarity_readability_score: int
    text_quality_score: int

    def __post_init__(self):
        for name in SCORE_FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 1 <= v <= 5:
                raise JudgeError(f"{name} must be an integer in 1..5, got {v!r}")


def build_request(question: str, answer: str) -> str:
    return json.dumps({"question": question, "answer": answer}, sort_keys=True)


def parse_response(text: str) -> JudgeScores:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as err:
        raise JudgeError(f"judge reply is not JSON: {err}") from err
    missing = [f for f in SCORE_FIELDS if f not in body]
    if missing:
        raise JudgeError(f"judge reply lacks {missing}")
    return JudgeScores(**{f: body[f] for f in SCORE_FIELDS})


class JudgeClient:
    def score(self, question: str, answer: str) -> JudgeScores:
        raise NotImplementedError


class StubJudge(JudgeClient):
    """Offline stand-in: every answer gets the middle score."""

    def score(self, question: str, answer: str) -> JudgeScores:
        build_request(question, answer)
        return parse_response(json.dumps(asdict(JudgeScores(3, 3, 3))))
