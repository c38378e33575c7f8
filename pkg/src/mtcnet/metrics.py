"""Answer accuracy (overall / per-type average) and corpus CIDEr."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .tensor import ParameterError


@dataclass(frozen=True)
class PredRecord:
    scene_id: int
    qtype: str
    condition: str
    question: str
    reference: str
    predicted: str


@dataclass
class MetricsReport:
    oa: float
    aa: float
    per_qtype: dict[str, float]
    per_condition: dict[str, float]
    n: int
    correct: int
    cider: float | None = None
    cider_skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"oa": self.oa, "aa": self.aa, "per_qtype": dict(self.per_qtype),
                "per_condition": dict(self.per_condition), "n": self.n, "correct": self.correct,
                "cider": self.cider, "cider_skipped": self.cider_skipped}


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def accuracy(preds) -> MetricsReport:
    preds = list(preds)
    if not preds:
        raise ParameterError("accuracy of an empty prediction set")
    by_type, by_cond = defaultdict(list), defaultdict(list)
    correct = 0
    for p in preds:
        ok = normalize_answer(p.predicted) == normalize_answer(p.reference)
        correct += ok
        by_type[p.qtype].append(ok)
        by_cond[p.condition].append(ok)
    per_type = {k: 100.0 * sum(v) / len(v) for k, v in sorted(by_type.items())}
    per_cond = {k: 100.0 * sum(v) / len(v) for k, v in sorted(by_cond.items())}
    return MetricsReport(100.0 * correct / len(preds), sum(per_type.values()) / len(per_type),
                         per_type, per_cond, len(preds), correct)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider_scores(candidates: list[str], references: list[str], n_max: int = 4) -> tuple[list[float], int]:
    """Per-record CIDEr against a single reference each.

    For each order n the candidate and reference become TF-IDF vectors
    (count x log(N / max(1, df)), df counted over references) compared by
    cosine; the record score is 10 x the mean over orders the reference
    actually contains. Zero-norm vectors score 1 only when the two n-gram
    multisets are identical, else 0. Empty references are skipped.
    """
    pairs = [(normalize_answer(c).split(), normalize_answer(r).split())
             for c, r in zip(candidates, references)]
    skipped = sum(1 for _, r in pairs if not r)
    pairs = [(c, r) for c, r in pairs if r]
    N = len(pairs)
    df = [Counter() for _ in range(n_max)]
    for _, r in pairs:
        for n in range(1, n_max + 1):
            df[n - 1].update(_ngrams(r, n).keys())
    scores = []
    for c, r in pairs:
        sims = []
        for n in range(1, n_max + 1):
            rg = _ngrams(r, n)
            if not rg:
                continue
            cg = _ngrams(c, n)
            idf = lambda g: math.log(N / max(1.0, df[n - 1][g]))  # noqa: E731
            vc = {g: k * idf(g) for g, k in cg.items()}
            vr = {g: k * idf(g) for g, k in rg.items()}
            nc = math.sqrt(sum(v * v for v in vc.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nc > 0 and nr > 0:
                sims.append(sum(v * vr.get(g, 0.0) for g, v in vc.items()) / (nc * nr))
            else:
                sims.append(1.0 if cg == rg else 0.0)
        scores.append(10.0 * sum(sims) / len(sims))
    return scores, skipped


def cider(preds, n_max: int = 4) -> float:
    preds = list(preds)
    if len(preds) < 2:
        raise ParameterError("CIDEr needs at least two records to estimate document frequencies")
    scores, _ = cider_scores([p.predicted for p in preds], [p.reference for p in preds], n_max)
    return sum(scores) / len(scores) if scores else 0.0


def evaluate(preds, n_max: int = 4) -> MetricsReport:
    preds = list(preds)
    rep = accuracy(preds)
    if len(preds) >= 2:
        scores, skipped = cider_scores([p.predicted for p in preds], [p.reference for p in preds], n_max)
        rep.cider = sum(scores) / len(scores) if scores else 0.0
        rep.cider_skipped = skipped
    return rep
