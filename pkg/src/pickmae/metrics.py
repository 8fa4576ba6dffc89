"""ROC AUC (Mann-Whitney with midranks) and confusion matrices."""

import dataclasses

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half.

    Equals the Mann-Whitney statistic (wins + 0.5 * ties) / (n_pos * n_neg),
    computed via one sort with midranks for ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclasses.dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tpr(self) -> float:
        return self.tp / max(1, self.tp + self.fn)

    @property
    def fnr(self) -> float:
        return self.fn / max(1, self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self.fp / max(1, self.fp + self.tn)

    @property
    def tnr(self) -> float:
        return self.tn / max(1, self.fp + self.tn)


def confusion(probs, labels, threshold: float = 0.5) -> Confusion:
    """Counts at a probability threshold; predicted positive iff p >= threshold."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.size == 0:
        raise ValueError("confusion: empty input")
    pred = p >= threshold
    return Confusion(
        tp=int((pred & (y == 1)).sum()),
        fp=int((pred & (y == 0)).sum()),
        tn=int((~pred & (y == 0)).sum()),
        fn=int((~pred & (y == 1)).sum()),
    )


@dataclasses.dataclass
class MetricsReport:
    run_id: str
    split: str
    auc: float
    conf: Confusion
    n_pos: int
    n_neg: int
    seed: int
    config_hash: str

    def to_lines(self) -> list[str]:
        return [
            f"run_id={self.run_id}",
            f"split={self.split}",
            f"auc={self.auc!r}",
            f"tp={self.conf.tp} fp={self.conf.fp} tn={self.conf.tn} fn={self.conf.fn}",
            f"n_pos={self.n_pos} n_neg={self.n_neg}",
            f"seed={self.seed}",
            f"config_hash={self.config_hash}",
        ]

    def serialize(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def report_from_scores(run_id: str, split: str, probs, labels, seed: int,
                       config_hash: str, threshold: float = 0.5) -> MetricsReport:
    y = np.asarray(labels)
    return MetricsReport(
        run_id=run_id,
        split=split,
        auc=roc_auc(probs, labels),
        conf=confusion(probs, labels, threshold),
        n_pos=int((y == 1).sum()),
        n_neg=int((y == 0).sum()),
        seed=seed,
        config_hash=config_hash,
    )
