"""Trial scoring and detection metrics: cosine similarity, EER, and minDCF.

Conventions, fixed for reproducibility: a trial is accepted when its score is
>= the threshold (ties accept); FRR(t) = P(target < t) and FAR(t) =
P(nontarget >= t); EER interpolates linearly between the two operating
points that bracket the crossing; minDCF sweeps all distinct scores plus
+/-inf sentinels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TARGET = "target"
NONTARGET = "nontarget"


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise ValueError("trial ids must be nonempty")
        if self.label not in (TARGET, NONTARGET):
            raise ValueError(f"trial label must be target|nontarget, got {self.label!r}")


@dataclass(frozen=True)
class DCFParams:
    p_target: float = 0.01
    cost_miss: float = 1.0
    cost_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must be in (0, 1)")
        if self.cost_miss <= 0 or self.cost_fa <= 0:
            raise ValueError("costs must be positive")


class ScoreSet:
    """Trials with attached scores, split into target / nontarget arrays."""

    def __init__(self, trials_scores):
        self.items: list[tuple[Trial, float]] = list(trials_scores)
        tar = [s for t, s in self.items if t.label == TARGET]
        non = [s for t, s in self.items if t.label == NONTARGET]
        self.target_scores = np.asarray(tar, dtype=np.float64)
        self.nontarget_scores = np.asarray(non, dtype=np.float64)

    def require_both_classes(self) -> None:
        if len(self.target_scores) < 1 or len(self.nontarget_scores) < 1:
            raise ValueError(
                f"metrics require both classes: {len(self.target_scores)} target, "
                f"{len(self.nontarget_scores)} nontarget trials")


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    e1 = np.asarray(e1, dtype=np.float64).reshape(-1)
    e2 = np.asarray(e2, dtype=np.float64).reshape(-1)
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine_score: zero-norm embedding")
    return float(np.dot(e1, e2) / (n1 * n2))


def _operating_points(tar: np.ndarray, non: np.ndarray):
    """FRR/FAR at every distinct score plus -inf/+inf sentinels."""
    thresholds = np.concatenate((
        [-np.inf], np.unique(np.concatenate([tar, non])), [np.inf]))
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    frr = np.searchsorted(tar_sorted, thresholds, side="left") / len(tar)
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / len(non)
    return thresholds, frr, far


def eer_from_arrays(tar: np.ndarray, non: np.ndarray) -> float:
    _, frr, far = _operating_points(tar, non)
    d = far - frr
    # d starts at +1 and ends at -1; find the first nonpositive point
    i = int(np.argmax(d <= 0))
    if d[i] == 0.0:
        return float(frr[i])
    lam = d[i - 1] / (d[i - 1] - d[i])
    return float(frr[i - 1] + lam * (frr[i] - frr[i - 1]))


def min_dcf_from_arrays(tar: np.ndarray, non: np.ndarray,
                        params: DCFParams = DCFParams()) -> float:
    _, frr, far = _operating_points(tar, non)
    dcf = params.cost_miss * params.p_target * frr + params.cost_fa * (1 - params.p_target) * far
    norm = min(params.cost_miss * params.p_target, params.cost_fa * (1 - params.p_target))
    return float(dcf.min() / norm)


def eer(scores: ScoreSet) -> float:
    scores.require_both_classes()
    return eer_from_arrays(scores.target_scores, scores.nontarget_scores)


def min_dcf(scores: ScoreSet, params: DCFParams = DCFParams()) -> float:
    scores.require_both_classes()
    return min_dcf_from_arrays(scores.target_scores, scores.nontarget_scores, params)


# ---- file formats -----------------------------------------------------------


def read_trials(path: str) -> list[Trial]:
    """Lines of ``enroll_id test_id target|nontarget`` (whitespace separated)."""
    trials = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            trials.append(Trial(parts[0], parts[1], parts[2]))
    return trials


def write_trials(path: str, trials) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.enroll_id}\t{t.test_id}\t{t.label}\n")


def read_scores(path: str) -> dict[tuple[str, str], float]:
    scores = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            scores[(parts[0], parts[1])] = float(parts[2])
    return scores


def write_scores(path: str, items) -> None:
    """items: iterable of (enroll_id, test_id, score)."""
    with open(path, "w", encoding="utf-8") as f:
        for enroll, test, score in items:
            f.write(f"{enroll}\t{test}\t{score:.8f}\n")


def score_set_from_files(trials_path: str, scores_path: str) -> ScoreSet:
    trials = read_trials(trials_path)
    scores = read_scores(scores_path)
    items = []
    for t in trials:
        key = (t.enroll_id, t.test_id)
        if key not in scores:
            raise ValueError(f"missing score for trial {t.enroll_id} {t.test_id}")
        items.append((t, scores[key]))
    return ScoreSet(items)


def metrics_report(scores: ScoreSet, params: DCFParams = DCFParams()) -> dict[str, str]:
    scores.require_both_classes()
    return {
        "eer_percent": f"{100.0 * eer(scores):.6f}",
        "min_dcf": f"{min_dcf(scores, params):.6f}",
        "num_target": str(len(scores.target_scores)),
        "num_nontarget": str(len(scores.nontarget_scores)),
    }


def write_metrics_report(path: str, report: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in report.items():
            f.write(f"{k}\t{v}\n")
