"""Continual-learning metrics and linear-probe evaluation."""
from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import DomainError


class AccuracyMatrix:
    """Lower-triangular observed-accuracy matrix.

    ``A[i][j]`` is the accuracy on task ``j``'s test data after training
    session ``i`` (0-based, ``j <= i``). Cells never filled stay ``None``.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise DomainError("an accuracy matrix needs at least one task")
        self.num_tasks = int(num_tasks)
        self._rows = [[None] * (i + 1) for i in range(self.num_tasks)]

    def set(self, i: int, j: int, value: float):
        if not 0 <= j <= i < self.num_tasks:
            raise DomainError(f"cell ({i}, {j}) is outside the lower triangle of a {self.num_tasks}-task matrix")
        value = float(value)
        if not (0.0 <= value <= 1.0):
            raise DomainError(f"accuracy {value} is outside [0, 1]")
        self._rows[i][j] = value

    def get(self, i: int, j: int):
        return self._rows[i][j]

    def row(self, i: int):
        return list(self._rows[i])

    @property
    def rows(self):
        return [list(r) for r in self._rows]

    def completed_rows(self):
        n = 0
        for r in self._rows:
            if any(v is None for v in r):
                break
            n += 1
        return n

    def to_triples(self):
        """Long form ``(session, task, accuracy)`` for every filled cell (0-based)."""
        return [(i, j, v) for i, r in enumerate(self._rows) for j, v in enumerate(r) if v is not None]

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for i, r in enumerate(rows):
            if len(r) > i + 1:
                raise DomainError(f"row {i} has {len(r)} entries; at most {i + 1} allowed")
            for j, v in enumerate(r):
                if v is not None:
                    m.set(i, j, v)
        return m

    @classmethod
    def from_triples(cls, triples, num_tasks=None):
        triples = list(triples)
        n = num_tasks or (max(i for i, _, _ in triples) + 1)
        m = cls(n)
        for i, j, v in triples:
            m.set(int(i), int(j), v)
        return m

    def truncated(self, upto: int):
        """Matrix of the first ``upto`` sessions."""
        return AccuracyMatrix.from_rows(self.rows[:upto])

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self.rows == other.rows

    def __repr__(self):
        return f"AccuracyMatrix({self.rows})"


def _as_matrix(A):
    return A if isinstance(A, AccuracyMatrix) else AccuracyMatrix.from_rows(A)


def _final_row(A):
    row = A.row(A.num_tasks - 1)
    if any(v is None for v in row):
        raise DomainError("final row of the accuracy matrix is incomplete")
    return row


def avg_observed_accuracy(A) -> float:
    """Mean of the final row: (1/T) sum_t A[T-1][t]."""
    row = _final_row(_as_matrix(A))
    return math.fsum(row) / len(row)


def forgetting(A) -> float:
    """Mean over earlier tasks of (best accuracy so far - final accuracy); never negative."""
    A = _as_matrix(A)
    T = A.num_tasks
    if T < 2:
        raise DomainError("forgetting needs at least two sessions")
    final = _final_row(A)
    drops = []
    for j in range(T - 1):
        past = [A.get(l, j) for l in range(j, T)]
        if any(v is None for v in past):
            raise DomainError(f"column {j} has missing entries")
        drops.append(max(past) - final[j])
    return math.fsum(drops) / len(drops)


def avg_cumulative_incremental_accuracy(phase_accuracies) -> float:
    accs = [float(a) for a in phase_accuracies]
    if not accs:
        raise DomainError("no phases given")
    return math.fsum(accs) / len(accs)


def amca(table) -> float:
    """Grand mean of per-(task, class) accuracies.

    ``table`` is a 2-D array-like (tasks x classes) or a mapping
    ``{task: {class: acc}}``; every cell must be present.
    """
    if isinstance(table, dict):
        tasks = list(table)
        if not tasks:
            raise DomainError("empty class-accuracy table")
        classes = sorted({c for t in tasks for c in table[t]})
        cells = []
        for t in tasks:
            for c in classes:
                if c not in table[t] or table[t][c] is None:
                    raise DomainError(f"missing accuracy for task {t}, class {c}")
                cells.append(float(table[t][c]))
    else:
        rows = [list(r) for r in table]
        if not rows or not rows[0]:
            raise DomainError("empty class-accuracy table")
        width = len(rows[0])
        cells = []
        for t, r in enumerate(rows):
            if len(r) != width or any(v is None for v in r):
                raise DomainError(f"missing cell in task row {t}")
            cells.extend(float(v) for v in r)
    return math.fsum(cells) / len(cells)


def current_old_decomposition(A, i: int):
    """(current-task accuracy, mean old-task accuracy or None) after session ``i``."""
    A = _as_matrix(A)
    row = A.row(i)
    old = row[:i]
    return row[i], (math.fsum(old) / len(old) if old else None)


def mean_stderr(values):
    """Mean and standard error (ddof=1) of a sequence; stderr is 0 for a single value."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise DomainError("no values")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def accuracy(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.size == 0:
        raise DomainError("prediction/target shape mismatch or empty")
    return float((pred == target).mean())


def per_class_accuracy(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    return {int(c): float((pred[target == c] == c).mean()) for c in np.unique(target)}


def linear_probe(train_feats, train_labels, test_feats, test_labels, l2: float = 1e-4,
                 tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Test accuracy of a multinomial logistic regression on frozen features.

    Full-batch L-BFGS with an L2 penalty ``l2`` on the weights (per-sample
    averaged objective), stopping at gradient tolerance ``tol``.
    """
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.linear_model import LogisticRegression

    Xtr = np.asarray(_numpy(train_feats), dtype=float)
    ytr = np.asarray(_numpy(train_labels))
    Xte = np.asarray(_numpy(test_feats), dtype=float)
    yte = np.asarray(_numpy(test_labels))
    if np.unique(ytr).size < 2:
        raise DomainError("linear probe needs at least two classes in its training data")
    # standardize with train statistics so the penalty acts evenly
    mu, sd = Xtr.mean(0), Xtr.std(0)
    sd[sd < 1e-12] = 1.0
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    # sklearn minimizes C * sum(loss) + 0.5 ||w||^2; match mean(loss) + 0.5 * l2 ||w||^2
    C = 1.0 / (l2 * len(ytr))
    clf = LogisticRegression(C=C, tol=tol, max_iter=max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(Xtr, ytr)
    return float((clf.predict(Xte) == yte).mean())


def _numpy(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return x
