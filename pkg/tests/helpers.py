import numpy as np

from lmsfair.features import Dataset


def synthetic_dataset(n_students=120, per_student=5, n_noise=2, signal=2.0, seed=0, student_effect=0.0):
    """Feature 0 carries the signal, the rest are noise."""
    rng = np.random.default_rng(seed)
    n = n_students * per_student
    student = np.repeat(np.arange(n_students), per_student)
    x0 = rng.normal(size=n) + student_effect * rng.normal(size=n_students)[student]
    X = np.column_stack([x0] + [rng.normal(size=n) for _ in range(n_noise)])
    grade = 1 / (1 + np.exp(-(signal * x0 + rng.normal(size=n))))
    y = (grade < grade.mean()).astype(np.int64)
    names = ("signal",) + tuple(f"noise{i}" for i in range(n_noise))
    return Dataset(X, y, grade, student, np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64), names)


ACCEPTANCE_LINES: list[str] = []


def criterion(number, description, ok, detail=""):
    """Record and print one acceptance line, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {description}"
    if detail:
        line += f" [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
