from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TargetScaler:
    """Zero-mean/unit-variance map between mmHg and network output units."""
    mean_sbp: float
    std_sbp: float
    mean_dbp: float
    std_dbp: float

    @classmethod
    def fit(cls, sbp, dbp):
        sbp = np.asarray(sbp, dtype=np.float64)
        dbp = np.asarray(dbp, dtype=np.float64)
        if sbp.size == 0:
            raise ValueError("cannot fit a scaler on zero windows")
        return cls(float(sbp.mean()), _safe_std(sbp), float(dbp.mean()), _safe_std(dbp))

    @classmethod
    def fit_windows(cls, windows):
        return cls.fit([w.sbp for w in windows], [w.dbp for w in windows])

    @property
    def mean(self):
        return np.array([self.mean_sbp, self.mean_dbp])

    @property
    def std(self):
        return np.array([self.std_sbp, self.std_dbp])

    def normalize(self, bp):
        return (np.asarray(bp, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean_sbp": self.mean_sbp, "std_sbp": self.std_sbp,
                "mean_dbp": self.mean_dbp, "std_dbp": self.std_dbp}


def _safe_std(x):
    # constant targets: unit scale keeps the map invertible
    s = float(x.std())
    return s if s > 0 else 1.0
