"""Expert label channel.

Active-learning queries carry the crop and the estimator's guess; an
expert answers with a phase label in [0, 1).  Two implementations:

* ``ScriptedOracle`` answers every pending query immediately with the
  hidden truth plus wrapped Gaussian noise.  Deterministic under its
  seed, which makes whole runs replayable.
* ``LiveChannel`` holds queries open until a label command arrives over
  the control API.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ExpertQuery", "ScriptedOracle", "LiveChannel", "UnknownQueryError"]


class UnknownQueryError(KeyError):
    """Label arrived for a query id that is not pending."""


@dataclass
class ExpertQuery:
    """One open label request.

    ``true_p`` is recorded at acquisition time for the scripted oracle
    and for post-run evaluation; it is never serialized toward a live
    expert.
    """

    query_id: int
    object_id: int
    t_s: float
    crop_pixels: np.ndarray
    est_p: float | None
    true_p: float
    sample_index: int


class ScriptedOracle:
    """Answers with truth + wrapped N(0, noise_std) noise, seeded."""

    def __init__(self, noise_std: float = 0.02, seed: int = 0):
        if noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.noise_std = noise_std
        self._rng = np.random.default_rng(seed)

    def answer(self, query: ExpertQuery) -> float:
        label = query.true_p
        if self.noise_std > 0:
            label += self._rng.normal(0.0, self.noise_std)
        return float(label % 1.0)

    def drain(self, pending):
        """Label every pending query; returns [(query_id, p), ...] in id order."""
        out = []
        for qid in sorted(pending):
            out.append((qid, self.answer(pending[qid])))
        return out


class LiveChannel:
    """Queries stay pending until labeled through the command interface."""

    def drain(self, pending):
        return []
