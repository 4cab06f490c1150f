"""Reproducible toy setups: model, calibration windows and held-out text from one seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import synthetic_text
from .model import ModelBundle, ModelConfig, toy_model
from .pipeline import CalibrationSet
from .quant import QuantConfig

TOY_QUANT = QuantConfig(bits=2, group_size=32)
FIT_WINDOWS = 64
FIT_ITERS = 60


@dataclass
class ToySetup:
    model: ModelBundle
    calib: CalibrationSet
    heldout: list[np.ndarray]

    @property
    def heldout_stream(self) -> np.ndarray:
        return np.concatenate(self.heldout)


def toy_setup(seed: int, n_calib: int = 64, n_heldout: int = 32,
              cfg: ModelConfig | None = None) -> ToySetup:
    """Disjoint fit / calibration / held-out windows of one synthetic corpus.

    The corpus and the model share ``seed``. The head is fitted on the first
    ``FIT_WINDOWS`` windows, calibration uses the next ``n_calib`` and the
    held-out set the ``n_heldout`` after that.
    """
    cfg = cfg or ModelConfig()
    L = cfg.max_seq
    total = FIT_WINDOWS + n_calib + n_heldout
    text = synthetic_text(L * total, seed)
    m = toy_model(seed, text, cfg, n_fit=FIT_WINDOWS, max_iter=FIT_ITERS)
    ids = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    windows = [ids[i * L:(i + 1) * L] for i in range(total)]
    calib = CalibrationSet(windows[FIT_WINDOWS:FIT_WINDOWS + n_calib])
    return ToySetup(m, calib, windows[FIT_WINDOWS + n_calib:])
