"""Regenerate the golden fixtures. Run from the repository root only when a
numerical change is intended; the outputs are committed and compared by tests."""

import json
import os
import sys

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(HERE))

from conftest import SMALL  # noqa: E402
from test_model import GOLDEN_TEXT  # noqa: E402

from d2quant import formats  # noqa: E402
from d2quant.evaluate import perplexity  # noqa: E402
from d2quant.model import init_random, model_forward  # noqa: E402
from d2quant.pipeline import diagnose_snr  # noqa: E402
from d2quant.quant import QuantConfig  # noqa: E402


def main():
    m = init_random(SMALL, 2024)
    np.save(os.path.join(HERE, "golden_logits.npy"),
            model_forward(m, np.frombuffer(GOLDEN_TEXT[:SMALL.max_seq], np.uint8)))
    text = open(os.path.join(HERE, "calib.txt"), "rb").read()
    res = perplexity(m, np.frombuffer(text, np.uint8))
    with open(os.path.join(HERE, "golden_eval.json"), "w") as fh:
        json.dump({"perplexity": res.perplexity, "mean_nll": res.mean_nll,
                   "token_count": res.token_count}, fh, indent=2)
        fh.write("\n")
    calib = formats.load_calibration(os.path.join(HERE, "calib.txt"), 8, 32)
    sites = diagnose_snr(m, calib, QuantConfig(2, 16))
    doc = formats.snr_report(sites, SMALL, {"bits": 2, "group_size": 16, "identity": False,
                                            "calib_samples": 8, "calib_seq_len": 32}, 0)
    formats.write_report(doc, os.path.join(HERE, "golden_snr_report.json"))


if __name__ == "__main__":
    main()
