"""Block-wise weight-only quantization with mean-shift correction and dual-scale down-projections.

Blocks are processed in order. For each block the calibration inputs are the
outputs of the already-quantized previous blocks:

1. capture the post-attention-norm output with full-precision attention;
2. quantize W_q, W_k, W_v, W_o and capture the same site again;
3. add the mean deviation to the post-attention-norm bias (if enabled);
4. quantize W_up, W_gate, and W_down (dual-scale, static-smoothed or plain);
   a dual-scale column scale is folded into the quantized W_up;
5. forward the calibration inputs through the finished block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dac
from .dsq import (
    DEFAULT_ITERS,
    apply_updown_scaling,
    dsq_quantize,
    fold_scale,
    static_smooth_eta,
)
from .evaluate import perplexity
from .model import (
    ATTN_SLOTS,
    ModelBundle,
    attn_residual,
    block_forward,
    check_tokens,
    embed,
    post_attn_norm,
)
from .numerics import rmsnorm
from .parallel import map_ordered
from .quant import (
    QuantConfig,
    dequantize,
    identity_quantize,
    quantize,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    quant: QuantConfig = field(default_factory=QuantConfig)
    dsq_iters: int = DEFAULT_ITERS
    dsq_enabled: bool = True
    dac_enabled: bool = True
    static_smooth_enabled: bool = False
    calib_samples: int = 128
    calib_seq_len: int = 128
    # no-op quantizer: every slot becomes a passthrough, DSQ/smoothing are skipped
    identity: bool = False
    # leave the dual-scale column scale explicit instead of folding it
    keep_explicit_scales: bool = False

    def __post_init__(self):
        if self.dsq_enabled and self.static_smooth_enabled:
            raise ValueError("dsq and static smoothing are mutually exclusive")
        if self.calib_samples < 1:
            raise ValueError("calib_samples must be >= 1")
        if self.calib_seq_len < 2:
            raise ValueError("calib_seq_len must be >= 2")
        if self.dsq_iters < 0:
            raise ValueError("dsq_iters must be >= 0")

    def to_dict(self) -> dict:
        return {
            "bits": self.quant.bits,
            "group_size": self.quant.group_size,
            "dsq_iters": self.dsq_iters,
            "dsq_enabled": self.dsq_enabled,
            "dac_enabled": self.dac_enabled,
            "static_smooth_enabled": self.static_smooth_enabled,
            "calib_samples": self.calib_samples,
            "calib_seq_len": self.calib_seq_len,
            "identity": self.identity,
        }


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("calibration set is empty")
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        for s in self.sequences:
            if s.ndim != 1 or len(s) == 0 or s.min() < 0 or s.max() > 255:
                raise ValueError("calibration sequences must be non-empty byte-id vectors")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, n: int) -> "CalibrationSet":
        return CalibrationSet(self.sequences[:n])


@dataclass
class BlockReport:
    index: int
    deviation: dac.DeviationStats | None = None
    bias: np.ndarray | None = None
    realized_reduction: np.ndarray | None = None
    errors: dict[str, float] = field(default_factory=dict)   # relative Frobenius error per slot
    down_sq_error: float = 0.0                               # squared, original basis
    dsq_trace: list[float] = field(default_factory=list)
    col_scale: np.ndarray | None = None


@dataclass
class PipelineReport:
    config: PipelineConfig
    blocks: list[BlockReport]

    def mean_realized_reduction(self) -> float:
        return float(np.mean([b.realized_reduction.mean() for b in self.blocks]))

    def mean_reconstruction_error(self) -> float:
        vals = [v for b in self.blocks for v in b.errors.values()]
        return float(np.mean(vals)) if vals else 0.0

    def mean_down_error(self) -> float:
        return float(np.mean([b.errors["w_down"] for b in self.blocks]))


def stats_reduction(stats: dac.DeviationStats, bias: np.ndarray | None) -> np.ndarray:
    """Reduction achieved by ``bias`` on the data ``stats`` summarise.

    MSE after the shift is ``sigma2 + (mu - bias)^2`` exactly, so no second
    pass over the activations is needed.
    """
    before = stats.mse
    if bias is None:
        return np.zeros_like(before)
    after = stats.sigma2 + (stats.mu - bias) ** 2
    safe = np.where(before < dac.REDUCTION_FLOOR, 1.0, before)
    return np.where(before < dac.REDUCTION_FLOOR, 0.0, 1.0 - after / safe)


def check_divisibility(m: ModelBundle, cfg: PipelineConfig) -> None:
    if cfg.identity:
        return
    for dim in (m.config.d_model, m.config.d_ffn):
        cfg.quant.groups_for(dim)


def _rel_err(ref: np.ndarray, approx: np.ndarray) -> float:
    r = ref.astype(np.float64)
    d = r - approx.astype(np.float64)
    n = float(np.sum(r * r))
    return float(np.sqrt(np.sum(d * d) / n)) if n > 0 else 0.0


def _quantize_mlp(block, cfg: PipelineConfig, rep: BlockReport) -> None:
    w_up, w_gate, w_down = block.w_up, block.w_gate, block.w_down
    if cfg.identity:
        block.w_up, block.w_gate, block.w_down = (identity_quantize(w) for w in (w_up, w_gate, w_down))
        rep.errors.update(w_up=0.0, w_gate=0.0, w_down=0.0)
        return

    q_gate = quantize(w_gate, cfg.quant)
    rep.errors["w_gate"] = _rel_err(w_gate, dequantize(q_gate))
    if cfg.static_smooth_enabled:
        eta = static_smooth_eta(w_down)
        s_up, s_down = apply_updown_scaling(w_up, w_gate, w_down, eta)
        q_up, q_down = quantize(s_up, cfg.quant), quantize(s_down, cfg.quant)
        up_hat = dequantize(q_up).astype(np.float64) / eta.eta[:, None]
        down_hat = dequantize(q_down).astype(np.float64) * eta.eta[None, :]
        col_scale = None
    else:
        q_up = quantize(w_up, cfg.quant)
        up_hat = dequantize(q_up)
        if cfg.dsq_enabled:
            res = dsq_quantize(w_down, cfg.quant, cfg.dsq_iters)
            q_down, col_scale = res.q_down, res.col_scale
            down_hat = res.reconstruct()
            rep.dsq_trace = list(res.objective_trace)
            rep.col_scale = col_scale
        else:
            q_down = quantize(w_down, cfg.quant)
            down_hat = dequantize(q_down)
            col_scale = None
    rep.errors["w_up"] = _rel_err(w_up, up_hat)
    rep.errors["w_down"] = _rel_err(w_down, down_hat)
    d = w_down.astype(np.float64) - np.asarray(down_hat, dtype=np.float64)
    rep.down_sq_error = float(np.sum(d * d))

    if col_scale is not None and cfg.keep_explicit_scales:
        block.col_scale = col_scale
    elif col_scale is not None:
        q_up = fold_scale(q_up, col_scale)
    block.w_up, block.w_gate, block.w_down = q_up, q_gate, q_down


def run_d2quant(m: ModelBundle, calib: CalibrationSet,
                cfg: PipelineConfig) -> tuple[ModelBundle, PipelineReport]:
    """Quantize a copy of ``m``; the input bundle is never mutated."""
    check_divisibility(m, cfg)
    for seq in calib.sequences:
        check_tokens(seq, m.config)
    mcfg = m.config
    qm = m.copy()
    xs = [embed(qm, s) for s in calib.sequences]
    reports = []
    for idx, block in enumerate(qm.blocks):
        rep = BlockReport(index=idx)

        def post_ln(x, block=block):
            return post_attn_norm(block, attn_residual(block, x, mcfg), mcfg)

        targets = map_ordered(post_ln, xs)
        for name in ATTN_SLOTS:
            w = getattr(block, name)
            q = identity_quantize(w) if cfg.identity else quantize(w, cfg.quant)
            rep.errors[name] = _rel_err(w, q.dequantize())
            setattr(block, name, q)
        quantized = map_ordered(post_ln, xs)
        acc = dac.DeviationAccumulator(mcfg.d_model)
        for y_fp, y_q in zip(targets, quantized):
            acc.add(y_fp, y_q)
        stats = acc.stats()
        rep.deviation = stats
        if cfg.dac_enabled:
            block.post_attn_ln_bias = (block.post_attn_ln_bias.astype(np.float64)
                                       + stats.mu).astype(np.float32)
            rep.bias = stats.mu
        rep.realized_reduction = stats_reduction(stats, rep.bias)
        _quantize_mlp(block, cfg, rep)
        xs = map_ordered(lambda x, block=block: block_forward(block, x, mcfg)[0], xs)
        reports.append(rep)
        log.info("block %d done: down err %.4f", idx, rep.errors["w_down"])
    return qm, PipelineReport(config=cfg, blocks=reports)


def heldout_reduction(original: ModelBundle, quantized: ModelBundle,
                      sequences: list[np.ndarray]) -> list[np.ndarray]:
    """Per-block realized reduction of the calibrated bias on unseen sequences.

    The target at block ``l`` is the post-attention-norm output computed with the
    original attention weights on the quantized model's own block input, which
    is the same target the bias was calibrated against.
    """
    cfg = quantized.config
    xs = [embed(quantized, s) for s in sequences]
    out = []
    for ob, qb in zip(original.blocks, quantized.blocks):
        fp_attn = replace(qb, **{n: getattr(ob, n) for n in ATTN_SLOTS})
        fp_attn.post_attn_ln_bias = np.zeros_like(qb.post_attn_ln_bias)
        no_bias = replace(qb, post_attn_ln_bias=np.zeros_like(qb.post_attn_ln_bias))
        y_fp = np.concatenate([post_attn_norm(fp_attn, attn_residual(fp_attn, x, cfg), cfg) for x in xs])
        y_q = np.concatenate([post_attn_norm(no_bias, attn_residual(no_bias, x, cfg), cfg) for x in xs])
        out.append(dac.realized_reduction(y_fp, y_q, qb.post_attn_ln_bias.astype(np.float64)))
        xs = [block_forward(qb, x, cfg)[0] for x in xs]
    return out


# -- diagnostics ---------------------------------------------------------------

@dataclass
class SiteReport:
    index: int
    post_attn: dac.DeviationStats
    pre_norm: dac.DeviationStats


def diagnose_snr(m: ModelBundle, calib: CalibrationSet, quant: QuantConfig | None) -> list[SiteReport]:
    """Deviation statistics at two sites per block, on shadow copies of each block.

    ``post_attn``: post-attention-norm output with only this block's attention
    quantized. ``pre_norm``: the next normalization input site (next block's
    pre-norm, or the final norm for the last block) with only this block's MLP
    quantized. Block inputs come from the full-precision model.
    """
    cfg = m.config

    def q(w):
        return identity_quantize(w) if quant is None else quantize(w, quant)

    xs = [embed(m, s) for s in calib.sequences]
    out = []
    for idx, block in enumerate(m.blocks):
        attn_q = replace(block, **{n: q(getattr(block, n)) for n in ATTN_SLOTS})
        mlp_q = replace(block, w_up=q(block.w_up), w_gate=q(block.w_gate), w_down=q(block.w_down))
        if idx + 1 < len(m.blocks):
            gamma = m.blocks[idx + 1].pre_ln_gamma
        else:
            gamma = m.final_norm_gamma
        post_acc = dac.DeviationAccumulator(cfg.d_model)
        pre_acc = dac.DeviationAccumulator(cfg.d_model)
        nxt = []
        for x in xs:
            y_fp, cap = block_forward(block, x, cfg, capture=("post_attn_ln",))
            _, cap_q = block_forward(attn_q, x, cfg, capture=("post_attn_ln",))
            post_acc.add(cap["post_attn_ln"], cap_q["post_attn_ln"])
            y_mq, _ = block_forward(mlp_q, x, cfg)
            pre_acc.add(rmsnorm(y_fp, gamma, None, cfg.norm_eps), rmsnorm(y_mq, gamma, None, cfg.norm_eps))
            nxt.append(y_fp)
        xs = nxt
        out.append(SiteReport(idx, post_acc.stats(), pre_acc.stats()))
    return out


def mean_snr(sites: list[SiteReport]) -> tuple[float, float]:
    post = float(np.mean([s.post_attn.snr_diag.mean() for s in sites]))
    pre = float(np.mean([s.pre_norm.snr_diag.mean() for s in sites]))
    return post, pre


# -- ablation ------------------------------------------------------------------

COMPONENT_CELLS = (
    ("baseline", dict(dsq_enabled=False, dac_enabled=False)),
    ("+DSQ", dict(dsq_enabled=True, dac_enabled=False)),
    ("+DAC", dict(dsq_enabled=False, dac_enabled=True)),
    ("+DSQ+DAC", dict(dsq_enabled=True, dac_enabled=True)),
)
ITER_SWEEP = (0, 1, 3, 15)
CALIB_SWEEP = (16, 32, 64, 128)


@dataclass(frozen=True)
class AblationGrid:
    components: tuple = COMPONENT_CELLS
    static_smooth: bool = True
    dsq_iters: tuple[int, ...] = ITER_SWEEP
    calib_sizes: tuple[int, ...] = CALIB_SWEEP

    def cells(self, base: PipelineConfig) -> list[tuple[str, str, PipelineConfig, int]]:
        """(group, label, config, calibration sample count) for every row."""
        n = base.calib_samples
        rows = [("components", label, replace(base, **kw), n) for label, kw in self.components]
        if self.static_smooth:
            rows.append(("dsq_iters", "+StaticSmooth",
                         replace(base, dsq_enabled=False, static_smooth_enabled=True, dac_enabled=False), n))
        for it in self.dsq_iters:
            rows.append(("dsq_iters", f"+DSQ(iters={it})",
                         replace(base, dsq_enabled=True, dac_enabled=False, dsq_iters=it), n))
        for size in self.calib_sizes:
            rows.append(("calib_size", f"+DSQ+DAC(calib={size})",
                         replace(base, dsq_enabled=True, dac_enabled=True, calib_samples=size), size))
        return rows


def ablation_matrix(m: ModelBundle, calib: CalibrationSet, base: PipelineConfig,
                    heldout: list[np.ndarray], grid: AblationGrid = AblationGrid()) -> dict:
    """Run every grid cell on the same model and calibration pool.

    Each row carries held-out perplexity, mean relative reconstruction error
    over all quantized slots, the down-projection error, and the mean realized
    bias reduction on the held-out sequences.
    """
    stream = np.concatenate(heldout)
    seq_len = max(len(s) for s in heldout)
    fp = perplexity(m, stream, seq_len)
    rows = []
    for group, label, cfg, n in grid.cells(base):
        if n > len(calib):
            log.warning("cell %s wants %d calibration samples, only %d available", label, n, len(calib))
        qm, rep = run_d2quant(m, calib.subset(n), cfg)
        ev = perplexity(qm, stream, seq_len)
        red = heldout_reduction(m, qm, heldout) if cfg.dac_enabled else []
        rows.append({
            "group": group,
            "label": label,
            "calib_samples": min(n, len(calib)),
            "dsq_iters": cfg.dsq_iters if cfg.dsq_enabled else 0,
            "perplexity": ev.perplexity,
            "mean_nll": ev.mean_nll,
            "mean_reconstruction_error": rep.mean_reconstruction_error(),
            "mean_down_error": rep.mean_down_error(),
            "mean_realized_reduction": float(np.mean([r.mean() for r in red])) if red else 0.0,
        })
    return {"full_precision_perplexity": fp.perplexity, "config": base.to_dict(), "rows": rows}
