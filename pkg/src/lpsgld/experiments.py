"""Experiment drivers behind the command line.

Every driver returns a :class:`RunOutcome` whose rows are written as CSV with a
fixed, versioned header. Rows are sorted before writing so output bytes depend
only on the configuration. All cells of a sweep that share a replicate index
share random streams: a low-precision chain and its full-precision counterpart
see the same minibatches and Langevin noise, and every cell can be recomputed
on its own (see :func:`config_for_row`).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .data import Dataset, load_mnist_idx, subsample, synth_classify
from .models import GaussianTarget, LogisticRegressionModel, MlpModel
from .quant import (
    NO_QUANT,
    BlockFloatFormat,
    FixedPointFormat,
    FloatFormat,
    QuantizationDomainError,
    QuantizerSpec,
    VcStats,
    cat_sample,
    quantize_stoch,
    vc_quantize,
    vc_quantize_bf,
)
from .rng import RngStream, stable_hash
from .samplers import ChainConfig, ChainDivergence, run_chain

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HEADER = ("schema_version", "experiment", "method", "format", "alpha", "seed", "metric", "value", "wall_seconds")
HIST_HEADER = ("schema_version", "method", "format", "alpha", "bin_left", "bin_right", "count")
FULL_PRECISION = "float64"


@dataclass(frozen=True, order=True)
class ResultRow:
    experiment: str
    method: str
    format: str
    alpha: float
    seed: int
    metric: str
    value: float
    wall_seconds: float | None = field(default=None, compare=False)

    def cells(self) -> list[str]:
        wall = "" if self.wall_seconds is None else f"{self.wall_seconds:.3f}"
        return [
            str(SCHEMA_VERSION), self.experiment, self.method, self.format,
            repr(float(self.alpha)), str(self.seed), self.metric, repr(float(self.value)), wall,
        ]


@dataclass
class RunOutcome:
    rows: list[ResultRow] = field(default_factory=list)
    aborted: list[str] = field(default_factory=list)
    histogram: list[tuple] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.aborted

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for row in sorted(self.rows):
            writer.writerow(row.cells())
        return buf.getvalue()

    def histogram_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HIST_HEADER)
        for method, fmt, alpha, left, right, count in sorted(self.histogram):
            writer.writerow([SCHEMA_VERSION, method, fmt, repr(alpha), repr(left), repr(right), count])
        return buf.getvalue()


def histogram_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_hist.csv")


def write_outcome(outcome: RunOutcome, out: str | Path) -> list[Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(outcome.csv_text())
    written = [out]
    if outcome.histogram:
        hist = histogram_path(out)
        hist.write_text(outcome.histogram_text())
        written.append(hist)
    return written


def read_rows(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for cells in reader:
            _, exp, method, fmt, alpha, seed, metric, value, wall = cells
            rows.append(ResultRow(exp, method, fmt, float(alpha), int(seed), metric, float(value),
                                  float(wall) if wall else None))
    return rows


# ------------------------------------------------------------------ methods

@dataclass(frozen=True)
class MethodSpec:
    accumulator: str
    langevin: bool
    low_precision: bool
    weight_mode: str | None = None  # overrides the configured Q_W mode


METHOD_SPECS = {
    "sgldfp": MethodSpec("full", True, False),
    "sgdfp": MethodSpec("full", False, False),
    "sgldlp_f": MethodSpec("full", True, True),
    "sgdlp_f": MethodSpec("full", False, True),
    "sgldlp_l": MethodSpec("low_naive", True, True),
    "vc_sgldlp_l": MethodSpec("low_vc", True, True),
    "sgdlp_l": MethodSpec("low_naive", False, True),
    "sgldlp_l_det": MethodSpec("low_naive", True, True, weight_mode="deterministic"),
}


def number_format(config: ExperimentConfig, bits: int | None = None):
    """The configured format; ``bits`` is the swept fractional (fixed) or word (block/float) width."""
    if config.format == "fixed":
        if bits is None:
            return FixedPointFormat(config.word_bits, config.frac_bits)
        return FixedPointFormat(config.int_bits + bits, bits)
    word = config.word_bits if bits is None else bits
    if config.format == "block":
        return BlockFloatFormat(word, config.exp_bits, config.block_len)
    return FloatFormat(word, config.exp_bits)


def quantizers(spec: MethodSpec, config: ExperimentConfig, fmt):
    """``(Q_W, Q_G, Q_A, Q_E)`` for one method; full-precision methods get identities."""
    if not spec.low_precision:
        return NO_QUANT, NO_QUANT, NO_QUANT, NO_QUANT

    def make(mode):
        return NO_QUANT if mode == "none" else QuantizerSpec(fmt, mode)

    weight_mode = spec.weight_mode or config.quant_w
    return make(weight_mode), make(config.quant_g), make(config.quant_a), make(config.quant_e)


def format_label(spec: MethodSpec, fmt) -> str:
    return fmt.describe() if spec.low_precision else FULL_PRECISION


# ------------------------------------------------------------ gaussian demo

def run_gaussian_demo(config: ExperimentConfig) -> RunOutcome:
    """Sample a standard Gaussian with each method and stepsize; pool replicates.

    Each coordinate of the ``gaussian_dim``-dimensional isotropic target runs
    an independent chain with the same marginal, so moments are pooled over
    coordinates, recorded samples and replicates.
    """
    outcome = RunOutcome()
    fmt = number_format(config)
    model = GaussianTarget.standard(config.gaussian_dim)
    edges = _histogram_edges(fmt, config.hist_range)
    for method in config.method_list:
        spec = METHOD_SPECS[method]
        wq, gq, _, _ = quantizers(spec, config, fmt)
        label = format_label(spec, fmt)
        for alpha in config.stepsizes:
            start = time.perf_counter()
            runs, vc = [], VcStats()
            try:
                for replicate in range(config.replicates):
                    chain = ChainConfig(
                        stepsize=alpha, steps=config.steps, burn_in=config.burn_in, thin=config.thin,
                        accumulator=spec.accumulator, weight_quant=wq, grad_quant=gq,
                        langevin=spec.langevin, schedule=config.schedule, cycles=config.cycles,
                        stream=RngStream(config.seed, replicate),
                    )
                    result = run_chain(chain, model)
                    runs.append(result.samples)
                    _merge_vc(vc, result.diagnostics.get("vc"))
            except ChainDivergence as exc:
                outcome.aborted.append(f"{method} alpha={alpha}: {exc}")
                outcome.rows.append(ResultRow("gaussian-demo", method, label, alpha, config.seed, "aborted", 1.0))
                continue
            wall = time.perf_counter() - start if config.timing else None
            pooled = np.concatenate([r.ravel() for r in runs])
            mean, std = metrics.pooled_moments(pooled)
            values = {"mean": mean, "std": std, "w2": metrics.w2_gaussian(mean, std, 0.0, 1.0)}
            if spec.accumulator == "low_vc" and wq.active:
                values["vc_fallback_fraction"] = vc.fallback_fraction
            for metric, value in values.items():
                outcome.rows.append(ResultRow("gaussian-demo", method, label, alpha, config.seed, metric, value, wall))
            counts, _ = np.histogram(pooled, bins=edges)
            for left, right, count in zip(edges[:-1], edges[1:], counts):
                outcome.histogram.append((method, label, float(alpha), float(left), float(right), int(count)))
    return outcome


def _merge_vc(total: VcStats, part: VcStats | None) -> None:
    if part is not None:
        total.calls += part.calls
        total.elements += part.elements
        total.noise_elements += part.noise_elements
        total.fallbacks += part.fallbacks
        total.excess += part.excess


def _histogram_edges(fmt, half_range: float) -> np.ndarray:
    """Bins centred on grid points for fixed point, 0.05 wide otherwise."""
    width = fmt.gap if isinstance(fmt, FixedPointFormat) else 0.05
    n = int(math.ceil(half_range / width))
    return (np.arange(-n, n + 2) - 0.5) * width


# ---------------------------------------------------------- classification

MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_mnist(data_dir: str) -> dict[str, Path] | None:
    if not data_dir:
        return None
    root = Path(data_dir)
    found = {}
    for key, names in MNIST_FILES.items():
        candidates = [root / (n + ext) for n in names for ext in ("", ".gz")]
        hit = next((c for c in candidates if c.is_file()), None)
        if hit is None:
            return None
        found[key] = hit
    return found


def load_classification_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """MNIST from ``data_dir`` when all four IDX files exist, else the synthetic set."""
    files = _find_mnist(config.data_dir)
    if files is not None:
        train = load_mnist_idx(files["train_images"], files["train_labels"])
        test = load_mnist_idx(files["test_images"], files["test_labels"])
        train = subsample(train, config.train_size or None, config.seed, stream_id=1)
        test = subsample(test, config.test_size or None, config.seed, stream_id=2)
        return train, test
    if config.data_dir:
        logger.warning("MNIST files not found in %s; using synthetic data", config.data_dir)
    n_train, n_test = config.synth_train, config.synth_test
    full = synth_classify(
        n_train + n_test, config.synth_dim, config.synth_classes, config.synth_separation,
        config.seed, stream_id=stable_hash("synth-classify"), scale=config.synth_scale,
    )
    return full.take(slice(0, n_train)), full.take(slice(n_train, None))


def sampling_schedule(steps: int, samples: int) -> tuple[int, int]:
    """``(burn_in, thin)`` spreading ``samples`` evenly over the final half of ``steps``."""
    thin = max((steps // 2) // samples, 1)
    n = min(samples, steps)
    return steps - n * thin, thin


def _classifier(kind: str, train: Dataset, config: ExperimentConfig, qa, qe):
    if kind == "logreg":
        return LogisticRegressionModel(train.features, train.labels, train.n_classes, config.prior_variance)
    return MlpModel(
        train.features, train.labels, train.n_classes, hidden=(config.hidden,),
        prior_variance=config.prior_variance, act_quant=qa, err_quant=qe,
    )


def evaluate_cell(kind: str, method: str, config: ExperimentConfig, train: Dataset, test: Dataset, bits: int | None):
    """Train one (method, bits) cell; returns ``(format label, metric dict, run)``."""
    spec = METHOD_SPECS[method]
    fmt = number_format(config, bits)
    wq, gq, qa, qe = quantizers(spec, config, fmt)
    model = _classifier(kind, train, config, qa, qe)
    steps = config.epochs * -(-len(train) // config.batch_size)
    burn_in, thin = sampling_schedule(steps, config.samples)
    chain = ChainConfig(
        stepsize=config.lr / len(train), steps=steps, burn_in=burn_in, thin=thin,
        accumulator=spec.accumulator, weight_quant=wq, grad_quant=gq, langevin=spec.langevin,
        schedule=config.schedule, cycles=config.cycles, batch_size=config.batch_size,
        stream=RngStream(config.seed, 0),
    )
    run = run_chain(chain, model)
    if spec.langevin:
        probs = metrics.bma_predict(run, model, test.features)
    else:
        probs = model.predict_proba(run.final_state.theta, test.features)
    # clamped probabilities are reported as a metric rather than a warning
    p_true = probs[np.arange(len(test)), test.labels]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.ProbabilityClampWarning)
        test_nll = metrics.nll(probs, test.labels)
    values = {
        "test_nll": test_nll,
        "test_nll_clamped": float(np.sum(p_true < metrics.LOG_CLAMP)),
        "test_error": metrics.error_rate(probs, test.labels),
        "test_ece": metrics.ece(probs, test.labels).ece,
    }
    return format_label(spec, fmt), values, run


def _run_classification(kind: str, config: ExperimentConfig) -> RunOutcome:
    outcome = RunOutcome()
    train, test = load_classification_data(config)
    for method in config.method_list:
        spec = METHOD_SPECS[method]
        bit_list = config.sweep_bits if spec.low_precision else [None]
        for bits in bit_list:
            start = time.perf_counter()
            label = format_label(spec, number_format(config, bits))
            try:
                label, values, _ = evaluate_cell(kind, method, config, train, test, bits)
            except ChainDivergence as exc:
                outcome.aborted.append(f"{method} {label}: {exc}")
                outcome.rows.append(ResultRow(kind, method, label, config.lr, config.seed, "aborted", 1.0))
                continue
            wall = time.perf_counter() - start if config.timing else None
            for metric, value in values.items():
                outcome.rows.append(ResultRow(kind, method, label, config.lr, config.seed, metric, value, wall))
    return outcome


def run_logreg(config: ExperimentConfig) -> RunOutcome:
    return _run_classification("logreg", config)


def run_mlp(config: ExperimentConfig) -> RunOutcome:
    return _run_classification("mlp", config)


# -------------------------------------------------------------- quant check

QS_BIAS_TOL = 4e-4
MEAN_TOL = 1e-3
CAT_VAR_TOL = 0.01
VC_VAR_TOL = 0.02
CAT_CASES = ((0.0, 0.25), (0.5, 0.25), (0.25, 0.125))  # (mu/gap, v/gap**2)
VC_VARIANCES = (0.01, 0.002)
VC_GRID = 32


def vc_mu_grid(gap: float, n: int = VC_GRID) -> np.ndarray:
    """``n`` means spread over two grid cells, on and off grid points."""
    return -gap + 2.0 * gap * np.arange(n) / n + 0.3


def vc_moment_errors(mu_values, v: float, draws: int, rng, *, block: bool = False):
    """Per-mu ``(mean error, relative variance error, fallback fraction)`` of Q^vc.

    With ``block=True`` each mu shares a block with an anchor of 1.5, which pins
    the block exponent so the gap stays 0.125 (word_bits=5) under the noise.
    """
    results = []
    for mu in mu_values:
        stats = VcStats()
        if block:
            fmt = BlockFloatFormat(word_bits=5, exp_bits=8, block_len=2)
            x = np.empty(2 * draws)
            x[0::2], x[1::2] = 1.5, mu
            out = vc_quantize_bf(x, v, fmt, rng, stats=stats)[1::2]
            fallback = stats.fallbacks / draws
        else:
            out = vc_quantize(np.full(draws, mu), v, FixedPointFormat(8, 3), rng, stats=stats)
            fallback = stats.fallback_fraction
        results.append((abs(out.mean() - mu), abs(out.var() / v - 1.0), fallback))
    return results


def run_quant_check(config: ExperimentConfig) -> RunOutcome:
    """Monte-Carlo self-test of the quantizers, one pass/fail row per check."""
    outcome = RunOutcome()
    n = config.check_draws
    stream = RngStream(config.seed, stable_hash("quant-check"))

    def emit(check, fmt_label, stats: dict, passed: bool):
        for metric, value in stats.items():
            outcome.rows.append(ResultRow("quant-check", check, fmt_label, 0.0, config.seed, metric, float(value)))
        outcome.rows.append(ResultRow("quant-check", check, fmt_label, 0.0, config.seed, "pass", float(passed)))

    fmt = FixedPointFormat(8, 2)
    draws = quantize_stoch(np.full(n, 0.3), fmt, stream.child("qs").generator())
    bias = abs(draws.mean() - 0.3)
    emit("qs_unbiased", fmt.describe(), {"abs_bias": bias}, bias < QS_BIAS_TOL)

    gap = 0.125
    rng = stream.child("cat").generator()
    for i, (mu_f, v_f) in enumerate(CAT_CASES):
        mu, v = mu_f * gap, v_f * gap * gap
        try:
            out = cat_sample(np.full(n, mu), v, gap, rng)
            mean_err, var_err = abs(out.mean() - mu), abs(out.var() / v - 1.0)
            emit(f"cat_moments_{i}", "gap=0.125", {"mean_error": mean_err, "var_rel_error": var_err},
                 mean_err < MEAN_TOL and var_err < CAT_VAR_TOL)
        except QuantizationDomainError as exc:
            logger.warning("three-point case mu=%g v=%g infeasible: %s", mu, v, exc)
            emit(f"cat_moments_{i}", "gap=0.125", {"infeasible": 1.0}, False)

    for block in (False, True):
        label = "block(W=5;E=8;B=2)" if block else FixedPointFormat(8, 3).describe()
        rng = stream.child(f"vc-{block}").generator()
        for v in VC_VARIANCES:
            errs = vc_moment_errors(vc_mu_grid(gap), v, n, rng, block=block)
            kept = [e for e in errs if e[2] == 0.0]
            mean_err = max(e[0] for e in kept)
            var_err = max(e[1] for e in kept)
            name = f"vc_{'block' if block else 'fixed'}_v{v:g}"
            emit(name, label, {"max_mean_error": mean_err, "max_var_rel_error": var_err,
                               "fallback_cells": len(errs) - len(kept)},
                 mean_err < MEAN_TOL and var_err < VC_VAR_TOL)

    x = stream.child("identity").generator().standard_normal(1000)
    identity_ok = NO_QUANT(x) is x
    emit("identity_control", FULL_PRECISION, {"max_abs_change": 0.0 if identity_ok else 1.0}, identity_ok)

    det_vs_stoch = config.replace(methods=["sgldlp_l", "sgldlp_l_det"])
    train, test = load_classification_data(det_vs_stoch)
    bits = config.check_frac_bits
    nlls = {}
    for method in ("sgldlp_l", "sgldlp_l_det"):
        try:
            label, values, _ = evaluate_cell("logreg", method, det_vs_stoch, train, test, bits)
            nlls[method] = values["test_nll"]
        except ChainDivergence as exc:
            outcome.aborted.append(f"quant-check {method}: {exc}")
            nlls[method] = math.inf
    emit("det_vs_stoch_rounding", number_format(config, bits).describe(),
         {"nll_stochastic": nlls["sgldlp_l"], "nll_deterministic": nlls["sgldlp_l_det"]},
         nlls["sgldlp_l_det"] > nlls["sgldlp_l"])
    return outcome


RUNNERS = {
    "gaussian-demo": run_gaussian_demo,
    "logreg": run_logreg,
    "mlp": run_mlp,
    "quant-check": run_quant_check,
}


def run_experiment(config: ExperimentConfig) -> RunOutcome:
    return RUNNERS[config.experiment](config)


# ------------------------------------------------------------- provenance

_FORMAT_RE = re.compile(r"^(fixed|block|float)\((.*)\)$")


def parse_format_label(label: str) -> dict:
    """Inverse of ``describe()``: ``"fixed(W=8;F=3)"`` -> ``{"format": "fixed", "W": 8, "F": 3}``."""
    match = _FORMAT_RE.match(label)
    if not match:
        raise ValueError(f"not a number-format label: {label!r}")
    fields = dict(part.split("=") for part in match.group(2).split(";"))
    return {"format": match.group(1), **{k: int(v) for k, v in fields.items()}}


def config_for_row(base: ExperimentConfig, row: ResultRow) -> ExperimentConfig:
    """A configuration that recomputes exactly the cell ``row`` came from."""
    changes = {"experiment": row.experiment, "seed": row.seed}
    if row.experiment == "quant-check":
        return base.replace(**changes)
    changes["methods"] = [row.method]
    if row.experiment == "gaussian-demo":
        changes["stepsizes"] = [row.alpha]
    else:
        changes["lr"] = row.alpha
    if row.format != FULL_PRECISION:
        fmt = parse_format_label(row.format)
        changes["format"] = fmt["format"]
        if fmt["format"] == "fixed":
            if row.experiment == "gaussian-demo":
                changes.update(word_bits=fmt["W"], frac_bits=fmt["F"])
            else:
                changes.update(int_bits=fmt["W"] - fmt["F"], sweep_bits=[fmt["F"]])
        else:
            changes["exp_bits"] = fmt["E"]
            if "B" in fmt:
                changes["block_len"] = fmt["B"]
            if row.experiment == "gaussian-demo":
                changes["word_bits"] = fmt["W"]
            else:
                changes["sweep_bits"] = [fmt["W"]]
    return base.replace(**changes)
