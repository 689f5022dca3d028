"""
Batch evaluation of selection and weighting methods over simulated scenes.

Word error rates need a recogniser, so reports use two proxies instead:
the distance of the output features to the clean reference and the mean
log-likelihood of the output features under the clean GMM.  By default the
fused output is re-normalized before the distance is taken, which makes the
distance blind to the overall scale of the weights; set ``renorm_output`` to
False to measure variance shrinkage as well.
"""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from chanfuse import scenegen
from chanfuse.autoencoder import read_autoencoder
from chanfuse.chansel import select_ae, select_ml, select_oracle
from chanfuse.chanweight import (
    JacobianConfig,
    WeightVector,
    apply_weights,
    estimate_weights_jacobian,
    estimate_weights_ml,
    softmax_constrain,
    weighted_stats,
)
from chanfuse.errors import ChanfuseError, DataError
from chanfuse.featkit import CMN_CVN, FeatureMatrix, normalize
from chanfuse.gmm import read_gmm, utterance_score
from chanfuse.optim import LbfgsConfig

logger = logging.getLogger(__name__)

METHODS = ("ch_best", "select_ml", "select_ae", "weight_raw", "weight_softmax", "weight_jacobian", "oracle")
SELECTION_METHODS = ("ch_best", "select_ml", "select_ae", "oracle")
AGGREGATE = "ALL"

CSV_FIELDS = ("scene", "method", "chosen", "accuracy", "proxy_distance", "proxy_loglik", "cov_trace", "weights", "warning")


def sig6(x):
    """Round to the 6 significant digits used in every report."""
    if x is None or not math.isfinite(x):
        return x
    return float(f"{x:.6g}")


@dataclass
class ExperimentConfig:
    methods: tuple = METHODS
    gmm_path: str | None = None
    ae_path: str | None = None
    scenes: str | None = None
    manifest: str | None = None
    out: str | None = None
    threads: int = 1
    normalization: str = CMN_CVN
    ref_seed: int = 0
    stickiness: float = 0.8
    renorm_output: bool = True
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)

    def validate(self):
        if not self.methods:
            raise DataError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise DataError(f"unknown method(s): {', '.join(sorted(unknown))}")
        if (self.scenes is None) == (self.manifest is None):
            raise DataError("give exactly one of 'scenes' (directory) or 'manifest' (file)")
        for p in (self.gmm_path, self.ae_path, self.scenes, self.manifest):
            if p is not None and not Path(p).exists():
                raise DataError(f"no such file or directory: {p}")
        needs_gmm = {"select_ml", "weight_raw", "weight_softmax", "weight_jacobian"} & set(self.methods)
        if needs_gmm and self.gmm_path is None:
            raise DataError(f"method(s) {', '.join(sorted(needs_gmm))} need a GMM")
        if "select_ae" in self.methods and self.ae_path is None:
            raise DataError("select_ae needs an autoencoder")


@dataclass(frozen=True)
class SceneRow:
    scene: str
    method: str
    chosen: int | None
    accuracy: float | None
    distance: float
    loglik: float | None
    cov_trace: float | None
    weights: tuple
    warning: str = ""


@dataclass
class MetricReport:
    rows: list
    aggregate: list

    def method_summary(self, method):
        for row in self.aggregate:
            if row.method == method:
                return row
        raise KeyError(method)


def feature_distance(a, b):
    """Frobenius distance normalized by sqrt(T * D)."""
    x = getattr(a, "frames", a)
    y = getattr(b, "frames", b)
    if np.shape(x) != np.shape(y):
        raise DataError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(x - y) / math.sqrt(x.size))


def _renormalized(f, mode):
    return normalize(FeatureMatrix(f.frames), mode)


def _loglik(gmm, fused):
    # model-free methods still get a row when the GMM does not fit the features
    if gmm is None or gmm.dim != fused.dim:
        return None
    return sig6(utterance_score(gmm, fused))


@dataclass
class Models:
    gmm: object = None
    ae: object = None


def _evaluate_scene(scene_id, u_raw, meta, methods, models, cfg):
    u = u_raw.normalized(cfg.normalization)
    clean = normalize(FeatureMatrix(meta.clean.frames), cfg.normalization)
    C = u.C
    rows = []
    raw = None
    for method in methods:
        try:
            chosen, w = None, None
            if method == "ch_best":
                chosen = meta.oracle
            elif method == "oracle":
                chosen = select_oracle(u, clean).chosen
            elif method == "select_ml":
                chosen = select_ml(models.gmm, u).chosen
            elif method == "select_ae":
                chosen = select_ae(models.ae, u).chosen
            elif method in ("weight_raw", "weight_softmax"):
                if raw is None:
                    raw = estimate_weights_ml(models.gmm, u, cfg.jacobian)
                w = raw if method == "weight_raw" else softmax_constrain(raw)
            else:
                w = estimate_weights_jacobian(models.gmm, u, cfg.jacobian, cfg.lbfgs)
            if w is None:
                w = WeightVector(np.eye(C)[chosen - 1], "selection")
            fused = apply_weights(u, w)
            out = _renormalized(fused, cfg.normalization) if cfg.renorm_output else fused
            rows.append(SceneRow(
                scene_id, method, chosen,
                None if chosen is None else float(chosen == meta.oracle),
                sig6(feature_distance(out, clean)),
                _loglik(models.gmm, fused),
                sig6(float(np.trace(weighted_stats(u, w, cfg.jacobian.eps).cov))) if u.T >= 2 else None,
                tuple(sig6(float(v)) for v in w.w),
                w.warning or "",
            ))
        except (ChanfuseError, ArithmeticError, np.linalg.LinAlgError) as exc:
            logger.warning("scene %s, method %s failed: %s", scene_id, method, exc)
            rows.append(SceneRow(scene_id, method, None, None, math.nan, None, None, (), f"failed: {exc}"))
    return rows


def _mean(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return sig6(float(np.mean(vals))) if vals else None


def aggregate_rows(rows, methods):
    agg = []
    for method in methods:
        mine = [r for r in rows if r.method == method]
        ws = [r.weights for r in mine if r.weights]
        agg.append(SceneRow(
            AGGREGATE, method, None,
            _mean([r.accuracy for r in mine]) if method in SELECTION_METHODS else None,
            _mean([r.distance for r in mine]),
            _mean([r.loglik for r in mine]),
            _mean([r.cov_trace for r in mine]),
            tuple(sig6(float(v)) for v in np.mean(ws, axis=0)) if ws and len({len(w) for w in ws}) == 1 else (),
            f"{sum(1 for r in mine if r.warning)} warning(s)" if any(r.warning for r in mine) else "",
        ))
    return agg


def _load_scenes(cfg):
    """Yield (scene_id, utterance, meta) in scene-id order."""
    if cfg.scenes is not None:
        dirs = sorted(p for p in Path(cfg.scenes).iterdir() if (p / "meta.txt").exists())
        if not dirs:
            raise DataError(f"no scenes found under {cfg.scenes}")
        return [(d.name, *scenegen.read_scene(d)) for d in dirs]
    ref = scenegen.reference_model(cfg.ref_seed)
    return [(f"scene_{k:04d}", *simulate_spec(spec, ref, cfg.stickiness))
            for k, spec in enumerate(scenegen.read_manifest(cfg.manifest))]


def simulate_spec(spec, ref, stickiness=0.8):
    if spec.mode == scenegen.FEATURE:
        clean = scenegen.synth_clean(spec.seed, spec.length, scenegen.GMM_SAMPLES, ref, stickiness)
    else:
        clean = scenegen.synth_clean(spec.seed, spec.length, scenegen.TONES, sigma=0.01)
    return scenegen.make_scene(clean, spec)


def run_scenes(scenes, models, cfg):
    """Evaluate preloaded ``(scene_id, utterance, meta)`` triples."""
    methods = tuple(m for m in METHODS if m in cfg.methods)
    scenes = sorted(scenes, key=lambda s: s[0])
    work = lambda s: _evaluate_scene(s[0], s[1], s[2], methods, models, cfg)  # noqa: E731
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_scene = list(pool.map(work, scenes))
    else:
        per_scene = [work(s) for s in scenes]
    rows = [r for block in per_scene for r in block]
    return MetricReport(rows, aggregate_rows(rows, methods))


def run_experiment(cfg):
    cfg.validate()
    models = Models(
        read_gmm(cfg.gmm_path) if cfg.gmm_path else None,
        read_autoencoder(cfg.ae_path) if cfg.ae_path else None,
    )
    return run_scenes(_load_scenes(cfg), models, cfg)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _csv_row(r):
    return {
        "scene": r.scene, "method": r.method, "chosen": _cell(r.chosen), "accuracy": _cell(r.accuracy),
        "proxy_distance": _cell(r.distance), "proxy_loglik": _cell(r.loglik), "cov_trace": _cell(r.cov_trace),
        "weights": " ".join(_cell(v) for v in r.weights), "warning": r.warning,
    }


def report_csv(report):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in report.rows + report.aggregate:
        writer.writerow(_csv_row(r))
    return buf.getvalue()


def _num(s, kind=float):
    return None if s == "" else kind(s)


def parse_report_csv(text):
    rows, agg = [], []
    for rec in csv.DictReader(io.StringIO(text)):
        row = SceneRow(
            rec["scene"], rec["method"], _num(rec["chosen"], int), _num(rec["accuracy"]),
            _num(rec["proxy_distance"]), _num(rec["proxy_loglik"]), _num(rec["cov_trace"]),
            tuple(float(v) for v in rec["weights"].split()), rec["warning"],
        )
        (agg if row.scene == AGGREGATE else rows).append(row)
    return MetricReport(rows, agg)


def report_table(report):
    header = ("method", "accuracy", "distance*", "loglik*", "cov_trace", "mean weights")
    lines = [(r.method, _cell(r.accuracy), _cell(r.distance), _cell(r.loglik), _cell(r.cov_trace),
              " ".join(_cell(v) for v in r.weights)) for r in report.aggregate]
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    scenes = len({r.scene for r in report.rows})
    out = [f"{scenes} scene(s); * proxy metrics: distance to clean reference, mean GMM log-likelihood (no WER)",
           fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*l) for l in lines]
    return "\n".join(out) + "\n"


def render_report(report, out_path=None):
    """Aligned text table (returned) and, if ``out_path`` is given, the CSV file."""
    if out_path is not None:
        try:
            Path(out_path).write_text(report_csv(report))
        except OSError as exc:
            raise DataError(f"cannot write report to {out_path}: {exc}") from exc
    return report_table(report)
