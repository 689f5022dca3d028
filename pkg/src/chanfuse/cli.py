"""Command-line entry point: ``chanfuse <subcommand> ...``."""

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from chanfuse import config as confmod
from chanfuse import harness, scenegen
from chanfuse.autoencoder import TrainConfig, read_autoencoder, train_with_trace, write_autoencoder
from chanfuse.chansel import MultichannelUtterance, select_ae, select_ml, select_oracle
from chanfuse.chanweight import (
    JACOBIAN,
    RAW_ML,
    SOFTMAX,
    JacobianConfig,
    apply_weights,
    estimate_weights_jacobian,
    estimate_weights_ml,
    jacobian_objective,
    softmax_constrain,
)
from chanfuse.errors import ChanfuseError
from chanfuse.featkit import CMN_CVN, RAW, log_mel, normalize, read_features, read_wav, write_features
from chanfuse.gmm import EmConfig, read_gmm, train_with_trace as gmm_train_with_trace, write_gmm
from chanfuse.optim import LbfgsConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v):
    return f"{v:.6g}"


def _opt(args, conf, name, kind=str, default=None):
    """Command-line value, else config-file value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return confmod.get(conf, name, kind, default)


def _out_path(args, conf, default=None):
    out = _opt(args, conf, "out", str, default)
    if out is None:
        raise UsageError("--out is required")
    return Path(out)


def _load_normalized(paths, mode):
    feats = []
    for p in paths:
        f = read_features(p)
        feats.append(normalize(f, mode) if f.state == RAW else f)
    return feats


def cmd_features(args, conf):
    out = _out_path(args, conf)
    mode = _opt(args, conf, "norm", str, RAW)
    if len(args.inputs) > 1 or out.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / (Path(p).stem + ".cfb") for p in args.inputs]
    else:
        targets = [out]
    for src, dst in zip(args.inputs, targets):
        write_features(dst, normalize(log_mel(read_wav(src)), mode))
        print(f"{src}\t{dst}")


def cmd_train_gmm(args, conf):
    feats = _load_normalized(args.inputs, _opt(args, conf, "norm", str, CMN_CVN))
    cfg = EmConfig(
        max_iters=confmod.get(conf, "em_max_iters", int, 20),
        var_floor=confmod.get(conf, "var_floor", float, 1e-3),
        tol=confmod.get(conf, "em_tol", float, 1e-4),
        seed=_opt(args, conf, "seed", int, 0),
    )
    model, trace = gmm_train_with_trace(feats, _opt(args, conf, "mixtures", int, 64), cfg)
    out = _out_path(args, conf)
    write_gmm(out, model)
    print(f"mixtures={model.M}\tdim={model.dim}\titerations={len(trace) - 1}\tloglik={_fmt(trace[-1])}\t{out}")


def cmd_train_ae(args, conf):
    feats = _load_normalized(args.inputs, _opt(args, conf, "norm", str, CMN_CVN))
    cfg = TrainConfig(
        epochs=_opt(args, conf, "epochs", int, 200),
        learning_rate=confmod.get(conf, "learning_rate", float, 0.05),
        batch_size=confmod.get(conf, "batch_size", int, 32),
        seed=_opt(args, conf, "seed", int, 0),
        hidden=_opt(args, conf, "hidden", int, 64),
    )
    model, trace = train_with_trace(feats, cfg)
    out = _out_path(args, conf)
    write_autoencoder(out, model)
    print(f"layers={'x'.join(map(str, model.layer_sizes))}\tmse0={_fmt(trace[0])}\tmse={_fmt(trace[-1])}\t{out}")


def cmd_simulate(args, conf):
    out = _out_path(args, conf)
    out.mkdir(parents=True, exist_ok=True)
    seed = _opt(args, conf, "seed", int, 0)
    ref = scenegen.reference_model(_opt(args, conf, "ref_seed", int, 0))
    stickiness = confmod.get(conf, "stickiness", float, 0.8)
    n_clean = _opt(args, conf, "clean", int, 0)
    for k in range(n_clean):
        f = scenegen.synth_clean(seed * 1_000_003 + k, confmod.get(conf, "length", float, 7.0),
                                 scenegen.GMM_SAMPLES, ref, stickiness)
        write_features(out / f"clean_{k:04d}.cfb", f)
    manifest = _opt(args, conf, "manifest")
    n_suite = _opt(args, conf, "suite", int, 0)
    if manifest:
        specs = scenegen.read_manifest(manifest)
    elif n_suite:
        specs = scenegen.suite_specs(n_suite, seed, clean_power=scenegen.model_power(ref))
        scenegen.write_manifest(out / "manifest.txt", specs)
    else:
        specs = []
    if not specs and not n_clean:
        raise UsageError("nothing to simulate: give --manifest, --suite N or --clean N")
    for k, spec in enumerate(specs):
        u, meta = harness.simulate_spec(spec, ref, stickiness)
        scenegen.write_scene(out / "scenes" / f"scene_{k:04d}", u, meta, spec)
    print(f"clean={n_clean}\tscenes={len(specs)}\t{out}")


def _scene_inputs(paths):
    for p in map(Path, paths):
        if (p / "meta.txt").exists():
            u, meta = scenegen.read_scene(p)
            yield p.name, u, meta
        elif p.is_dir():
            chans = sorted(p.glob("ch*.cfb"), key=lambda q: int(q.stem[2:]))
            if not chans:
                raise ChanfuseError(f"{p}: no ch*.cfb files")
            yield p.name, MultichannelUtterance(tuple(read_features(c) for c in chans)), None
        else:
            raise ChanfuseError(f"{p}: not a scene directory")


def cmd_select(args, conf):
    method = _opt(args, conf, "method", str, "ml")
    mode = _opt(args, conf, "norm", str, CMN_CVN)
    needed = {"ml": "gmm", "ae": "ae"}.get(method)
    if needed and _opt(args, conf, needed) is None:
        raise UsageError(f"method {method} needs --{needed}")
    gmm = read_gmm(_opt(args, conf, "gmm")) if method == "ml" else None
    ae = read_autoencoder(_opt(args, conf, "ae")) if method == "ae" else None
    lines = []
    for utt, u, meta in _scene_inputs(args.inputs):
        u = u.normalized(mode)
        if method == "ml":
            res = select_ml(gmm, u)
        elif method == "ae":
            res = select_ae(ae, u)
        else:
            if meta is None:
                raise ChanfuseError(f"{utt}: oracle selection needs a clean reference")
            res = select_oracle(u, normalize(meta.clean, mode))
        lines.append("\t".join([utt, res.method, str(res.chosen)] + [_fmt(s) for s in res.scores]))
    _emit(lines, args, conf)


def _jacobian_cfg(args, conf):
    return JacobianConfig(
        beta=_opt(args, conf, "beta", float, 1.0),
        eps=confmod.get(conf, "eps", float, 1e-6),
        em_iters=confmod.get(conf, "em_iters", int, 3),
        ridge=confmod.get(conf, "ridge", float, 1e-8),
        ml_mode=confmod.get(conf, "ml_mode", str, "average"),
    )


def _lbfgs_cfg(conf):
    return LbfgsConfig(
        history=confmod.get(conf, "lbfgs_history", int, 7),
        max_iters=confmod.get(conf, "lbfgs_max_iters", int, 100),
        gtol=confmod.get(conf, "lbfgs_gtol", float, 1e-6),
    )


def cmd_weight(args, conf):
    kind = _opt(args, conf, "kind", str, JACOBIAN)
    if kind not in (RAW_ML, SOFTMAX, JACOBIAN):
        raise UsageError(f"unknown weighting kind {kind!r}")
    gmm_path = _opt(args, conf, "gmm")
    if gmm_path is None:
        raise UsageError("weighting needs --gmm")
    gmm = read_gmm(gmm_path)
    mode = _opt(args, conf, "norm", str, CMN_CVN)
    jcfg = _jacobian_cfg(args, conf)
    out = _opt(args, conf, "out")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
    lines = []
    for utt, u, _ in _scene_inputs(args.inputs):
        u = u.normalized(mode)
        if kind == JACOBIAN:
            w = estimate_weights_jacobian(gmm, u, jcfg, _lbfgs_cfg(conf))
            objective = jacobian_objective(gmm, u, w, jcfg)
        else:
            w = estimate_weights_ml(gmm, u, jcfg)
            if kind == SOFTMAX:
                w = softmax_constrain(w)
            objective = jacobian_objective(gmm, u, w, JacobianConfig(beta=0.0))
        lines.append("\t".join([utt, w.kind] + [_fmt(v) for v in w.w] + [_fmt(objective)]))
        if out:
            write_features(Path(out) / f"{utt}.cfb", apply_weights(u, w))
    print("".join(line + "\n" for line in lines), end="")


def _emit(lines, args, conf):
    text = "".join(line + "\n" for line in lines)
    out = _opt(args, conf, "out")
    if out:
        Path(out).write_text(text)
    print(text, end="")


def experiment_config(args, conf):
    methods = _opt(args, conf, "methods", str, ",".join(harness.METHODS))
    return harness.ExperimentConfig(
        methods=tuple(m.strip() for m in methods.split(",") if m.strip()),
        gmm_path=_opt(args, conf, "gmm"),
        ae_path=_opt(args, conf, "ae"),
        scenes=_opt(args, conf, "scenes"),
        manifest=_opt(args, conf, "manifest"),
        out=_opt(args, conf, "out"),
        threads=_opt(args, conf, "threads", int, 1),
        normalization=_opt(args, conf, "norm", str, CMN_CVN),
        ref_seed=confmod.get(conf, "ref_seed", int, 0),
        stickiness=confmod.get(conf, "stickiness", float, 0.8),
        renorm_output=not getattr(args, "no_renorm", False) and confmod.get(conf, "renorm_output", int, 1) != 0,
        jacobian=_jacobian_cfg(args, conf),
        lbfgs=_lbfgs_cfg(conf),
    )


def cmd_evaluate(args, conf):
    cfg = experiment_config(args, conf)
    report = harness.run_experiment(cfg)
    print(harness.render_report(report, cfg.out), end="")


def cmd_report(args, conf):
    try:
        text = Path(args.csv).read_text()
    except OSError as exc:
        raise ChanfuseError(f"cannot read {args.csv}: {exc}") from exc
    report = harness.parse_report_csv(text)
    print(harness.render_report(report, _opt(args, conf, "out")), end="")


def build_parser():
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, help="worker threads for scene evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="chanfuse", description="Microphone channel selection and channel weighting.",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("features", parents=[common], help="WAV -> CFB1 log-Mel features")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train-gmm", parents=[common], help="train the clean-speech GMM")
    s.add_argument("inputs", nargs="+", help="clean CFB1 feature files")
    s.add_argument("--mixtures", type=int)
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.set_defaults(func=cmd_train_gmm)

    s = sub.add_parser("train-ae", parents=[common], help="train the clean-speech autoencoder")
    s.add_argument("inputs", nargs="+", help="clean CFB1 feature files")
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("simulate", parents=[common], help="generate clean corpora and scenes")
    s.add_argument("--manifest", help="scene manifest (one scene per line)")
    s.add_argument("--suite", type=int, help="generate N acceptance-style scenes and their manifest")
    s.add_argument("--clean", type=int, help="also write N clean utterances")
    s.add_argument("--ref-seed", dest="ref_seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("select", parents=[common], help="select one channel per utterance")
    s.add_argument("inputs", nargs="+", help="scene directories")
    s.add_argument("--method", choices=("ml", "ae", "oracle"))
    s.add_argument("--gmm")
    s.add_argument("--ae")
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("weight", parents=[common], help="estimate channel weights and fuse")
    s.add_argument("inputs", nargs="+", help="scene directories")
    s.add_argument("--kind", choices=(RAW_ML, SOFTMAX, JACOBIAN))
    s.add_argument("--gmm")
    s.add_argument("--beta", type=float)
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.set_defaults(func=cmd_weight)

    s = sub.add_parser("evaluate", parents=[common], help="run an experiment and write the CSV report")
    s.add_argument("--methods", help="comma-separated subset of " + ",".join(harness.METHODS))
    s.add_argument("--gmm")
    s.add_argument("--ae")
    s.add_argument("--scenes", help="directory of scene directories")
    s.add_argument("--manifest", help="scene manifest, simulated in memory")
    s.add_argument("--norm", choices=("raw", "cmn", "cmn+cvn"))
    s.add_argument("--no-renorm", dest="no_renorm", action="store_true",
                   help="measure distance on the fused output without re-normalizing it")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="render a CSV report as a text table")
    s.add_argument("csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = confmod.read_config(args.config) if getattr(args, "config", None) else {}
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args, conf)
    except UsageError as exc:
        print(f"chanfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChanfuseError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"chanfuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
