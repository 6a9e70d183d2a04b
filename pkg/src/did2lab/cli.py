"""``did2`` command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.
"""
import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from . import analysis as A
from . import facegen
from . import model as mdl
from . import svg
from . import trainer
from . import verify as V
from ._backend import backend_name, set_threads
from .config import SEEDED, RunConfig, describe, load_config
from .errors import ConfigError, Did2Error
from .numerics import make_rng

log = logging.getLogger("did2")

ANALYSES = ("sparsity", "binarize", "selectivity", "robustness", "activation-map")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="did2", description="Multi-branch face-embedding lab.",
                epilog="Config keys:\n" + describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, needs_ckpt=False):
        sp.add_argument("--config", help="key=value run configuration")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--checkpoint", required=needs_ckpt, help="model checkpoint")
        sp.add_argument("--threads", type=int, default=None, help="worker cap (env DID2_THREADS)")
        sp.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
        sp.add_argument("--seed-file", help="seed.txt from an earlier run")
        return sp

    common(sub.add_parser("gen-data", help="write a synthetic PGM dataset"))
    common(sub.add_parser("train", help="train and save best.ckpt"))
    common(sub.add_parser("eval-verify", help="pair verification per layer and metric"), True)
    common(sub.add_parser("eval-ident", help="closed-set rank-1 and open-set DIR@FAR"), True)
    an = common(sub.add_parser("analyze", help="activation analyses"), True)
    an.add_argument("analysis", choices=ANALYSES)
    return p


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _read_seed(path):
    try:
        with open(path) as fh:
            for line in fh:
                key, _, value = line.partition("=")
                if key.strip() == "seed":
                    return int(value)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read seed file {path}: {exc}") from exc
    raise ConfigError(f"{path}: no seed= line")


def _setup(args):
    seed = _read_seed(args.seed_file) if args.seed_file else (args.seed if args.seed is not None else 0)
    cfg = (load_config(args.config, seed) if args.config else RunConfig(seed=seed)).resolved()
    threads = args.threads if args.threads is not None else os.environ.get("DID2_THREADS")
    if threads not in (None, ""):
        try:
            threads = int(threads)
        except ValueError as exc:
            raise ConfigError(f"bad thread count {threads!r}") from exc
        if threads < 1:
            raise ConfigError("thread count must be >= 1")
        set_threads(threads)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    with open(os.path.join(args.out, "seed.txt"), "w") as fh:
        fh.write(f"seed={seed}\n")
        for key in SEEDED:
            fh.write(f"{key}={cfg[key]}\n")
    return cfg


def _dataset(cfg):
    if cfg["data.dir"]:
        ds = facegen.load_dataset(cfg["data.dir"])
        if ds.images.shape[-1] != cfg["data.hw"] or ds.images.shape[-2] != cfg["data.hw"]:
            raise ConfigError(f"data.hw={cfg['data.hw']} but images are {ds.images.shape[-2:]}")
        return ds
    return facegen.gen_dataset(**cfg.gen_kwargs())


def _model(args, ds):
    params, arch = trainer.load_checkpoint(args.checkpoint)
    if tuple(arch.input_hw) != tuple(ds.images.shape[-2:]):
        raise ConfigError(f"checkpoint expects {arch.input_hw} images, dataset has {ds.images.shape[-2:]}")
    return params, arch


def _fit_split(ds, cfg):
    which = cfg["verif.jb_fit"]
    if which == "trainval":
        ids = ds.manifest.splits["train"] + ds.manifest.splits["val"]
        return ds.subset(np.isin(ds.identities, ids))
    return ds.split(which)


def _test_pairs(cfg, test):
    if cfg["eval.pairs_file"]:
        pairs = V.read_pairs_csv(cfg["eval.pairs_file"])
        if len(pairs) and max(pairs.a.max(), pairs.b.max()) >= len(test):
            raise ConfigError("pairs_file indexes beyond the test split")
        return pairs
    return V.make_pairs(test.identities, cfg["eval.pairs"], seed=cfg["eval.seed"])


def _extractor(params, arch, layer, flip):
    return lambda images: mdl.extract_features(params, arch, images, layer=layer, with_flip=flip)


def _metric(name, extract, fit, cfg):
    if name != "jb":
        return name
    return V.fit_joint_bayes(extract(fit.images), fit.identities, cfg["verif.jb_shrinkage"], cfg["verif.jb_em_iters"])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x):
    return f"{x:.6f}"


def _say(label, value):
    print(f"{label}: {value}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    ds = facegen.gen_dataset(**cfg.gen_kwargs())
    facegen.write_dataset(ds, args.out)
    _say("images", len(ds))
    _say("identities", ds.manifest.num_ids)
    _say("attributes", ",".join(ds.manifest.attribute_names))


def cmd_train(args, cfg):
    ds = _dataset(cfg)
    tr, va = ds.split("train"), ds.split("val")
    arch = cfg.arch(len(np.unique(tr.identities)))
    tc = cfg.train()

    def on_ckpt(epoch, params):
        trainer.save_checkpoint(params, arch, os.path.join(args.out, f"epoch{epoch:03d}.ckpt"))

    t0 = time.perf_counter()
    params, tlog = trainer.train(tc, arch, tr, va, on_checkpoint=on_ckpt)
    elapsed = time.perf_counter() - t0
    trainer.save_checkpoint(params, arch, os.path.join(args.out, "best.ckpt"))
    tlog.to_csv(os.path.join(args.out, "train_log.csv"))
    epochs = tlog.column("epoch")
    svg.line_chart(os.path.join(args.out, "train_log.svg"),
                   {"train loss": (epochs, tlog.column("train_loss"))}, "training loss", "epoch", "loss")
    last = tlog.rows[-1]
    _say("backend", backend_name())
    _say("final train loss", _f(last["train_loss"]))
    _say("final branch-4 train id accuracy", _f(last["id_acc_4"]))
    _say("best val accuracy", _f(tlog.column("val_acc").max()))
    _say("seconds", f"{elapsed:.1f}")


def cmd_eval_verify(args, cfg):
    ds = _dataset(cfg)
    params, arch = _model(args, ds)
    test, fit = ds.split("test"), _fit_split(ds, cfg)
    pairs = _test_pairs(cfg, test)
    V.write_pairs_csv(os.path.join(args.out, "pairs.csv"), pairs)
    rows, curves = [], {}
    for layer in range(1, mdl.NUM_STAGES + 1):
        extract = _extractor(params, arch, layer, cfg["eval.flip"])
        f = extract(test.images)
        for name in ("l2", "cosine", "hamming", "jb"):
            metric = _metric(name, extract, fit, cfg)
            s = V.pair_scores(metric, f[pairs.a], f[pairs.b])
            mean, std = V.verification_accuracy(s, pairs.same, cfg["eval.folds"], cfg["eval.seed"])
            rows.append([f"fc{layer}", name, _f(mean), _f(std)])
            _say(f"fc{layer} {name} accuracy", f"{mean:.4f} +- {std:.4f}")
            if layer == cfg["eval.layer"]:
                curves[name] = V.roc(s, pairs.same)
    _write_csv(os.path.join(args.out, "verify.csv"), ["layer", "metric", "accuracy", "std"], rows)
    roc_rows = [[name, _f(x), _f(y)] for name, c in curves.items() for x, y in c]
    _write_csv(os.path.join(args.out, "roc.csv"), ["metric", "fpr", "tpr"], roc_rows)
    svg.line_chart(os.path.join(args.out, "roc.svg"), {k: (c[:, 0], c[:, 1]) for k, c in curves.items()},
                   f"ROC, FC-{cfg['eval.layer']}", "false positive rate", "true positive rate", ylim=(0, 1))


def _ident_split(test, known_fraction):
    ids = np.unique(test.identities)
    n_known = int(np.ceil(known_fraction * len(ids)))
    if not 1 <= n_known < len(ids):
        raise ConfigError("eval.known_fraction must leave both known and unknown test identities")
    first = np.zeros(len(test), dtype=bool)
    first[np.unique(test.identities, return_index=True)[1]] = True
    return ids[:n_known], first


def cmd_eval_ident(args, cfg):
    ds = _dataset(cfg)
    params, arch = _model(args, ds)
    test, fit = ds.split("test"), _fit_split(ds, cfg)
    extract = _extractor(params, arch, cfg["eval.layer"], cfg["eval.flip"])
    f, ids = extract(test.images), test.identities
    known, first = _ident_split(test, cfg["eval.known_fraction"])
    is_known = np.isin(ids, known)
    rows = []
    for name in ("l2", "cosine", "jb"):
        metric = _metric(name, extract, fit, cfg)
        r1 = V.rank1_closed(f[first], ids[first], f[~first], ids[~first], metric)
        gal = first & is_known
        dir_, tau = V.dir_at_far(f[gal], ids[gal], f[is_known & ~first], ids[is_known & ~first],
                                 f[~is_known], ids[~is_known], cfg["eval.far"], metric)
        rows.append([name, _f(r1), _f(dir_), f"{tau:.6g}"])
        _say(f"{name} rank-1", f"{r1:.4f}")
        _say(f"{name} DIR@FAR={cfg['eval.far']:g}", f"{dir_:.4f}")
    _write_csv(os.path.join(args.out, "ident.csv"), ["metric", "rank1", "dir_at_far", "tau"], rows)


def _an_sparsity(args, cfg, ds, params, arch):
    test = ds.split("test")
    f = mdl.extract_features(params, arch, test.images, layer=cfg["eval.layer"])
    rep = A.sparsity_report(f)
    out = args.out
    _write_csv(os.path.join(out, "sparsity_images.csv"), ["image", "active"], enumerate(rep.per_image.tolist()))
    _write_csv(os.path.join(out, "sparsity_neurons.csv"), ["neuron", "active_images"], enumerate(rep.per_neuron.tolist()))
    summary = [
        ["num_images", rep.num_images], ["num_neurons", rep.num_neurons],
        ["image_mean", _f(rep.image_mean)], ["image_std", _f(rep.image_std)],
        ["neuron_mean", _f(rep.neuron_mean)], ["neuron_std", _f(rep.neuron_std)],
        ["image_rate", _f(rep.image_rate)], ["neuron_rate", _f(rep.neuron_rate)],
    ]
    _write_csv(os.path.join(out, "sparsity_summary.csv"), ["statistic", "value"], summary)
    svg.bar_chart(os.path.join(out, "sparsity_images.svg"), *rep.image_hist,
                  "activated neurons per image", "neurons", "images")
    svg.bar_chart(os.path.join(out, "sparsity_neurons.svg"), *rep.neuron_hist,
                  "activated images per neuron", "images", "neurons")
    _say("active neurons per image", f"{rep.image_mean:.2f} +- {rep.image_std:.2f} of {rep.num_neurons}")
    _say("active images per neuron", f"{rep.neuron_mean:.2f} +- {rep.neuron_std:.2f} of {rep.num_images}")


def _an_binarize(args, cfg, ds, params, arch):
    test, fit = ds.split("test"), _fit_split(ds, cfg)
    pairs = _test_pairs(cfg, test)
    extract = _extractor(params, arch, cfg["eval.layer"], cfg["eval.flip"])
    cells = A.binarization_experiment(extract(test.images), test.identities, pairs, extract(fit.images),
                                      fit.identities, cfg["eval.folds"], cfg["verif.jb_shrinkage"],
                                      cfg["verif.jb_em_iters"], cfg["eval.seed"])
    _write_csv(os.path.join(args.out, "binarize.csv"), ["cell", "accuracy", "std"],
               [[k, _f(m), _f(s)] for k, (m, s) in cells.items()])
    for k, (m, _) in cells.items():
        _say(k, f"{m:.4f}")


def _an_selectivity(args, cfg, ds, params, arch):
    test = ds.split("test")
    f = mdl.extract_features(params, arch, test.images, layer=cfg["eval.layer"])
    lbp = A.lbp_baseline(test.images)
    seed = cfg["analysis.selectivity_seed"]
    targets = {f"attr:{n}": test.attributes[:, a] for a, n in enumerate(ds.manifest.attribute_names)}
    for ident in np.unique(test.identities)[:cfg["analysis.identities"]]:
        targets[f"id:{ds.manifest.identity_names[ident]}"] = test.identities == ident
    summary, neuron_rows = [], []
    for name, mask in targets.items():
        rep = A.per_neuron_accuracy(f, mask, seed)
        base = A.per_neuron_accuracy(lbp, mask, seed)
        summary.append([name, rep.best_neuron, _f(rep.best_accuracy), base.best_neuron, _f(base.best_accuracy)])
        prof = A.excitation_profile(f, mask, seed)
        for rank, k in enumerate(prof["neuron"]):
            neuron_rows.append([name, rank, int(k), _f(prof["target_mean"][rank]), _f(prof["target_std"][rank]),
                                _f(prof["other_mean"][rank]), _f(prof["other_std"][rank]),
                                _f(prof["accuracy"][rank]), "excitatory" if prof["excitatory"][rank] else "inhibitory"])
        _say(f"{name} best neuron", f"{rep.best_accuracy:.4f} (lbp {base.best_accuracy:.4f})")
    _write_csv(os.path.join(args.out, "selectivity.csv"),
               ["target", "best_neuron", "best_accuracy", "best_lbp_feature", "best_lbp_accuracy"], summary)
    _write_csv(os.path.join(args.out, "selectivity_profile.csv"),
               ["target", "rank", "neuron", "target_mean", "target_std", "other_mean", "other_std",
                "accuracy", "polarity"], neuron_rows)
    subsets = {"all": np.ones(len(test), dtype=bool), **{k: v for k, v in targets.items()}}
    neurons = [i for i in cfg["analysis.hist_neurons"]]
    hists, warnings = A.activation_histograms(f, subsets, neurons, cfg["analysis.hist_bins"])
    for w in warnings:
        log.warning(w)
    hist_rows = [[i, name, _f(lo), _f(hi), int(c)]
                 for (i, name), (edges, counts) in hists.items()
                 for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    _write_csv(os.path.join(args.out, "activation_hist.csv"), ["neuron", "subset", "bin_lo", "bin_hi", "count"], hist_rows)
    for i in neurons:
        if (i, "all") in hists:
            svg.bar_chart(os.path.join(args.out, f"activation_hist_n{i}.svg"), *hists[(i, "all")],
                          f"neuron {i}, all test images", "activation")


def _sources(cfg, ds, params, arch):
    fit = _fit_split(ds, cfg)
    out = {}
    for name in cfg["analysis.sources"]:
        if name == "lbp":
            extract = A.lbp_baseline
        elif name in ("fc1", "fc2", "fc3", "fc4"):
            extract = _extractor(params, arch, int(name[2]), cfg["eval.flip"])
        else:
            raise ConfigError(f"unknown feature source {name!r}")
        out[name] = A.FeatureSource(extract, _metric(cfg["analysis.metric"], extract, fit, cfg))
    return out


def _an_robustness(args, cfg, ds, params, arch):
    test = ds.split("test")
    pairs = _test_pairs(cfg, test)
    sources = _sources(cfg, ds, params, arch)
    rows = []
    for kind, levels in (("partial", list(cfg["analysis.partial_levels"])), ("block", list(cfg["analysis.block_levels"]))):
        curve = A.robustness_sweep(sources, test.images, pairs, kind, levels, cfg["eval.folds"],
                                   fill=cfg["analysis.fill"], seed=cfg["analysis.seed"],
                                   from_bottom=cfg["analysis.from_bottom"])
        rows.extend([k, f"{lv:g}", s, _f(a), _f(sd)] for k, lv, s, a, sd in curve.rows())
        series = {s: (np.asarray(levels, float), curve.accuracy[:, i]) for i, s in enumerate(curve.sources)}
        xlabel = "occluded fraction" if kind == "partial" else "block side (pixels)"
        svg.line_chart(os.path.join(args.out, f"robustness_{kind}.svg"), series, f"{kind} occlusion",
                       xlabel, "verification accuracy", ylim=(0.4, 1.0))
        for i, s in enumerate(curve.sources):
            _say(f"{kind} {s}", " ".join(f"{a:.3f}" for a in curve.accuracy[:, i]))
    _write_csv(os.path.join(args.out, "robustness.csv"), ["kind", "level", "source", "accuracy", "std"], rows)


def _an_activation_map(args, cfg, ds, params, arch):
    test = ds.split("test")
    ids = np.unique(test.identities)
    k = cfg["analysis.map_identity"]
    if not 0 <= k < len(ids):
        raise ConfigError(f"analysis.map_identity must be in [0, {len(ids)})")
    images = test.images[test.identities == ids[k]]
    kind = cfg["analysis.map_kind"]
    levels = list(cfg["analysis.partial_levels"] if kind == "partial" else cfg["analysis.block_levels"])
    extract = _extractor(params, arch, cfg["eval.layer"], False)
    matrix, order = A.mean_activation_map(extract, images, kind, levels, make_rng(cfg["analysis.seed"]),
                                          cfg["analysis.fill"], from_bottom=cfg["analysis.from_bottom"])
    header = ["level"] + [f"n{int(i)}" for i in order]
    _write_csv(os.path.join(args.out, "activation_map.csv"), header,
               [[f"{lv:g}"] + [_f(v) for v in row] for lv, row in zip(levels, matrix)])
    name = ds.manifest.identity_names[ids[k]]
    svg.heatmap(os.path.join(args.out, "activation_map.svg"), matrix, [f"{lv:g}" for lv in levels],
                f"mean FC-{cfg['eval.layer']} activation, {name}, {kind}", "neuron (sorted)", "occlusion")
    _say("identity", name)
    _say("rows", len(levels))


def cmd_analyze(args, cfg):
    ds = _dataset(cfg)
    params, arch = _model(args, ds)
    handler = {
        "sparsity": _an_sparsity,
        "binarize": _an_binarize,
        "selectivity": _an_selectivity,
        "robustness": _an_robustness,
        "activation-map": _an_activation_map,
    }[args.analysis]
    handler(args, cfg, ds, params, arch)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-verify": cmd_eval_verify,
    "eval-ident": cmd_eval_ident,
    "analyze": cmd_analyze,
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DID2_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _setup(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"did2: config error: {exc}", file=sys.stderr)
        return 2
    except (Did2Error, OSError, ValueError, ArithmeticError) as exc:
        print(f"did2: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
