"""Flat ``section.key = value`` run configuration.

Every key has a default. Unknown keys and unparsable values raise
:class:`ConfigError`. Blank lines and ``#`` comments are ignored; a line
``[section]`` sets a prefix for the following bare keys.
"""
from dataclasses import dataclass, field

from . import model as mdl
from .errors import ConfigError
from .supervision import VerifConfig
from .trainer import TrainConfig

SECTIONS = ("data", "arch", "train", "verif", "eval", "analysis")


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kernels(text):
    out = []
    for item in text.split(","):
        a, _, b = item.strip().partition("x")
        out.append((int(a), int(b or a)))
    return tuple(out)


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}x{b}" for a, b in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (default, parser, help)
SCHEMA = {
    "data.dir": ("", str, "PGM dataset directory; empty means generate in memory"),
    "data.num_ids": (64, int, "identities generated"),
    "data.imgs_per_id": (25, int, "images per identity"),
    "data.num_attrs": (4, int, "planted binary attributes"),
    "data.hw": (32, int, "image side in pixels"),
    "data.seed": (-1, int, "generator seed; -1 uses the run seed"),
    "data.margin": (3.0, float, "max shift in pixels"),
    "data.rotation": (0.08, float, "rotation std in radians"),
    "data.scale_jitter": (0.08, float, "max relative scale change"),
    "data.lighting": (0.2, float, "max lighting ramp"),
    "data.expression": (0.08, float, "mouth curvature std"),
    "data.pose_noise": (0.15, float, "per-image jitter of identity parameters"),
    "data.pixel_noise": (0.03, float, "additive pixel noise std"),
    "data.clutter": (0.0, float, "std of a smooth random background; 0 gives a flat background"),
    "data.attr_strength": (1.2, float, "latent mode centre of the planted attributes"),
    "arch.conv_channels": ((16, 16, 16, 16), _ints, "channels per conv stage"),
    "arch.kernel": (((3, 3),) * 4, _kernels, "kernel per stage, e.g. 3x3,3x3,3x3,3x3"),
    "arch.fc_dim": (64, int, "FC-n width"),
    "arch.seed": (-1, int, "init seed; -1 uses the run seed"),
    "train.batch_size": (32, int, ""),
    "train.epochs": (25, int, ""),
    "train.lr": (0.01, float, ""),
    "train.lr_decay": (0.5, float, "lr factor after `patience` epochs without val gain"),
    "train.patience": (2, int, ""),
    "train.momentum": (0.9, float, ""),
    "train.weight_decay": (1e-4, float, ""),
    "train.positives_per_batch": (16, int, ""),
    "train.negatives_per_batch": (16, int, ""),
    "train.val_pairs": (300, int, ""),
    "train.checkpoint_every": (0, int, "also save every k epochs; 0 disables"),
    "train.seed": (-1, int, "batch order seed; -1 uses the run seed"),
    "train.center_init": (True, _bool, "shift initial biases so every unit starts at median-zero pre-activation"),
    "verif.margin": (2.0, float, "contrastive margin"),
    "verif.lambda_ve": (0.05, float, "verification loss weight"),
    "verif.branch_weights": ((1.0, 1.0, 1.0, 1.0), _floats, ""),
    "verif.jb_shrinkage": (0.6, float, "Joint Bayesian shrinkage"),
    "verif.jb_em_iters": (0, int, "Joint Bayesian EM iterations"),
    "verif.jb_fit": ("trainval", _choice("train", "val", "trainval"), "identities used to fit Joint Bayesian"),
    "eval.pairs": (600, int, "verification pairs on the test split"),
    "eval.pairs_file": ("", str, "optional img_a,img_b,same CSV (test-split image indices)"),
    "eval.folds": (10, int, ""),
    "eval.seed": (-1, int, "pair/fold seed; -1 uses the run seed"),
    "eval.layer": (4, int, "FC layer for single-layer reports"),
    "eval.flip": (False, _bool, "concatenate features of the mirrored image"),
    "eval.far": (0.01, float, "open-set false accept rate"),
    "eval.known_fraction": (0.5, float, "share of test identities enrolled in the open-set gallery"),
    "analysis.partial_levels": ((0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7), _floats, ""),
    "analysis.block_levels": ((0, 4, 8, 12, 16, 20, 24), _ints, "block sides in pixels"),
    "analysis.from_bottom": (True, _bool, "partial occlusion grows from the bottom"),
    "analysis.fill": (0.0, float, "occluder pixel value"),
    "analysis.metric": ("jb", _choice("jb", "l2", "cosine", "hamming"), "score for robustness sweeps"),
    "analysis.sources": (("fc1", "fc2", "fc3", "fc4", "lbp"), lambda t: tuple(v.strip() for v in t.split(",") if v.strip()), ""),
    "analysis.selectivity_seed": (0, int, "image split seed"),
    "analysis.identities": (3, int, "test identities profiled by selectivity"),
    "analysis.hist_bins": (20, int, ""),
    "analysis.hist_neurons": ((0, 1, 2, 3), _ints, ""),
    "analysis.map_identity": (0, int, "test identity (index within split) for activation maps"),
    "analysis.map_kind": ("partial", _choice("partial", "block"), ""),
    "analysis.seed": (-1, int, "occluder seed; -1 uses the run seed"),
}

SEEDED = ("data.seed", "arch.seed", "train.seed", "eval.seed", "analysis.seed")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[0] for k, v in SCHEMA.items()})
    seed: int = 0

    def __getitem__(self, key):
        return self.values[key]

    def resolved(self):
        """Copy with every ``-1`` seed replaced by the run seed."""
        out = RunConfig(dict(self.values), self.seed)
        for key in SEEDED:
            if out.values[key] < 0:
                out.values[key] = self.seed
        return out

    def to_text(self):
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for key, value in self.values.items():
                if key.startswith(section + "."):
                    lines.append(f"{key.split('.', 1)[1]} = {_fmt(value)}")
            lines.append("")
        return "\n".join(lines)

    def arch(self, num_identities):
        hw = self["data.hw"]
        cfg = mdl.ArchConfig(
            input_hw=(hw, hw),
            input_channels=1,
            conv_channels=self["arch.conv_channels"],
            kernel=self["arch.kernel"],
            fc_dim=self["arch.fc_dim"],
            num_identities=num_identities,
            seed=self["arch.seed"],
        )
        cfg.validate()
        return cfg

    def verif(self):
        vc = VerifConfig(margin=self["verif.margin"], lambda_ve=self["verif.lambda_ve"],
                         branch_weights=self["verif.branch_weights"])
        vc.validate()
        return vc

    def train(self):
        keys = ("batch_size", "epochs", "lr", "lr_decay", "patience", "momentum", "weight_decay",
                "positives_per_batch", "negatives_per_batch", "val_pairs", "checkpoint_every", "seed",
                "center_init")
        tc = TrainConfig(verif=self.verif(), **{k: self["train." + k] for k in keys})
        tc.validate()
        return tc

    def gen_kwargs(self):
        keys = ("num_ids", "imgs_per_id", "num_attrs", "hw", "seed", "margin", "rotation",
                "scale_jitter", "lighting", "expression", "pose_noise", "pixel_noise", "clutter",
                "attr_strength")
        return {k: self["data." + k] for k in keys}


def parse_config(text, seed=0):
    cfg = RunConfig(seed=seed)
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key = key.strip()
        if "." not in key and section:
            key = f"{section}.{key}"
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            cfg.values[key] = SCHEMA[key][1](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path, seed=0):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed)


def describe():
    """Documentation table: ``key  default  help`` per line."""
    return "\n".join(f"{k:28s} {_fmt(d):>22s}  {h}" for k, (d, _, h) in SCHEMA.items())
