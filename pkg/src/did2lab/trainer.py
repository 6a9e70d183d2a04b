"""Mini-batch training loop, validation-driven lr schedule, checkpoint I/O.

Checkpoint layout (all little-endian)::

    b"DID2" | u32 version | u32 header_len | header (utf-8 key=value lines)
    then for every tensor in ModelParams.tensors() order:
    u32 rank | u32 extents[rank] | float32 payload (row-major)
"""
import csv
import io
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nm
from .errors import CheckpointError, ConfigError, NumericError, SamplingError
from .supervision import VerifConfig, combined_objective, sample_pairs
from .verify import best_threshold, make_pairs, pair_scores

log = logging.getLogger(__name__)

MAGIC = b"DID2"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    lr: float = 0.01
    lr_decay: float = 0.5
    patience: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    positives_per_batch: int = 16
    negatives_per_batch: int = 16
    val_pairs: int = 300
    checkpoint_every: int = 0
    seed: int = 0
    center_init: bool = True
    verif: VerifConfig = field(default_factory=VerifConfig)

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("bad optimizer settings")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        self.verif.validate()


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "id_acc_1", "id_acc_2", "id_acc_3", "id_acc_4", "val_acc", "lr")

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path_or_buf):
        own = isinstance(path_or_buf, str)
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [f"{r[c]:.6f}" if c != "lr" else f"{r[c]:.8g}" for c in self.COLUMNS[1:]])
        finally:
            if own:
                fh.close()


def validation_accuracy(params, arch, images, pairs):
    """Best-threshold L2 verification accuracy on FC-4 features."""
    f = mdl.extract_features(params, arch, images, layer=4)
    s = pair_scores("l2", f[pairs.a], f[pairs.b])
    return best_threshold(s, pairs.same)[1]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n - 1, batch_size) if len(order[s:s + batch_size]) >= 2]


def train(cfg, arch, train_set, val_set, on_checkpoint=None):
    """Train from scratch; returns ``(best_params, TrainLog)``.

    ``train_set``/``val_set`` are :class:`facegen.Dataset` objects with
    disjoint identities. Occluded images never pass through here.
    """
    cfg.validate()
    arch.validate()
    train_ids = np.unique(train_set.identities)
    if np.intersect1d(train_ids, np.unique(val_set.identities)).size:
        raise ConfigError("train and validation identity sets overlap")
    if len(train_ids) != arch.num_identities:
        raise ConfigError(f"arch.num_identities={arch.num_identities} but train split has {len(train_ids)} identities")
    labels = np.searchsorted(train_ids, train_set.identities)
    images = train_set.images.astype(nm.DTYPE, copy=False)
    rng = nm.make_rng(cfg.seed)
    params = mdl.init_params(arch, nm.make_rng(arch.seed))
    if cfg.center_init:
        params = mdl.center_biases(params, arch, images[::max(1, len(images) // 256)])
    velocity = [np.zeros_like(t) for t in params.tensors()]
    val_pairs = make_pairs(val_set.identities, cfg.val_pairs, seed=cfg.seed + 1)

    lr = cfg.lr
    best_val, best_params, stale = -1.0, params.copy(), 0
    tlog = TrainLog()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, n_seen = 0.0, 0
        correct = np.zeros(mdl.NUM_STAGES)
        for b_idx, idx in enumerate(_batches(len(images), cfg.batch_size, rng)):
            pairs = None
            if cfg.verif.lambda_ve > 0:
                for _attempt in range(10):
                    try:
                        pairs = sample_pairs(labels[idx], cfg.positives_per_batch, cfg.negatives_per_batch, rng)
                        break
                    except SamplingError:
                        idx = rng.choice(len(images), size=len(idx), replace=False)
                else:
                    raise SamplingError(f"could not draw a batch with positive pairs (epoch {epoch})")
            outs = mdl.forward(params, arch, images[idx])
            loss, d_fc, d_logits, _ = combined_objective(outs, labels[idx], pairs, cfg.verif)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b_idx} (step {step})")
            grads = mdl.backward(params, outs, d_fc, d_logits)
            nm.sgd_step(params.tensors(), grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += loss * len(idx)
            n_seen += len(idx)
            for n in range(mdl.NUM_STAGES):
                correct[n] += np.sum(np.argmax(outs.logits[n], axis=1) == labels[idx])
            step += 1
        val_acc = validation_accuracy(params, arch, val_set.images, val_pairs)
        row = dict(epoch=epoch, train_loss=loss_sum / n_seen, val_acc=val_acc, lr=lr)
        row.update({f"id_acc_{n + 1}": correct[n] / n_seen for n in range(mdl.NUM_STAGES)})
        tlog.append(**row)
        log.info("epoch %d loss %.4f id4 %.3f val %.3f lr %.3g", epoch, row["train_loss"], row["id_acc_4"], val_acc, lr)
        if val_acc > best_val:
            best_val, best_params, stale = val_acc, params.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                lr *= cfg.lr_decay
                stale = 0
        if on_checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            on_checkpoint(epoch, params)
    return best_params, tlog


def identification_accuracy(params, arch, images, labels, branch=4):
    outs = mdl.forward(params, arch, images, keep_cache=False)
    return float(np.mean(np.argmax(outs.logits[branch - 1], axis=1) == labels))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _arch_header(arch):
    d = asdict(arch)
    lines = [
        f"input_hw={d['input_hw'][0]},{d['input_hw'][1]}",
        f"input_channels={d['input_channels']}",
        "conv_channels=" + ",".join(map(str, d["conv_channels"])),
        "kernel=" + ";".join(f"{a},{b}" for a, b in d["kernel"]),
        f"fc_dim={d['fc_dim']}",
        f"num_identities={d['num_identities']}",
        f"seed={d['seed']}",
    ]
    return "\n".join(lines) + "\n"


def _parse_arch_header(text):
    kv = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    try:
        return mdl.ArchConfig(
            input_hw=tuple(int(v) for v in kv["input_hw"].split(",")),
            input_channels=int(kv["input_channels"]),
            conv_channels=tuple(int(v) for v in kv["conv_channels"].split(",")),
            kernel=tuple(tuple(int(v) for v in k.split(",")) for k in kv["kernel"].split(";")),
            fc_dim=int(kv["fc_dim"]),
            num_identities=int(kv["num_identities"]),
            seed=int(kv["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError("header", f"malformed architecture header: {exc}") from exc


def checkpoint_bytes(params, arch):
    buf = io.BytesIO()
    header = _arch_header(arch).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    for t in params.tensors():
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params, arch, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, arch))


def _take(data, pos, n, section):
    if pos + n > len(data):
        raise CheckpointError(section, f"truncated: need {n} bytes at offset {pos}, file has {len(data)}")
    return data[pos:pos + n], pos + n


def parse_checkpoint(data):
    raw, pos = _take(data, 0, 4, "magic")
    if raw != MAGIC:
        raise CheckpointError("magic", f"bad magic {raw!r}, expected {MAGIC!r}")
    raw, pos = _take(data, pos, 8, "version")
    version, hlen = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    raw, pos = _take(data, pos, hlen, "header")
    try:
        arch = _parse_arch_header(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError("header", "header is not utf-8") from exc
    expected = mdl.param_shapes(arch)
    tensors = []
    for k, shape in enumerate(expected):
        section = f"tensor{k}"
        raw, pos = _take(data, pos, 4, section)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(data, pos, 4 * rank, section)
        dims = struct.unpack(f"<{rank}I", raw)
        if tuple(dims) != tuple(shape):
            raise CheckpointError(section, f"shape {dims} does not match architecture {shape}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        raw, pos = _take(data, pos, nbytes, section)
        tensors.append(np.frombuffer(raw, dtype="<f4").reshape(dims).astype(nm.DTYPE))
    if pos != len(data):
        raise CheckpointError("trailer", f"{len(data) - pos} unexpected trailing bytes")
    return mdl.ModelParams.from_tensors(tensors), arch


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
