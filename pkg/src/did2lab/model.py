"""Four-stage convolutional trunk with a supervised FC branch per pooled stage.

Stage n computes conv -> ReLU -> maxpool2. Branch n flattens the pooled
stage-n maps (channel-major, row-major), applies affine -> ReLU to get the
FC-n feature, and an affine identity classifier on top of it.
"""
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ArgumentError, ConfigError, ShapeError

NUM_STAGES = 4


@dataclass(frozen=True)
class ArchConfig:
    input_hw: tuple = (32, 32)
    input_channels: int = 1
    conv_channels: tuple = (16, 16, 16, 16)
    kernel: tuple = ((3, 3),) * NUM_STAGES
    fc_dim: int = 64
    num_identities: int = 40
    seed: int = 0

    def __post_init__(self):
        # accept lists from config parsing
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "kernel", tuple(tuple(int(v) for v in k) for k in self.kernel))

    def validate(self):
        if len(self.conv_channels) != NUM_STAGES or len(self.kernel) != NUM_STAGES:
            raise ConfigError(f"exactly {NUM_STAGES} conv stages are required")
        if min(self.conv_channels) < 1 or self.fc_dim < 1 or self.input_channels < 1:
            raise ConfigError("channel counts and fc_dim must be positive")
        if self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2")
        self.stage_shapes()

    def stage_shapes(self):
        """Spatial (H, W) after each conv+pool stage."""
        h, w = self.input_hw
        shapes = []
        for kh, kw in self.kernel:
            ph, pw = (kh - 1) // 2, (kw - 1) // 2
            h, w = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
            if h < 2 or w < 2:
                raise ConfigError(f"spatial extent collapses before pooling ({h}x{w}); input {self.input_hw} too small")
            h, w = h // 2, w // 2
            shapes.append((h, w))
        return shapes

    def flat_dims(self):
        return [c * h * w for c, (h, w) in zip(self.conv_channels, self.stage_shapes())]


@dataclass
class ModelParams:
    conv_w: list
    conv_b: list
    fc_w: list
    fc_b: list
    cls_w: list
    cls_b: list

    def tensors(self):
        """All parameter arrays in the fixed checkpoint order."""
        out = []
        for n in range(NUM_STAGES):
            out += [self.conv_w[n], self.conv_b[n]]
        for n in range(NUM_STAGES):
            out += [self.fc_w[n], self.fc_b[n]]
        for n in range(NUM_STAGES):
            out += [self.cls_w[n], self.cls_b[n]]
        return out

    @classmethod
    def from_tensors(cls, ts):
        ts = list(ts)
        if len(ts) != 6 * NUM_STAGES:
            raise ShapeError(f"expected {6 * NUM_STAGES} tensors, got {len(ts)}")
        k = 2 * NUM_STAGES
        return cls(ts[0:k:2], ts[1:k:2], ts[k:2 * k:2], ts[k + 1:2 * k:2], ts[2 * k::2], ts[2 * k + 1::2])

    def copy(self):
        return ModelParams.from_tensors([t.copy() for t in self.tensors()])


def param_shapes(cfg):
    shapes = []
    c_in = cfg.input_channels
    for c, (kh, kw) in zip(cfg.conv_channels, cfg.kernel):
        shapes += [(c, c_in, kh, kw), (c,)]
        c_in = c
    for d in cfg.flat_dims():
        shapes += [(d, cfg.fc_dim), (cfg.fc_dim,)]
    for _ in range(NUM_STAGES):
        shapes += [(cfg.fc_dim, cfg.num_identities), (cfg.num_identities,)]
    return shapes


def init_params(cfg, rng):
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    cfg.validate()
    ts = []
    for shape in param_shapes(cfg):
        if len(shape) == 1:
            ts.append(np.zeros(shape, dtype=nm.DTYPE))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        ts.append((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(nm.DTYPE))
    return ModelParams.from_tensors(ts)


def center_biases(params, cfg, images):
    """Data-dependent bias init: every conv channel and FC unit starts at median zero.

    Stage by stage, each bias is shifted by minus the median of its
    pre-activation over ``images`` (all positions for conv channels), so
    every unit is active on about half of its inputs. Returns new params.
    """
    p = params.copy()
    h = np.asarray(images).astype(p.conv_w[0].dtype, copy=False)
    for n in range(NUM_STAGES):
        pad = (p.conv_w[n].shape[2] - 1) // 2
        z, _ = nm.conv2d(h, p.conv_w[n], p.conv_b[n], stride=1, pad=pad)
        p.conv_b[n] -= np.median(z, axis=(0, 2, 3)).astype(p.conv_b[n].dtype)
        z, _ = nm.conv2d(h, p.conv_w[n], p.conv_b[n], stride=1, pad=pad)
        h, _ = nm.maxpool2(nm.relu(z)[0])
        fz, _ = nm.affine(h.reshape(len(h), -1), p.fc_w[n], p.fc_b[n])
        p.fc_b[n] -= np.median(fz, axis=0).astype(p.fc_b[n].dtype)
    return p


@dataclass
class BranchOutputs:
    fc: list
    logits: list
    pooled: list
    cache: dict = field(default=None, repr=False)


def forward(params, cfg, batch, keep_cache=True):
    batch = np.asarray(batch)
    expect = (cfg.input_channels, *cfg.input_hw)
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise ShapeError(f"batch shape {batch.shape} does not match [N, {expect[0]}, {expect[1]}, {expect[2]}]")
    dtype = params.conv_w[0].dtype
    h = batch.astype(dtype, copy=False)
    stages, branches = [], []
    fcs, logits, pooled = [], [], []
    for n in range(NUM_STAGES):
        kh = params.conv_w[n].shape[2]
        z, conv_ctx = nm.conv2d(h, params.conv_w[n], params.conv_b[n], stride=1, pad=(kh - 1) // 2)
        a, relu_mask = nm.relu(z)
        h, pool_ctx = nm.maxpool2(a)
        stages.append((conv_ctx, relu_mask, pool_ctx))
        pooled.append(h)
        flat = h.reshape(h.shape[0], -1)
        fz, fc_ctx = nm.affine(flat, params.fc_w[n], params.fc_b[n])
        f, fc_mask = nm.relu(fz)
        lg, cls_ctx = nm.affine(f, params.cls_w[n], params.cls_b[n])
        branches.append((fc_ctx, fc_mask, cls_ctx))
        fcs.append(f)
        logits.append(lg)
    cache = {"stages": stages, "branches": branches} if keep_cache else None
    return BranchOutputs(fcs, logits, pooled, cache)


def backward(params, outs, d_fc, d_logits):
    """Gradients of all parameters, ordered as ``params.tensors()``.

    ``d_fc[n]`` / ``d_logits[n]`` may be None for branches without a signal.
    """
    stages, branches = outs.cache["stages"], outs.cache["branches"]
    g_conv = [None] * NUM_STAGES
    g_fc = [None] * NUM_STAGES
    g_cls = [None] * NUM_STAGES
    d_pool_from_fc = []
    for n in range(NUM_STAGES):
        fc_ctx, fc_mask, cls_ctx = branches[n]
        d_f = np.zeros_like(outs.fc[n]) if d_fc[n] is None else np.array(d_fc[n], dtype=outs.fc[n].dtype)
        if d_logits[n] is not None:
            d_f_cls, dwc, dbc = nm.affine_backward(d_logits[n], cls_ctx)
            d_f += d_f_cls
        else:
            dwc, dbc = np.zeros_like(params.cls_w[n]), np.zeros_like(params.cls_b[n])
        g_cls[n] = (dwc, dbc)
        d_fz = nm.relu_backward(d_f, fc_mask)
        d_flat, dwf, dbf = nm.affine_backward(d_fz, fc_ctx)
        g_fc[n] = (dwf, dbf)
        d_pool_from_fc.append(d_flat.reshape(outs.pooled[n].shape))
    d_h = None
    for n in reversed(range(NUM_STAGES)):
        conv_ctx, relu_mask, pool_ctx = stages[n]
        d_pool = d_pool_from_fc[n] if d_h is None else d_pool_from_fc[n] + d_h
        d_a = nm.maxpool2_backward(d_pool, pool_ctx)
        d_z = nm.relu_backward(d_a, relu_mask)
        d_h, dw, db = nm.conv2d_backward(d_z, conv_ctx)
        g_conv[n] = (dw, db)
    grads = []
    for group in (g_conv, g_fc, g_cls):
        for dw, db in group:
            grads += [dw, db]
    return grads


def hflip(images):
    """Reverse column order of ``[..., H, W]`` arrays."""
    return np.ascontiguousarray(np.asarray(images)[..., ::-1])


def extract_features(params, cfg, images, layer=4, with_flip=False, chunk=256):
    """FC-``layer`` activations for one image ``[C,H,W]`` or a batch ``[N,C,H,W]``.

    With ``with_flip`` the result is ``[FC(x) | FC(hflip(x))]``.
    """
    if layer not in (1, 2, 3, 4):
        raise ArgumentError(f"layer must be 1..4, got {layer}")
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    feats = []
    for s in range(0, len(images), chunk):
        part = images[s:s + chunk]
        f = forward(params, cfg, part, keep_cache=False).fc[layer - 1]
        if with_flip:
            f = np.concatenate([f, forward(params, cfg, hflip(part), keep_cache=False).fc[layer - 1]], axis=1)
        feats.append(f)
    out = np.concatenate(feats, axis=0) if feats else np.zeros((0, cfg.fc_dim * (2 if with_flip else 1)), nm.DTYPE)
    return out[0] if single else out


def extract_all_layers(params, cfg, images, chunk=256):
    """FC-1..4 activations for a batch in a single trunk pass per chunk."""
    layers = [[] for _ in range(NUM_STAGES)]
    for s in range(0, len(images), chunk):
        outs = forward(params, cfg, images[s:s + chunk], keep_cache=False)
        for n in range(NUM_STAGES):
            layers[n].append(outs.fc[n])
    return [np.concatenate(l, axis=0) for l in layers]
