import hashlib
import io
import struct

import numpy as np
import pytest

from did2lab import facegen
from did2lab import model as mdl
from did2lab import trainer
from did2lab.errors import CheckpointError, ConfigError
from did2lab.numerics import make_rng
from did2lab.supervision import VerifConfig

# sha256 of the checkpoint of init_params(ARCH, make_rng(0)); pins the byte layout and the init stream
INIT_SHA256 = "8cf7792c0ff7953a389bb779ac263b6d8412bb3d269f5a06fff6263aeb517cb9"
ARCH = mdl.ArchConfig(input_hw=(16, 16), conv_channels=(2, 2, 2, 2), fc_dim=4, num_identities=4, seed=3)


@pytest.fixture(scope="module")
def toy():
    ds = facegen.gen_dataset(num_ids=6, imgs_per_id=4, hw=16, seed=1, margin=1.0, split=(4, 2, 0))
    return ds.split("train"), ds.split("val")


def _cfg(**kw):
    base = dict(batch_size=8, epochs=2, val_pairs=6, positives_per_batch=2, negatives_per_batch=2, seed=5,
                verif=VerifConfig(lambda_ve=0.1))
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_one_epoch_log(toy):
    tr, va = toy
    _, tlog = trainer.train(_cfg(epochs=1), ARCH, tr, va)
    assert len(tlog.rows) == 1
    assert np.isfinite(tlog.rows[0]["train_loss"])
    buf = io.StringIO()
    tlog.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(trainer.TrainLog.COLUMNS) and len(lines) == 2


def test_training_deterministic(toy):
    tr, va = toy
    p1, l1 = trainer.train(_cfg(), ARCH, tr, va)
    p2, l2 = trainer.train(_cfg(), ARCH, tr, va)
    assert trainer.checkpoint_bytes(p1, ARCH) == trainer.checkpoint_bytes(p2, ARCH)
    assert l1.rows == l2.rows


def test_center_init_toggle(toy):
    tr, va = toy
    p_on, _ = trainer.train(_cfg(epochs=1), ARCH, tr, va)
    p_off, log_off = trainer.train(_cfg(epochs=1, center_init=False), ARCH, tr, va)
    assert np.isfinite(log_off.rows[0]["train_loss"])
    assert trainer.checkpoint_bytes(p_on, ARCH) != trainer.checkpoint_bytes(p_off, ARCH)


def test_lr_never_increases_and_decays_on_patience(toy):
    tr, va = toy
    _, tlog = trainer.train(_cfg(epochs=6, patience=1, lr_decay=0.5), ARCH, tr, va)
    lr, val = tlog.column("lr"), tlog.column("val_acc")
    assert np.all(np.diff(lr) <= 0)
    best = -1.0
    for k in range(len(val) - 1):
        improved = val[k] > best
        best = max(best, val[k])
        assert lr[k + 1] == (lr[k] if improved else lr[k] * 0.5)


def test_checkpoint_callback(toy):
    tr, va = toy
    seen = []
    trainer.train(_cfg(epochs=3, checkpoint_every=2), ARCH, tr, va, on_checkpoint=lambda e, p: seen.append(e))
    assert seen == [2]


def test_train_errors(toy):
    tr, va = toy
    with pytest.raises(ConfigError):
        trainer.train(_cfg(), ARCH, tr, tr)
    with pytest.raises(ConfigError):
        trainer.train(_cfg(batch_size=1), ARCH, tr, va)
    with pytest.raises(ConfigError):
        trainer.train(_cfg(lr_decay=0.0), ARCH, tr, va)
    with pytest.raises(ConfigError):
        trainer.train(_cfg(), mdl.ArchConfig(input_hw=(16, 16), conv_channels=(2,) * 4, num_identities=5), tr, va)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = mdl.init_params(ARCH, make_rng(0))
    for t in p.tensors():
        t += make_rng(1).normal(size=t.shape).astype(t.dtype)
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(p, ARCH, str(path))
    q, arch = trainer.load_checkpoint(str(path))
    assert arch == ARCH
    for a, b in zip(p.tensors(), q.tensors()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    x = make_rng(2).random((3, 1, 16, 16)).astype(np.float32)
    f1 = mdl.extract_features(p, ARCH, x, layer=4)
    f2 = mdl.extract_features(q, arch, x, layer=4)
    assert f1.tobytes() == f2.tobytes()
    assert trainer.checkpoint_bytes(q, arch) == path.read_bytes()


def test_checkpoint_layout():
    p = mdl.init_params(ARCH, make_rng(0))
    data = trainer.checkpoint_bytes(p, ARCH)
    assert data[:4] == b"DID2"
    version, hlen = struct.unpack("<II", data[4:12])
    assert version == 1
    header = data[12:12 + hlen].decode()
    assert "conv_channels=2,2,2,2" in header
    pos = 12 + hlen
    (rank,) = struct.unpack("<I", data[pos:pos + 4])
    assert rank == 4 and struct.unpack("<4I", data[pos + 4:pos + 20]) == (2, 1, 3, 3)
    first = np.frombuffer(data[pos + 20:pos + 20 + 72], dtype="<f4").reshape(2, 1, 3, 3)
    np.testing.assert_array_equal(first, p.conv_w[0])
    # a fixed init seed gives a fixed file on every platform
    assert hashlib.sha256(data).hexdigest() == INIT_SHA256


@pytest.mark.parametrize("mutate,section", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 99) + d[8:], "version"),
    (lambda d: d[:10], "version"),
    (lambda d: d[:20], "header"),
    (lambda d: d[:-5], "tensor23"),
    (lambda d: d + b"\0", "trailer"),
])
def test_corrupt_checkpoints(mutate, section):
    data = trainer.checkpoint_bytes(mdl.init_params(ARCH, make_rng(0)), ARCH)
    with pytest.raises(CheckpointError) as info:
        trainer.parse_checkpoint(mutate(data))
    assert info.value.section == section


def test_shape_mismatch_names_tensor():
    data = bytearray(trainer.checkpoint_bytes(mdl.init_params(ARCH, make_rng(0)), ARCH))
    hlen = struct.unpack("<I", data[8:12])[0]
    pos = 12 + hlen + 4
    data[pos:pos + 4] = struct.pack("<I", 3)
    with pytest.raises(CheckpointError) as info:
        trainer.parse_checkpoint(bytes(data))
    assert info.value.section == "tensor0"
