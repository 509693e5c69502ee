import json
import math
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from trnet.archspec import load_arch
from trnet.costs import arch_cost
from trnet.ring import load_trm, save_trm
from trnet.train import (
    Adam,
    Dataset,
    SGDMomentum,
    TrainConfig,
    build_network,
    load_mnist,
    load_mnist_idx,
    load_mnist_images,
    load_mnist_labels,
    load_network,
    make_optimizer,
    save_network,
    synthetic_blobs,
    train,
)

TINY_FC = {
    "name": "tinyfc",
    "layers": [
        {"kind": "fc", "name": "fc1", "in_shape": [2, 3], "out_shape": [4]},
        {"kind": "fc", "name": "fc2", "in_shape": [4], "out_shape": [3]},
    ],
}

TINY_CONV = {
    "name": "tinyconv",
    "layers": [
        {"kind": "conv", "name": "c1", "height": 8, "width": 8, "filter": 3,
         "stride": 1, "padding": 1, "in_shape": [], "out_shape": [2, 2]},
        {"kind": "maxpool", "name": "p1"},
        {"kind": "fc", "name": "fc", "in_shape": [4, 4, 4], "out_shape": [3]},
    ],
}


def _fc_blobs(n_per_class=12, seed=5, noise_stream=0):
    return synthetic_blobs(3, n_per_class, (2, 3), 8.0, seed=seed,
                           noise_stream=noise_stream)


# --- IDX files ---------------------------------------------------------------

def _idx_images_bytes(count, rows, cols, pixels):
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + bytes(pixels)


def _idx_labels_bytes(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def test_idx_image_parsing(tmp_path):
    pixels = list(range(2 * 2 * 3))
    path = tmp_path / "imgs"
    path.write_bytes(_idx_images_bytes(2, 2, 3, pixels))
    imgs = load_mnist_images(path)
    assert imgs.shape == (2, 2, 3, 1)
    assert imgs.dtype == np.float64
    assert_allclose(imgs.reshape(-1), np.array(pixels) / 255.0, rtol=0, atol=0)


def test_idx_label_parsing(tmp_path):
    path = tmp_path / "labels"
    path.write_bytes(_idx_labels_bytes([0, 7, 3]))
    labels = load_mnist_labels(path)
    assert labels.dtype == np.int64
    assert_array_equal(labels, [0, 7, 3])


def test_idx_error_paths(tmp_path):
    short = tmp_path / "short"
    short.write_bytes(b"\x00" * 10)
    with pytest.raises(ValueError, match="truncated"):
        load_mnist_images(short)
    bad_magic = tmp_path / "bad"
    bad_magic.write_bytes(struct.pack(">IIII", 0xdead, 1, 2, 2) + bytes(4))
    with pytest.raises(ValueError, match="bad magic"):
        load_mnist_images(bad_magic)
    wrong_len = tmp_path / "len"
    wrong_len.write_bytes(_idx_images_bytes(2, 2, 2, list(range(4))))
    with pytest.raises(ValueError, match="expected"):
        load_mnist_images(wrong_len)
    lab = tmp_path / "lab"
    lab.write_bytes(struct.pack(">II", 0x00000801, 5) + bytes(3))
    with pytest.raises(ValueError, match="expected"):
        load_mnist_labels(lab)
    imgs = tmp_path / "ok_imgs"
    imgs.write_bytes(_idx_images_bytes(2, 2, 2, list(range(8))))
    one_label = tmp_path / "one_label"
    one_label.write_bytes(_idx_labels_bytes([1]))
    with pytest.raises(ValueError, match="count mismatch"):
        load_mnist_idx(imgs, one_label)


def test_mnist_directory_loader(tmp_path):
    for stem, n in (("train", 3), ("t10k", 2)):
        (tmp_path / f"{stem}-images-idx3-ubyte").write_bytes(
            _idx_images_bytes(n, 2, 2, list(range(4 * n))))
        (tmp_path / f"{stem}-labels-idx1-ubyte").write_bytes(
            _idx_labels_bytes(list(range(n))))
    tr = load_mnist(tmp_path, "train")
    te = load_mnist(tmp_path, "test")
    assert tr.n == 3 and te.n == 2
    assert tr.name == "mnist-train"
    with pytest.raises(ValueError, match="split"):
        load_mnist(tmp_path, "validation")


# --- synthetic blobs ----------------------------------------------------------

def test_blobs_geometry_and_determinism():
    ds = synthetic_blobs(4, 500, (8,), 6.0, seed=3)
    assert ds.features.shape == (2000, 8)
    assert_array_equal(np.bincount(ds.labels), [500] * 4)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(4)])
    for a in range(4):
        for b in range(a + 1, 4):
            dist = np.linalg.norm(means[a] - means[b])
            assert abs(dist - 6.0) < 0.3
    again = synthetic_blobs(4, 500, (8,), 6.0, seed=3)
    assert_array_equal(ds.features, again.features)
    # a different noise stream shares the class geometry, not the samples
    other = synthetic_blobs(4, 500, (8,), 6.0, seed=3, noise_stream=1)
    assert not np.array_equal(ds.features, other.features)
    other_means = np.stack([other.features[other.labels == c].mean(axis=0)
                            for c in range(4)])
    assert np.linalg.norm(means - other_means) < 1.0


def test_blobs_validation():
    with pytest.raises(ValueError, match=">= 1"):
        synthetic_blobs(0, 5, (4,), 1.0)
    with pytest.raises(ValueError, match="feature dims"):
        synthetic_blobs(5, 5, (2, 2), 1.0)


def test_dataset_validation():
    with pytest.raises(ValueError, match="rows vs"):
        Dataset(features=np.zeros((3, 2)), labels=np.zeros(2, dtype=int))


# --- optimizers ----------------------------------------------------------------

def test_sgd_momentum_scripted():
    p = np.array([1.0, -2.0])
    var = type("P", (), {})()  # any hashable object with .value works
    var.value = p.copy()
    opt = SGDMomentum(momentum=0.9)
    grads_seq = [np.array([0.5, -1.0]), np.array([0.25, 0.5]),
                 np.array([-1.0, 0.125])]
    want, v = p.copy(), np.zeros(2)
    for g in grads_seq:
        opt.step([var], {var: g}, lr=0.1)
        v = 0.9 * v + g
        want = want - 0.1 * v
        assert_allclose(var.value, want, rtol=1e-15, atol=0)


def test_adam_scripted():
    var = type("P", (), {})()
    var.value = np.array([1.0, -2.0])
    opt = Adam()
    grads_seq = [np.array([0.5, -1.0]), np.array([0.25, 0.5]),
                 np.array([-1.0, 0.125])]
    want = var.value.copy()
    m, v = 0.0, 0.0
    for t, g in enumerate(grads_seq, start=1):
        opt.step([var], {var: g}, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * (g * g)
        m_hat = m / (1.0 - 0.9 ** t)
        v_hat = v / (1.0 - 0.999 ** t)
        want = want - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert_allclose(var.value, want, rtol=1e-14, atol=0)


def test_optimizer_skips_gradient_free_params():
    var = type("P", (), {})()
    var.value = np.array([3.0])
    for opt in (SGDMomentum(), Adam()):
        opt.step([var], {}, lr=0.5)
        assert_array_equal(var.value, [3.0])


def test_make_optimizer():
    assert isinstance(make_optimizer("adam"), Adam)
    assert isinstance(make_optimizer("sgd_momentum", momentum=0.5), SGDMomentum)
    with pytest.raises(ValueError, match="unknown optimizer"):
        make_optimizer("lbfgs")


# --- network building -----------------------------------------------------------

def test_param_count_matches_cost_model():
    arch = load_arch(TINY_FC)
    cost = arch_cost(arch)
    for rank in (1, 2, 5):
        net = build_network(arch, rank=rank, seed=0)
        assert net.param_count() == cost.total_params_tr(rank)
    dense = build_network(arch, compressed=False)
    assert dense.param_count() == cost.total_params_uncompressed


def test_build_network_refusals():
    with pytest.raises(ValueError, match="needs a rank"):
        build_network(load_arch(TINY_FC))
    pool3 = {"name": "p", "layers": [{"kind": "maxpool", "name": "p", "pool": 3}]}
    with pytest.raises(ValueError, match="2x2"):
        build_network(load_arch(pool3), rank=2)
    block = {"name": "b", "layers": [
        {"kind": "resblock", "name": "r", "height": 8, "width": 8, "filter": 3,
         "padding": 1, "in_shape": [2], "out_shape": [2]}]}
    with pytest.raises(NotImplementedError, match="resblock"):
        build_network(load_arch(block), rank=2)


def test_build_network_deterministic_init():
    arch = load_arch(TINY_FC)
    a = build_network(arch, rank=3, seed=9)
    b = build_network(arch, rank=3, seed=9)
    c = build_network(arch, rank=3, seed=10)
    for pa, pb in zip(a.params(), b.params()):
        assert_array_equal(pa.value, pb.value)
    assert any(not np.array_equal(pa.value, pc.value)
               for pa, pc in zip(a.params(), c.params()))


def test_conv_network_forward_shapes_and_training_step():
    arch = load_arch(TINY_CONV)
    net = build_network(arch, rank=2, seed=1)
    ds = synthetic_blobs(3, 6, (8, 8, 1), 10.0, seed=1)
    logits = net.forward(ds.features[:4]).value
    assert logits.shape == (4, 3)
    cfg = TrainConfig(arch=arch, rank=2, epochs=1, batch_size=6, seed=1,
                      optimizer="sgd_momentum", lr=0.05)
    log = train(cfg, ds)
    assert not log.aborted
    assert len(log.rows) == 2
    assert log.rows[1]["loss"] <= log.rows[0]["loss"] * 1.5  # moved, not blown up


# --- config ---------------------------------------------------------------------

def test_train_config_from_json(tmp_path):
    doc = {"arch": TINY_FC, "rank": 4, "optimizer": "sgd_momentum", "lr": 0.2,
           "epochs": 7, "batch_size": 16, "lr_schedule": [[4, 0.02], [6, 0.002]],
           "seed": 11, "dataset": {"kind": "blobs"}}
    cfg = TrainConfig.from_json(doc)
    assert cfg.arch.name == "tinyfc"
    assert (cfg.rank, cfg.lr, cfg.epochs, cfg.seed) == (4, 0.2, 7, 11)
    assert cfg.lr_at(1) == 0.2
    assert cfg.lr_at(4) == 0.02
    assert cfg.lr_at(6) == 0.002
    assert cfg.lr_at(99) == 0.002
    assert TrainConfig.from_json(doc, seed_override=5).seed == 5
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    assert TrainConfig.from_json(path).echo() == cfg.echo()
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_json({**doc, "warmup": 3})
    with pytest.raises(ValueError, match="exactly one"):
        TrainConfig.from_json({"rank": 2})
    with pytest.raises(ValueError, match="exactly one"):
        TrainConfig.from_json({**doc, "arch_file": "x.json"})


def test_train_config_resolves_arch_file(tmp_path):
    # a bare bundled name works from any working directory
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"arch_file": "lenet300.json", "rank": 3}))
    cfg = TrainConfig.from_json(cfg_path)
    assert cfg.arch.name == "lenet300"

    # a relative path is taken next to the config file itself
    (tmp_path / "mine.json").write_text(json.dumps(TINY_FC))
    cfg_path.write_text(json.dumps({"arch_file": "mine.json"}))
    assert TrainConfig.from_json(cfg_path).arch.name == "tinyfc"

    # unresolvable names still fail, reporting what the config said
    cfg_path.write_text(json.dumps({"arch_file": "no-such-arch.json"}))
    with pytest.raises(OSError, match="no-such-arch.json"):
        TrainConfig.from_json(cfg_path)


# --- the loop --------------------------------------------------------------------

def test_training_reduces_error_and_is_deterministic(tmp_path):
    arch = load_arch(TINY_FC)
    ds = _fc_blobs()
    test_ds = _fc_blobs(noise_stream=1)
    cfg = TrainConfig(arch=arch, rank=3, epochs=4, batch_size=12, seed=2, lr=0.01)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    log1 = train(cfg, ds, test_ds, out_dir=out1, timestamps=False)
    log2 = train(cfg, ds, test_ds, out_dir=out2, timestamps=False)
    assert len(log1.rows) == 5          # epoch 0 plus four training epochs
    assert log1.final_train_error < log1.rows[0]["train_error"]
    for p1, p2 in zip(log1.network.params(), log2.network.params()):
        assert_array_equal(p1.value, p2.value)
    for name in ("log.csv", "model.trm", "config.echo.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    header = (out1 / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,train_error,test_error,loss,wall_time"
    echo = json.loads((out1 / "config.echo.json").read_text())
    assert echo["arch"] == "tinyfc" and echo["rank"] == 3


def test_zero_learning_rate_leaves_weights_bit_identical():
    arch = load_arch(TINY_FC)
    ds = _fc_blobs()
    cfg = TrainConfig(arch=arch, rank=2, epochs=2, batch_size=9, seed=7, lr=0.0)
    log = train(cfg, ds)
    fresh = build_network(arch, rank=2, seed=7)
    for trained, init in zip(log.network.params(), fresh.params()):
        assert_array_equal(trained.value, init.value)
    errors = [r["train_error"] for r in log.rows]
    assert errors == [errors[0]] * len(errors)


def test_zero_epochs_gives_only_the_untrained_row(tmp_path):
    arch = load_arch(TINY_FC)
    ds = _fc_blobs()
    cfg = TrainConfig(arch=arch, rank=2, epochs=0, seed=3)
    log = train(cfg, ds, out_dir=tmp_path, timestamps=False)
    assert len(log.rows) == 1
    assert log.rows[0]["epoch"] == 0
    assert not log.aborted
    assert (tmp_path / "log.csv").read_text().count("\n") == 2  # header + row


def test_non_finite_loss_aborts_and_rolls_back(tmp_path):
    arch = load_arch(TINY_FC)
    ds = _fc_blobs()
    ds.features[0, 0, 0] = np.nan
    cfg = TrainConfig(arch=arch, rank=2, epochs=5, batch_size=12, seed=4, lr=0.01)
    log = train(cfg, ds, out_dir=tmp_path)
    assert log.aborted
    assert log.rows[-1]["epoch"] == 1
    assert not math.isfinite(log.rows[-1]["loss"])
    # every step of the broken epoch is rolled back to the last checkpoint
    fresh = build_network(arch, rank=2, seed=4)
    for trained, init in zip(log.network.params(), fresh.params()):
        assert_array_equal(trained.value, init.value)
    assert (tmp_path / "model.trm").exists()


def test_mean_loss_is_batch_size_invariant():
    arch = load_arch(TINY_FC)
    net = build_network(arch, rank=2, seed=8)
    ds = _fc_blobs(n_per_class=7)
    full = net.mean_loss(ds, batch=1024)
    small = net.mean_loss(ds, batch=4)
    assert_allclose(small, full, rtol=1e-12)


# --- persistence ------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    arch = load_arch(TINY_FC)
    ds = _fc_blobs()
    cfg = TrainConfig(arch=arch, rank=3, epochs=1, batch_size=12, seed=6, lr=0.01)
    log = train(cfg, ds, out_dir=tmp_path, timestamps=False)
    net = load_network(tmp_path / "model.trm")
    assert net.rank == 3 and net.compressed
    for loaded, trained in zip(net.params(), log.network.params()):
        assert loaded.name == trained.name
        assert_array_equal(loaded.value, trained.value)
    x = ds.features[:5]
    assert_array_equal(net.forward(x).value, log.network.forward(x).value)
    sidecar = json.loads((tmp_path / "model.json").read_text())
    assert sidecar["arch_name"] == "tinyfc"
    assert sidecar["rank"] == 3


def test_load_network_error_paths(tmp_path):
    arch = load_arch(TINY_FC)
    net = build_network(arch, rank=2, seed=0)
    save_network(net, tmp_path / "model.trm")
    records = load_trm(tmp_path / "model.trm")
    save_trm(tmp_path / "model.trm", records[:-1])
    with pytest.raises(ValueError, match="missing parameter"):
        load_network(tmp_path / "model.trm")
    save_trm(tmp_path / "model.trm", records)
    sidecar = json.loads((tmp_path / "model.json").read_text())
    sidecar["rank"] = 3
    (tmp_path / "model.json").write_text(json.dumps(sidecar))
    with pytest.raises(ValueError, match="has shape"):
        load_network(tmp_path / "model.trm")
