"""Smoke test for the voxbox_py extension module.

Run after `maturin develop` (or `pip install --no-build-isolation -e crates/python`):

    python crates/python/python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import voxbox_py as vb


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)


def tensor_and_tape():
    x = vb.Tensor([float(i) for i in range(8)], [1, 1, 2, 2, 2], requires_grad=True)
    w = vb.Tensor([0.5], [1, 1, 1, 1, 1], requires_grad=True)
    b = vb.Tensor([0.25], [1])
    tape = vb.Tape()
    y = tape.conv3d(x, w, b)
    check(y.data == [0.5 * i + 0.25 for i in range(8)], "pointwise conv")
    loss = tape.sum(y)
    tape.backward(loss)
    check(x.grad == [0.5] * 8, "input gradient")
    check(w.grad == [float(sum(range(8)))], "weight gradient")
    check(len(tape) == 2 and tape.recorded_bytes > 0, "tape records two nodes")

    up = vb.Tape(recording=False).interp_trilinear(y, [4, 4, 4])
    check(up.shape == [1, 1, 4, 4, 4] and len(vb.Tape(recording=False)) == 0, "suspended interp")


def partition_round_trip():
    p = vb.Partition([4, 4, 4], 8)
    check(len(p) == 8 and p.cube_extents == [2, 2, 2], "eight cubes")
    vol = vb.Tensor([float(i) for i in range(64)], [1, 1, 4, 4, 4])
    tape = vb.Tape(recording=False)
    back = tape.assemble(tape.disassemble(vol, p), p)
    check(back.data == vol.data, "assemble inverts disassemble")


def loss_and_metrics():
    logits = vb.Tensor([20.0, -20.0, 20.0, -20.0], [1, 1, 1, 2, 2], requires_grad=True)
    gt = vb.Tensor([1.0, 0.0, 1.0, 0.0], [1, 1, 1, 2, 2])
    tape = vb.Tape()
    loss = tape.dice_ce_loss(logits, gt)
    check(loss.item() < 1e-6, "perfect prediction has near-zero loss")
    dsc, iou, vol = vb.overlap_metrics([True, True, False, False], [True, False, False, False])
    check(abs(dsc - 2 / 3) < 1e-12 and abs(iou - 0.5) < 1e-12 and abs(vol - 100.0) < 1e-12, "metrics")


def schedule():
    check(abs(vb.lr_at(0, 1e-4, 5, 100) - 2e-5) < 1e-18, "warmup start")
    check(abs(vb.lr_at(5, 1e-4, 5, 100) - 1e-4) < 1e-18, "warmup end")
    train, val = vb.cv_split(20, 0)
    check(len(train) == 16 and len(val) == 4 and not set(train) & set(val), "5-fold split")


def model_and_checkpoint(tmp):
    m = vb.Model.toy()
    check(m.parameter_count > 0 and m.parameter_names()[0] == "depth_embedding.table", "toy model")
    n = 8
    img = [math.sin(0.3 * i) for i in range(n ** 3)]
    x = vb.Tensor(img, [1, 1, n, n, n])
    mask = m.predict_mask(x, cubes=8)
    check(len(mask) == n ** 3, "mask extents")
    path = os.path.join(tmp, "m.vxt")
    m.save(path)
    other = vb.Model.toy()
    other.load(path)
    check(other.predict_logits(x, cubes=8).data == m.predict_logits(x, cubes=8).data, "checkpoint round trip")


def feature_files(tmp):
    path = os.path.join(tmp, "s0.vxf")
    levels = [([2, 1, 2, 2], [float(k * 8 + i) for i in range(8)]) for k in range(4)]
    checksum = vb.write_features(path, "s0", "smoke", levels)
    f = vb.read_features(path)
    check(f.subject_id == "s0" and f.encoder_tag == "smoke" and f.checksum == checksum, "VXF1 header")
    check([(list(e), d) for e, d in f.levels] == levels, "VXF1 payload")
    with open(path, "r+b") as fh:
        fh.seek(20)
        byte = fh.read(1)
        fh.seek(20)
        fh.write(bytes([byte[0] ^ 0xFF]))
    try:
        vb.read_features(path)
    except vb.VoxboxError as e:
        check("checksum" in str(e), "corruption names the checksum")
    else:
        raise AssertionError("corrupted file accepted")


def selftest():
    checks = vb.selftest()
    check(len(checks) == 5 and all(passed for _, _, passed, _ in checks), "built-in checks pass")


def main():
    tensor_and_tape()
    partition_round_trip()
    loss_and_metrics()
    schedule()
    with tempfile.TemporaryDirectory() as tmp:
        model_and_checkpoint(tmp)
        feature_files(tmp)
    selftest()
    print("smoke test passed")


if __name__ == "__main__":
    main()
    sys.exit(0)
