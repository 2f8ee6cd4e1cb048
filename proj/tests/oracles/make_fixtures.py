#!/usr/bin/env python3
"""Generate STT1 oracle fixtures for the layer kernels.

Each case is computed with plain numpy loops (no ML framework) and written as
little-endian STT1 blobs plus a manifest.json describing op, parameters,
inputs, and expected output. Run from the repository root:

    python3 tests/oracles/make_fixtures.py fixtures
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_stt(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(b"STT1")
        f.write(struct.pack("<I", arr.ndim))
        for e in arr.shape:
            f.write(struct.pack("<I", e))
        f.write(struct.pack("<B", 1))
        f.write(arr.tobytes())


def conv2d(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    win = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = b[o] + np.sum(win * w[o])
    return out


def conv_transpose2d(x, w, b, stride):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    out = np.zeros((B, O, (H - 1) * stride + k, (W - 1) * stride + k))
    for n in range(B):
        for o in range(O):
            out[n, o] += b[o]
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        out[n, o, i * stride:i * stride + k, j * stride:j * stride + k] += x[n, c, i, j] * w[o, c]
    return out


def maxpool(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2))
    for i in range(H // 2):
        for j in range(W // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def batchnorm(x, gamma, beta, eps):
    m = x.mean(axis=(0, 2, 3), keepdims=True)
    v = ((x - m) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    return gamma.reshape(1, -1, 1, 1) * (x - m) / np.sqrt(v + eps) + beta.reshape(1, -1, 1, 1)


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240611)
    cases = []

    def emit(name, op, params, inputs, expected):
        files = []
        for i, arr in enumerate(inputs):
            fn = f"{name}_in{i}.stt"
            write_stt(out / fn, arr)
            files.append(fn)
        write_stt(out / f"{name}_out.stt", expected)
        cases.append({"name": name, "op": op, "params": params, "inputs": files, "expected": f"{name}_out.stt"})

    for idx, (B, Cin, H, W, Cout, k, s, p) in enumerate([
        (1, 2, 5, 5, 3, 3, 1, 1), (2, 3, 7, 6, 2, 3, 2, 1), (1, 4, 9, 9, 4, 1, 1, 0),
        (2, 1, 8, 8, 5, 3, 1, 0), (1, 3, 6, 9, 2, 1, 2, 1), (2, 4, 9, 8, 3, 3, 2, 0),
    ]):
        x = rng.standard_normal((B, Cin, H, W))
        w = rng.standard_normal((Cout, Cin, k, k))
        b = rng.standard_normal(Cout)
        emit(f"conv2d_{idx}", "conv2d", {"stride": s, "padding": p}, [x, w, b], conv2d(x, w, b, s, p))

    for idx, (B, Cin, H, W, Cout) in enumerate([(1, 4, 3, 3, 2), (2, 3, 4, 5, 3), (1, 8, 2, 2, 4)]):
        x = rng.standard_normal((B, Cin, H, W))
        w = rng.standard_normal((Cout, Cin, 2, 2))
        b = rng.standard_normal(Cout)
        emit(f"convt_{idx}", "conv_transpose2d", {"stride": 2}, [x, w, b], conv_transpose2d(x, w, b, 2))

    for idx, shape in enumerate([(1, 3, 8, 8), (2, 2, 4, 6)]):
        x = rng.standard_normal(shape)
        emit(f"maxpool_{idx}", "maxpool2x2", {}, [x], maxpool(x))

    for idx, shape in enumerate([(2, 2, 3, 3), (3, 4, 5, 2)]):
        x = rng.standard_normal(shape) * 3 + 1
        g = rng.standard_normal(shape[1])
        b = rng.standard_normal(shape[1])
        emit(f"batchnorm_{idx}", "batchnorm2d_train", {"epsilon": 1e-5}, [x, g, b], batchnorm(x, g, b, 1e-5))

    with open(out / "manifest.json", "w") as f:
        json.dump({"format": "STT1", "generator": "tests/oracles/make_fixtures.py", "cases": cases}, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
