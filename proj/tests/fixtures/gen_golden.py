"""Writes tiny reference bundles and float64 numpy activations in VITBIND1 format.

Run from this directory: python3 gen_golden.py
"""
import json
import math
import struct

import numpy as np


def write_archive(path, tensors, metadata):
    entries, payload, offset = [], b"", 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        payload += data
        offset += len(data)
    header = json.dumps({"version": 1, "metadata": metadata, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(b"VITBIND1" + struct.pack("<Q", len(header)) + header + payload)


def layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def attention(x, p, heads):
    t, d = x.shape
    dh = d // heads
    qkv = x @ p["qkv_w"] + p["qkv_b"]
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        logits -= logits.max(-1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(-1, keepdims=True)
        weights.append(a)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, 1) @ p["proj_w"] + p["proj_b"], np.stack(weights)


def block(x, p, arch):
    act = gelu if arch["activation"] == "gelu" else (lambda z: np.maximum(z, 0))
    ffn = lambda z: act(z @ p["fc1_w"] + p["fc1_b"]) @ p["fc2_w"] + p["fc2_b"]
    ls1 = p.get("ls1", 1.0)
    ls2 = p.get("ls2", 1.0)
    eps = arch["layer_norm_eps"]
    if arch["norm_placement"] == "pre":
        a, w = attention(layer_norm(x, p["n1g"], p["n1b"], eps), p, arch["heads"])
        s = x + ls1 * a
        return s + ls2 * ffn(layer_norm(s, p["n2g"], p["n2b"], eps)), s, w
    a, w = attention(x, p, arch["heads"])
    s = layer_norm(x + ls1 * a, p["n1g"], p["n1b"], eps)
    return layer_norm(s + ls2 * ffn(s), p["n2g"], p["n2b"], eps), s, w


def make(name, arch, seed, dino_out=0):
    rng = np.random.default_rng(seed)
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    d, m = arch["width"], arch["mlp_hidden"]
    pdim = arch["channels"] * arch["patch_size"] ** 2
    n = arch["grid_side"] ** 2
    t = n + (1 if arch["class_token"] else 0)
    tensors = []

    def randn(tname, shape, std):
        a = f32(rng.normal(0, std, shape))
        tensors.append((tname, a))
        return a

    def affine(prefix):
        g = randn(prefix + ".weight", (d,), 0.1) + 1.0
        tensors[-1] = (prefix + ".weight", g)
        return g, randn(prefix + ".bias", (d,), 0.1)

    pw = randn("patch_embed.weight", (pdim, d), 1 / math.sqrt(pdim))
    pb = randn("patch_embed.bias", (d,), 0.05)
    pos = randn("pos_embed", (t, d), 0.5)
    cls = randn("cls_token", (d,), 0.5) if arch["class_token"] else None
    layers = []
    for i in range(arch["depth"]):
        p = {}
        pre = f"blocks.{i}."
        p["n1g"], p["n1b"] = affine(pre + "norm1")
        p["qkv_w"] = randn(pre + "attn.qkv.weight", (d, 3 * d), 1 / math.sqrt(d))
        p["qkv_b"] = randn(pre + "attn.qkv.bias", (3 * d,), 0.05)
        p["proj_w"] = randn(pre + "attn.proj.weight", (d, d), 1 / math.sqrt(d))
        p["proj_b"] = randn(pre + "attn.proj.bias", (d,), 0.05)
        p["n2g"], p["n2b"] = affine(pre + "norm2")
        p["fc1_w"] = randn(pre + "mlp.fc1.weight", (d, m), 1 / math.sqrt(d))
        p["fc1_b"] = randn(pre + "mlp.fc1.bias", (m,), 0.05)
        p["fc2_w"] = randn(pre + "mlp.fc2.weight", (m, d), 1 / math.sqrt(m))
        p["fc2_b"] = randn(pre + "mlp.fc2.bias", (d,), 0.05)
        if arch["layer_scale"]:
            p["ls1"] = randn(pre + "ls1", (d,), 0.3)
            p["ls2"] = randn(pre + "ls2", (d,), 0.3)
        layers.append(p)
    fin = affine("norm") if arch["final_norm"] else None
    meta = {"kind": "model_bundle", "architecture": arch}
    head = None
    if dino_out:
        w0 = randn("dino_head.mlp.0.weight", (d, 2 * d), 1 / math.sqrt(d))
        b0 = randn("dino_head.mlp.0.bias", (2 * d,), 0.05)
        w1 = randn("dino_head.mlp.1.weight", (2 * d, 4), 1 / math.sqrt(2 * d))
        b1 = randn("dino_head.mlp.1.bias", (4,), 0.05)
        last = randn("dino_head.last.weight", (4, dino_out), 1.0)
        randn("dino_head.center", (dino_out,), 0.1)
        head = (w0, b0, w1, b1, last)
        meta["dino"] = {"head_layers": 2, "student_temp": 0.1, "teacher_temp": 0.04}
    write_archive(f"{name}_bundle.vbt", tensors, meta)

    patches = f32(rng.normal(0, 1, (n, pdim)))
    x = patches @ pw + pb
    if arch["class_token"]:
        x = np.concatenate([cls[None, :], x], 0)
    x = x + pos
    golden = [("input_patches", patches), ("embeddings", x)]
    for i, p in enumerate(layers):
        x, s, w = block(x, p, arch)
        golden += [(f"h/{i}", x), (f"s/{i}", s), (f"attn/{i}", w)]
    if head:
        z = layer_norm(x, fin[0], fin[1], arch["layer_norm_eps"]) if fin else x
        z = gelu(z[0] @ head[0] + head[1]) @ head[2] + head[3]
        z = z / np.linalg.norm(z)
        golden.append(("dino_logits", z @ head[4]))
    write_archive(f"{name}_golden.vbt", golden, {"kind": "golden", "bundle": f"{name}_bundle.vbt"})


BASE = {"depth": 3, "width": 12, "heads": 3, "patch_size": 2, "grid_side": 3, "channels": 3, "mlp_hidden": 24,
        "class_token": True, "layer_norm_eps": 1e-6}

if __name__ == "__main__":
    make("prenorm", dict(BASE, norm_placement="pre", activation="gelu", layer_scale=True, final_norm=True), 11, dino_out=6)
    make("postnorm", dict(BASE, norm_placement="post", activation="relu", layer_scale=False, final_norm=False,
                          class_token=False), 12)
