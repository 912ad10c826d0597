"""Straight-line reimplementation of the eval-mode forward pass.

Reads a checkpoint with its own binary parser and computes logits with
scalar Python loops (no matrix library), as an oracle for the C++ model.

    python3 forward_oracle.py model.ckpt input.json            # print logits
    python3 forward_oracle.py model.ckpt input.json --check golden.json
"""

import argparse
import json
import math
import struct
import sys


def read_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from("<" + fmt, data, off)
        off += struct.calcsize("<" + fmt)
        return vals

    assert data[:8] == b"TURNLMCK", "bad magic"
    off = 8
    (version,) = take("I")
    assert version == 1
    (n,) = take("I")
    config = {}
    for line in data[off:off + n].decode().splitlines():
        if line:
            k, v = line.split("=", 1)
            config[k] = v
    off += n
    (count,) = take("I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("I")
        name = data[off:off + name_len].decode()
        off += name_len
        (rank,) = take("I")
        dims = take("Q" * rank)
        total = 1
        for d in dims:
            total *= d
        flat = take("d" * total)
        rows, cols = dims
        tensors[name] = [list(flat[r * cols:(r + 1) * cols]) for r in range(rows)]
    assert off == len(data), "trailing bytes"
    return config, tensors


def matvec(w, x):
    # w is d_out x d_in
    return [sum(w[o][i] * x[i] for i in range(len(x))) for o in range(len(w))]


def add(a, b):
    return [p + q for p, q in zip(a, b)]


def scale(a, s):
    return [p * s for p in a]


def layer_norm(x, gain, bias):
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    r = 1.0 / math.sqrt(var + 1e-5)
    return [(x[i] - mean) * r * gain[i] + bias[i] for i in range(n)]


def gelu(u):
    return 0.5 * u * (1.0 + math.erf(u / math.sqrt(2.0)))


def forward(config, t, ids, types, positions):
    d = int(config["embed_dim"])
    heads = int(config["num_heads"])
    layers = int(config["num_layers"])
    alpha = float(config["lora_alpha"])
    dh = d // heads
    L = len(ids)

    xs = [add(add(t["embed.word"][ids[i]], t["embed.type"][types[i]]), t["embed.position"][positions[i]])
          for i in range(L)]

    def proj(prefix, name, h):
        y = matvec(t[prefix + name], h)
        a_key = prefix + name + ".lora_a"
        if a_key in t:
            low = matvec(t[a_key], h)
            y = add(y, scale(matvec(t[prefix + name + ".lora_b"], low), alpha))
        return y

    for li in range(layers):
        p = f"layers.{li}."
        h1 = [layer_norm(x, t[p + "norm1.gain"][0], t[p + "norm1.bias"][0]) for x in xs]
        q = [proj(p, "attn.query", h) for h in h1]
        k = [matvec(t[p + "attn.key"], h) for h in h1]
        v = [proj(p, "attn.value", h) for h in h1]
        ctx = [[0.0] * d for _ in range(L)]
        for hd in range(heads):
            cols = range(hd * dh, (hd + 1) * dh)
            for i in range(L):
                scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(i + 1)]
                peak = max(scores)
                w = [math.exp(s - peak) for s in scores]
                z = sum(w)
                for c in cols:
                    ctx[i][c] = sum(w[j] / z * v[j][c] for j in range(i + 1))
        mids = [add(xs[i], matvec(t[p + "attn.output"], ctx[i])) for i in range(L)]
        out = []
        for m in mids:
            h2 = layer_norm(m, t[p + "norm2.gain"][0], t[p + "norm2.bias"][0])
            pre = add(matvec(t[p + "ffn.in"], h2), t[p + "ffn.in_bias"][0])
            act = [gelu(u) for u in pre]
            ffn = add(matvec(t[p + "ffn.out"], act), t[p + "ffn.out_bias"][0])
            out.append(add(m, ffn))
        xs = out

    logits = []
    for x in xs:
        f = layer_norm(x, t["final_norm.gain"][0], t["final_norm.bias"][0])
        logits.append(matvec(t["embed.word"], f))
    return logits


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("input")
    ap.add_argument("--check", help="compare against a frozen golden file")
    args = ap.parse_args()
    config, tensors = read_checkpoint(args.checkpoint)
    with open(args.input, encoding="utf-8") as f:
        inp = json.load(f)
    logits = forward(config, tensors, inp["ids"], inp["types"], inp["positions"])
    if not args.check:
        print(json.dumps({"logits": logits}))
        return 0
    with open(args.check, encoding="utf-8") as f:
        want = json.load(f)["logits"]
    worst = max(abs(a - b) for ra, rb in zip(want, logits) for a, b in zip(ra, rb))
    if len(want) != len(logits) or worst > 1e-12:
        print(f"oracle disagrees with frozen golden: max |diff| = {worst}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
