#!/usr/bin/env python3
"""Train the fixture models on scikit-learn's 8x8 digits and freeze them.

Writes into fixtures/:
  mlp_mnist_16.json   dense 64-16-16-10 with ReLU
  conv_digits.json    conv 1->4 3x3 -> ReLU -> avgpool 2 -> dense 64->10
  digits_test.json    held-out split used by the sweep and end-to-end tests
  input0.json         first held-out sample as a plain JSON array
  golden.json         logits for sample 0 from a float64 forward pass and
                      from an integer re-implementation of the field oracle

Usage: python3 scripts/train_fixtures.py [--out fixtures]
"""

import argparse
import base64
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

P = (1 << 61) - 1
F = 12
BOUND = float(1 << 24)
K = 16
RANGE_LOG2 = 3
# keep every pre-activation comfortably inside [-2^RANGE_LOG2, 2^RANGE_LOG2)
TARGET_MAX = 6.0


def blob(a):
    a = np.asarray(a, dtype="<f4").ravel()
    return base64.b64encode(a.tobytes()).decode()


def dense(w, b):
    out, inp = w.shape
    return {"type": "dense", "inputs": inp, "outputs": out, "weights": blob(w), "bias": blob(b)}


def conv(w, b, stride=1, padding=1):
    o, i, k, _ = w.shape
    return {"type": "conv2d", "in_channels": i, "out_channels": o, "kernel": k,
            "stride": stride, "padding": padding, "weights": blob(w), "bias": blob(b)}


def relu():
    return {"type": "activation", "function": "relu", "k": K, "range_log2": RANGE_LOG2}


def model_doc(name, input_shape, layers):
    return {
        "format": "tabula-model",
        "version": 1,
        "name": name,
        "codec": {"scale_bits": F, "bound": BOUND, "modulus": P},
        "input_shape": input_shape,
        "num_classes": 10,
        "layers": layers,
    }


def train(net, x, y, epochs, lr):
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=1e-4)
    loss_fn = torch.nn.CrossEntropyLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss = loss_fn(net(x), y)
        loss.backward()
        opt.step()
    return net


# ---- float64 reference -------------------------------------------------

def f64_forward(doc, x):
    shape = list(doc["input_shape"])
    v = np.asarray(x, dtype=np.float64).reshape(shape)
    for layer in doc["layers"]:
        t = layer["type"]
        if t == "activation":
            v = np.maximum(v, 0.0)
        elif t == "flatten":
            v = v.reshape(-1)
        elif t == "dense":
            w = unblob(layer["weights"]).reshape(layer["outputs"], layer["inputs"])
            v = w @ v.reshape(-1) + unblob(layer["bias"])
        elif t == "conv2d":
            v = conv_f64(v, layer)
        elif t == "avgpool":
            s = layer["size"]
            c, h, w_ = v.shape
            oh, ow = (h - s) // layer["stride"] + 1, (w_ - s) // layer["stride"] + 1
            out = np.zeros((c, oh, ow))
            for oy in range(oh):
                for ox in range(ow):
                    ys, xs = oy * layer["stride"], ox * layer["stride"]
                    out[:, oy, ox] = v[:, ys:ys + s, xs:xs + s].mean(axis=(1, 2))
            v = out
    return v.reshape(-1)


def conv_f64(v, layer):
    k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
    o, i = layer["out_channels"], layer["in_channels"]
    w = unblob(layer["weights"]).reshape(o, i, k, k)
    b = unblob(layer["bias"])
    _, h, w_ = v.shape
    vp = np.pad(v, ((0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // s + 1, (w_ + 2 * pad - k) // s + 1
    out = np.zeros((o, oh, ow))
    for oy in range(oh):
        for ox in range(ow):
            patch = vp[:, oy * s:oy * s + k, ox * s:ox * s + k]
            out[:, oy, ox] = np.tensordot(w, patch, axes=3) + b
    return out


def unblob(s):
    raw = base64.b64decode(s)
    return np.array(struct.unpack("<%df" % (len(raw) // 4), raw), dtype=np.float64)


# ---- integer field oracle ----------------------------------------------

def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def encode(x, scale):
    return round_half_away(float(x) * 2.0 ** scale) % P


def centered(a):
    return a if a <= P // 2 else a - P


def shift_round(x, shift):
    if shift >= 0:
        return x << shift
    s = -shift
    mag = (abs(x) + (1 << (s - 1))) >> s
    return -mag if x < 0 else mag


def field_forward(doc, x):
    """Exact truncation, k-bit wrap, ReLU table values; residues mod p."""
    shape = list(doc["input_shape"])
    if len(shape) == 1:
        shape = [shape[0], 1, 1]
    c, h, w_ = shape
    v = [encode(np.float32(t), F) for t in x]
    scale = F
    for layer in doc["layers"]:
        t = layer["type"]
        if t == "flatten":
            c, h, w_ = c * h * w_, 1, 1
        elif t == "activation":
            tb = max(0, scale + RANGE_LOG2 + 1 - K)
            half = 1 << (K - 1)
            out = []
            for a in v:
                q = centered(a) >> tb  # floor division by 2^tb
                q = (q + half) % (1 << K) - half
                out.append(shift_round(max(q, 0), tb + F - scale) % P)
            v, scale = out, F
        elif t == "dense":
            n_in, n_out = layer["inputs"], layer["outputs"]
            wq = [encode(a, F) for a in unblob(layer["weights"])]
            bq = [encode(a, scale + F) for a in unblob(layer["bias"])]
            v = [(sum(wq[o * n_in + i] * v[i] for i in range(n_in)) + bq[o]) % P for o in range(n_out)]
            c, h, w_ = n_out, 1, 1
            scale += F
        elif t == "conv2d":
            k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
            o_c, i_c = layer["out_channels"], layer["in_channels"]
            wq = [encode(a, F) for a in unblob(layer["weights"])]
            bq = [encode(a, scale + F) for a in unblob(layer["bias"])]
            oh, ow = (h + 2 * pad - k) // s + 1, (w_ + 2 * pad - k) // s + 1
            out = []
            for oc in range(o_c):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = bq[oc]
                        for ic in range(i_c):
                            for ky in range(k):
                                for kx in range(k):
                                    iy, ix = oy * s + ky - pad, ox * s + kx - pad
                                    if 0 <= iy < h and 0 <= ix < w_:
                                        acc += wq[((oc * i_c + ic) * k + ky) * k + kx] * v[(ic * h + iy) * w_ + ix]
                        out.append(acc % P)
            v, c, h, w_ = out, o_c, oh, ow
            scale += F
        elif t == "avgpool":
            sz, st = layer["size"], layer["stride"]
            wq = encode(1.0 / (sz * sz), F)
            oh, ow = (h - sz) // st + 1, (w_ - sz) // st + 1
            out = []
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = sum(v[(ch * h + oy * st + ky) * w_ + ox * st + kx]
                                  for ky in range(sz) for kx in range(sz))
                        out.append(acc * wq % P)
            v, h, w_ = out, oh, ow
            scale += F
    return v, scale


def rescale_pair(first, second, pre_max):
    """Scale a layer (and its bias) down by c, the next linear layer up by 1/c."""
    if pre_max <= TARGET_MAX:
        return
    c = TARGET_MAX / pre_max
    with torch.no_grad():
        first.weight.mul_(c)
        first.bias.mul_(c)
        second.weight.div_(c)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(0)
    digits = load_digits()
    x = (digits.data / 16.0).astype(np.float32)
    y = digits.target.astype(np.int64)
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=0.2, random_state=0, stratify=y)
    xt, yt = torch.tensor(x_tr), torch.tensor(y_tr)
    x_all = torch.tensor(x)

    # MLP 64-16-16-10
    l1, l2, l3 = torch.nn.Linear(64, 16), torch.nn.Linear(16, 16), torch.nn.Linear(16, 10)
    mlp = torch.nn.Sequential(l1, torch.nn.ReLU(), l2, torch.nn.ReLU(), l3)
    train(mlp, xt, yt, epochs=600, lr=1e-2)
    with torch.no_grad():
        rescale_pair(l1, l2, l1(x_all).abs().max().item())
        rescale_pair(l2, l3, l2(torch.relu(l1(x_all))).abs().max().item())
        acc = (mlp(torch.tensor(x_te)).argmax(1).numpy() == y_te).mean()
    print(f"mlp_mnist_16 held-out accuracy {acc:.4f}")
    mlp_doc = model_doc("mlp_mnist_16", [64], [
        dense(l1.weight.detach().numpy(), l1.bias.detach().numpy()), relu(),
        dense(l2.weight.detach().numpy(), l2.bias.detach().numpy()), relu(),
        dense(l3.weight.detach().numpy(), l3.bias.detach().numpy()),
    ])

    # conv 1->4 3x3 pad 1, ReLU, avgpool 2, flatten, dense 64->10
    cv, fc = torch.nn.Conv2d(1, 4, 3, padding=1), torch.nn.Linear(64, 10)
    cnn = torch.nn.Sequential(cv, torch.nn.ReLU(), torch.nn.AvgPool2d(2), torch.nn.Flatten(), fc)
    xi = xt.reshape(-1, 1, 8, 8)
    train(cnn, xi, yt, epochs=600, lr=1e-2)
    with torch.no_grad():
        rescale_pair(cv, fc, cv(x_all.reshape(-1, 1, 8, 8)).abs().max().item())
        acc = (cnn(torch.tensor(x_te).reshape(-1, 1, 8, 8)).argmax(1).numpy() == y_te).mean()
    print(f"conv_digits held-out accuracy {acc:.4f}")
    cnn_doc = model_doc("conv_digits", [1, 8, 8], [
        conv(cv.weight.detach().numpy(), cv.bias.detach().numpy()), relu(),
        {"type": "avgpool", "size": 2, "stride": 2},
        {"type": "flatten"},
        dense(fc.weight.detach().numpy(), fc.bias.detach().numpy()),
    ])

    for doc in (mlp_doc, cnn_doc):
        (out / f"{doc['name']}.json").write_text(json.dumps(doc, indent=2) + "\n")

    (out / "digits_test.json").write_text(json.dumps({
        "format": "tabula-dataset",
        "version": 1,
        "input_shape": [64],
        "num_classes": 10,
        "inputs": blob(x_te),
        "labels": [int(t) for t in y_te],
    }, indent=2) + "\n")
    (out / "input0.json").write_text(json.dumps([float(t) for t in x_te[0]]) + "\n")

    golden = {}
    for doc in (mlp_doc, cnn_doc):
        logits, scale = field_forward(doc, x_te[0])
        golden[doc["name"]] = {
            "input_index": 0,
            "float_logits": [float(t) for t in f64_forward(doc, x_te[0])],
            "quantized_logits": logits,
            "quantized_scale_bits": scale,
        }
    (out / "golden.json").write_text(json.dumps(golden, indent=2) + "\n")


if __name__ == "__main__":
    main()
