"""Regenerate golden.json: small fusion weights, inputs and expected outputs.

Expected values come from plain Python loops over lists, independent of the
vectorised implementation under test. Run from this directory:
``python3 make_golden.py``.
"""

import json
import math
import random

CONFIG = {
    "n_down": 3, "c_in": 4, "width": 2, "token_width": 8, "n_heads": 2, "n_layers": 2,
    "ff_width": 16, "hidden": [5], "n_joints": 3, "n_betas": 2, "ps_heads": 2, "ps_layers": 1,
    "grid_res": 2,
}
LN_EPS = 1e-5
S_MIN = 0.1

rng = random.Random(20240611)


def rand_matrix(rows, cols, scale=0.5):
    return [[rng.uniform(-scale, scale) for _ in range(cols)] for _ in range(rows)]


def rand_vector(n, scale=0.5):
    return [rng.uniform(-scale, scale) for _ in range(n)]


def mlp_tensors(prefix, sizes, out):
    for i in range(len(sizes) - 1):
        out[f"{prefix}.{i}.W"] = rand_matrix(sizes[i], sizes[i + 1])
        out[f"{prefix}.{i}.b"] = rand_vector(sizes[i + 1])


def encoder_tensors(prefix, width, ff, n_layers, out):
    for i in range(n_layers):
        p = f"{prefix}.{i}."
        out[p + "ln1_g"] = [1.0 + x for x in rand_vector(width, 0.2)]
        out[p + "ln1_b"] = rand_vector(width, 0.2)
        for name in ("q", "k", "v", "o"):
            out[p + "W" + name] = rand_matrix(width, width)
            out[p + "b" + name] = rand_vector(width, 0.2)
        out[p + "ln2_g"] = [1.0 + x for x in rand_vector(width, 0.2)]
        out[p + "ln2_b"] = rand_vector(width, 0.2)
        out[p + "W1"] = rand_matrix(width, ff)
        out[p + "b1"] = rand_vector(ff, 0.2)
        out[p + "W2"] = rand_matrix(ff, width)
        out[p + "b2"] = rand_vector(width, 0.2)


def build_tensors(c):
    pose_out = 6 * (c["n_joints"] - 1) + c["n_betas"]
    grid_in = c["grid_res"] ** 2 * (c["c_in"] - 2)
    t = {}
    mlp_tensors("grid_dec", [grid_in, *c["hidden"], pose_out], t)
    mlp_tensors("ps_in", [c["c_in"], c["width"]], t)
    encoder_tensors("ps_enc", c["width"], 2 * c["width"], c["ps_layers"], t)
    mlp_tensors("ps_dec", [c["width"] * c["n_down"], *c["hidden"], pose_out], t)
    mlp_tensors("ori_tok", [c["c_in"] * c["n_down"] + 6, c["token_width"]], t)
    encoder_tensors("ori_enc", c["token_width"], c["ff_width"], c["n_layers"], t)
    mlp_tensors("ori_dec", [c["token_width"], *c["hidden"], 6], t)
    mlp_tensors("cam_dec", [c["token_width"], *c["hidden"], 3], t)
    return t


# --- reference arithmetic ---------------------------------------------------


def matvec(x, W, b):
    return [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def layer_norm(x, g, b):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + LN_EPS) * g[i] + b[i] for i, v in enumerate(x)]


def encoder(tokens, t, prefix, n_layers, n_heads):
    x = [list(tok) for tok in tokens]
    width = len(x[0])
    hd = width // n_heads
    for layer in range(n_layers):
        p = f"{prefix}.{layer}."
        h = [layer_norm(tok, t[p + "ln1_g"], t[p + "ln1_b"]) for tok in x]
        q = [matvec(tok, t[p + "Wq"], t[p + "bq"]) for tok in h]
        k = [matvec(tok, t[p + "Wk"], t[p + "bk"]) for tok in h]
        v = [matvec(tok, t[p + "Wv"], t[p + "bv"]) for tok in h]
        att_out = [[0.0] * width for _ in x]
        for head in range(n_heads):
            cols = range(head * hd, (head + 1) * hd)
            for a in range(len(x)):
                scores = [sum(q[a][c] * k[bb][c] for c in cols) / math.sqrt(hd) for bb in range(len(x))]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for c in cols:
                    att_out[a][c] = sum(e[bb] / z * v[bb][c] for bb in range(len(x)))
        proj = [matvec(o, t[p + "Wo"], t[p + "bo"]) for o in att_out]
        x = [[x[a][c] + proj[a][c] for c in range(width)] for a in range(len(x))]
        h = [layer_norm(tok, t[p + "ln2_g"], t[p + "ln2_b"]) for tok in x]
        ff = [matvec([max(0.0, u) for u in matvec(tok, t[p + "W1"], t[p + "b1"])], t[p + "W2"], t[p + "b2"])
              for tok in h]
        x = [[x[a][c] + ff[a][c] for c in range(width)] for a in range(len(x))]
    return x


def mlp(x, t, prefix):
    i = 0
    while f"{prefix}.{i}.W" in t:
        x = matvec(x, t[f"{prefix}.{i}.W"], t[f"{prefix}.{i}.b"])
        if f"{prefix}.{i + 1}.W" in t:
            x = [max(0.0, u) for u in x]
        i += 1
    return x


def main():
    c = CONFIG
    t = build_tensors(c)
    tokens = rand_matrix(4, c["token_width"], 1.0)
    fused = rand_matrix(c["n_down"], c["width"], 1.0)
    grid = rand_vector(c["grid_res"] ** 2 * (c["c_in"] - 2), 1.0)
    cam_base = [0.3, -0.2, 0.1]
    encoded = encoder(tokens, t, "ori_enc", c["n_layers"], c["n_heads"])
    pose = mlp([u for row in fused for u in row], t, "ps_dec")
    n_pose = 6 * (c["n_joints"] - 1)
    grid_out = mlp(grid, t, "grid_dec")
    orient = [mlp(tok, t, "ori_dec") for tok in tokens]
    cams = []
    for tok in tokens:
        raw = mlp(tok, t, "cam_dec")
        pre = [cam_base[i] + raw[i] for i in range(3)]
        cams.append([math.log1p(math.exp(pre[0])) + S_MIN, pre[1], pre[2]])
    out = {
        "config": c,
        "tensors": t,
        "inputs": {"tokens": tokens, "fused": fused, "grid": grid, "cam_base": cam_base},
        "expected": {
            "transformer": encoded,
            "pose_theta6d": [pose[6 * j: 6 * j + 6] for j in range(c["n_joints"] - 1)],
            "pose_beta": pose[n_pose:],
            "grid_theta6d": [grid_out[6 * j: 6 * j + 6] for j in range(c["n_joints"] - 1)],
            "grid_beta": grid_out[n_pose:],
            "orientation": orient,
            "camera": cams,
        },
    }
    with open("golden.json", "w", encoding="utf-8") as f:
        json.dump(out, f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
