#!/usr/bin/env python3
"""Build the toy checkpoints and reference values used by the test suite.

Writes into crates/core/tests/fixtures/:

  toy_random.safetensors     4-block LLaMA-shaped model at initialization
  toy_trained.safetensors    same model after a short training run
  mixed_dtypes.safetensors   f32 / f16 / bf16 tensors with awkward values
  mixed_dtypes.json (+ .bin) the same tensors in the rawbin layout
  reference.json             numpy spectra, fits and allocation plans

Usage: python3 scripts/make_toy_checkpoints.py [--steps 400]
"""

import argparse
import json
import math
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import save_file

D_MODEL = 64
D_FF = 128
N_HEADS = 4
N_LAYERS = 4
VOCAB = 64
SEQ = 32
SEED = 1234

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")


class RMSNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return self.weight * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + 1e-6)


class Attention(nn.Module):
    def __init__(self):
        super().__init__()
        self.q_proj = nn.Linear(D_MODEL, D_MODEL, bias=False)
        self.k_proj = nn.Linear(D_MODEL, D_MODEL, bias=False)
        self.v_proj = nn.Linear(D_MODEL, D_MODEL, bias=False)
        self.o_proj = nn.Linear(D_MODEL, D_MODEL, bias=False)

    def forward(self, x):
        b, t, _ = x.shape
        hd = D_MODEL // N_HEADS

        def split(y):
            return y.view(b, t, N_HEADS, hd).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.o_proj(y.transpose(1, 2).reshape(b, t, D_MODEL))


class Mlp(nn.Module):
    def __init__(self):
        super().__init__()
        self.gate_proj = nn.Linear(D_MODEL, D_FF, bias=False)
        self.up_proj = nn.Linear(D_MODEL, D_FF, bias=False)
        self.down_proj = nn.Linear(D_FF, D_MODEL, bias=False)

    def forward(self, x):
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class Layer(nn.Module):
    def __init__(self):
        super().__init__()
        self.input_layernorm = RMSNorm(D_MODEL)
        self.self_attn = Attention()
        self.post_attention_layernorm = RMSNorm(D_MODEL)
        self.mlp = Mlp()

    def forward(self, x):
        x = x + self.self_attn(self.input_layernorm(x))
        return x + self.mlp(self.post_attention_layernorm(x))


class Inner(nn.Module):
    def __init__(self):
        super().__init__()
        self.embed_tokens = nn.Embedding(VOCAB, D_MODEL)
        self.layers = nn.ModuleList([Layer() for _ in range(N_LAYERS)])
        self.norm = RMSNorm(D_MODEL)


class ToyLlama(nn.Module):
    def __init__(self):
        super().__init__()
        self.model = Inner()
        self.lm_head = nn.Linear(D_MODEL, VOCAB, bias=False)

    def forward(self, ids):
        x = self.model.embed_tokens(ids)
        for layer in self.model.layers:
            x = layer(x)
        return self.lm_head(self.model.norm(x))


def markov_batches(gen, batch):
    """Sequences from a fixed sparse random Markov chain over the vocabulary."""
    logits = torch.randn(VOCAB, VOCAB, generator=gen) * 3.0
    probs = torch.softmax(logits, dim=-1)
    while True:
        ids = torch.empty(batch, SEQ + 1, dtype=torch.long)
        ids[:, 0] = torch.randint(0, VOCAB, (batch,), generator=gen)
        for t in range(SEQ):
            ids[:, t + 1] = torch.multinomial(probs[ids[:, t]], 1, generator=gen).squeeze(1)
        yield ids


def state(model):
    return {k: v.detach().to(torch.float32).contiguous().clone() for k, v in model.state_dict().items()}


# --- reference computations (float64 numpy) ---------------------------------

def esd(w):
    s = np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)
    return np.sort(s * s)


def fix_finger_hill(lam):
    lam = np.sort(lam)
    lmax = lam[-1]
    nz = lam[lam > 1e-12 * lmax]
    n = len(nz)
    bins = max(10, int(math.isqrt(n)))
    logs = np.log(nz)
    lo, hi = logs.min(), logs.max()
    width = (hi - lo) / bins
    counts = np.zeros(bins, dtype=int)
    for v in logs:
        i = min(int((v - lo) / width), bins - 1)
        counts[i] += 1
    peak = int(np.argmax(counts))
    lambda_min = math.exp(lo + (peak + 0.5) * width)
    k = int(np.sum(nz > lambda_min))
    k = min(max(k, 2), n - 1)
    tail = nz[n - k:]
    ref = nz[n - k - 1]
    alpha = 1.0 + k / float(np.sum(np.log(tail / ref)))
    return {"alpha": alpha, "k": k, "lambda_min": lambda_min, "lambda_max": float(lmax)}


def eq4(q, d, target, s1, s2):
    q = np.asarray(q, float)
    d = np.asarray(d, float)
    if q.max() == q.min():
        return [target] * len(q), target / ((s1 + s2) / 2)
    raw = (q - q.min()) / (q.max() - q.min()) * (s2 - s1) + s1
    eta = target * d.sum() / np.sum(raw * d)
    phi = eta * raw
    assert phi.max() <= 1.0 and phi.min() >= 0.0
    return phi.tolist(), float(eta)


def reference(sd):
    blocks = []
    for i in range(N_LAYERS):
        names = sorted(k for k in sd if k.startswith(f"model.layers.{i}.") and sd[k].ndim == 2)
        mats = []
        for name in names:
            w = sd[name].numpy()
            lam = esd(w)
            fit = fix_finger_hill(lam)
            mats.append({
                "name": name,
                "d": int(w.size),
                "eigenvalues": lam.tolist(),
                "stable_rank": float(lam.sum() / lam[-1]),
                **fit,
            })
        q = float(np.mean([m["alpha"] for m in mats]))
        blocks.append({"block": i, "q": q, "d": int(sum(m["d"] for m in mats)), "matrices": mats})
    q = [b["q"] for b in blocks]
    d = [b["d"] for b in blocks]
    phi, eta = eq4(q, d, 0.7, 0.8, 1.2)
    plan = {
        "S": 0.7,
        "tau": 0.2,
        "eta": eta,
        "per_block": phi,
        "per_matrix": {m["name"]: phi[b["block"]] for b in blocks for m in b["matrices"]},
    }
    alphas = [m["alpha"] for b in blocks for m in b["matrices"]]
    return {"blocks": blocks, "plan": plan, "mean_alpha": float(np.mean(alphas))}


# --- dtype fixture ------------------------------------------------------------

def awkward_values(n, gen):
    base = torch.randn(n, generator=gen)
    special = torch.tensor([0.0, -0.0, 1.0, -1.0, 65504.0, 6.1e-5, 5.96e-8, float("inf"), float("-inf"), float("nan")])
    base[: len(special)] = special
    return base


def write_rawbin(tensors, path):
    manifest = []
    stem = os.path.splitext(os.path.basename(path))[0]
    for idx, (name, t) in enumerate(sorted(tensors.items())):
        dtype = {torch.float32: "f32", torch.float16: "f16", torch.bfloat16: "bf16"}[t.dtype]
        blob = f"{stem}.{idx:04}.{name.replace('/', '_')}.bin"
        if t.dtype == torch.float32:
            data = t.numpy().astype("<f4").tobytes()
        else:
            data = t.view(torch.int16).numpy().astype("<i2").tobytes()
        with open(os.path.join(os.path.dirname(path), blob), "wb") as f:
            f.write(data)
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype, "file": blob})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()

    os.makedirs(OUT, exist_ok=True)
    torch.manual_seed(SEED)
    gen = torch.Generator().manual_seed(SEED)

    model = ToyLlama()
    random_sd = state(model)
    save_file(random_sd, os.path.join(OUT, "toy_random.safetensors"), metadata={"variant": "random"})

    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    batches = markov_batches(gen, 32)
    for step in range(args.steps):
        ids = next(batches)
        logits = model(ids[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, VOCAB), ids[:, 1:].reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0 or step == args.steps - 1:
            print(f"step {step:4d} loss {loss.item():.4f}")
    trained_sd = state(model)
    save_file(trained_sd, os.path.join(OUT, "toy_trained.safetensors"), metadata={"variant": "trained"})

    dgen = torch.Generator().manual_seed(SEED + 1)
    mixed = {
        "a.f32": awkward_values(48, dgen).reshape(6, 8),
        "b.f16": awkward_values(64, dgen).reshape(8, 8).to(torch.float16),
        "c.bf16": awkward_values(40, dgen).reshape(5, 8).to(torch.bfloat16),
        "d.vec": awkward_values(12, dgen).to(torch.float16),
        "e.cube": torch.randn(2, 3, 4, generator=dgen).to(torch.bfloat16),
    }
    save_file(mixed, os.path.join(OUT, "mixed_dtypes.safetensors"), metadata={"purpose": "dtype round trip"})
    write_rawbin(mixed, os.path.join(OUT, "mixed_dtypes.json"))

    ref = {
        "random": reference(random_sd),
        "trained": reference(trained_sd),
    }
    with open(os.path.join(OUT, "reference.json"), "w") as f:
        json.dump(ref, f, indent=1)
        f.write("\n")
    print(f"mean alpha: random {ref['random']['mean_alpha']:.4f}, trained {ref['trained']['mean_alpha']:.4f}")


if __name__ == "__main__":
    main()
