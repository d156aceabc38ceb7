"""Line-by-line PyTorch (float64) recomputation of one contrastive-tuning iteration.

Shares nothing with the package except the random draws it is handed: the
ViT, the NNCLR head, BatchNorm bookkeeping, topk-NN lookup, the symmetrized
loss, layer-wise lrs, AdamW, both EMA updates and the queue push are written
out again here.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)


def _t(a, grad=False):
    return torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=grad)


def pos_embed(grid: int, dim: int) -> torch.Tensor:
    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (torch.arange(d // 2, dtype=torch.float64) / (d / 2))
        out = pos.reshape(-1, 1) * omega.reshape(1, -1)
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)
    rows = torch.arange(grid, dtype=torch.float64).repeat_interleave(grid)
    cols = torch.arange(grid, dtype=torch.float64).repeat(grid)
    return torch.cat([one_axis(dim // 2, cols), one_axis(dim // 2, rows)], dim=1)


def vit_forward(p: dict, images: torch.Tensor, patch: int, depth: int, heads: int, pooling: str):
    b, h, w, c = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, c).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, -1)
    d = p["patch_embed.weight"].shape[1]
    x = x @ p["patch_embed.weight"] + p["patch_embed.bias"] + pos_embed(g, d)
    x = torch.cat([p["cls_token"].expand(b, 1, d), x], dim=1)
    dh = d // heads
    for i in range(depth):
        q = f"blocks.{i}."
        hdn = F.layer_norm(x, (d,), p[q + "norm1.weight"], p[q + "norm1.bias"], eps=1e-5)
        qkv = hdn @ p[q + "attn.qkv.weight"] + p[q + "attn.qkv.bias"]
        qq, kk, vv = (t.reshape(b, -1, heads, dh).transpose(1, 2) for t in qkv.split(d, dim=-1))
        att = torch.softmax(qq @ kk.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        a = (att @ vv).transpose(1, 2).reshape(b, -1, d)
        x = x + a @ p[q + "attn.proj.weight"] + p[q + "attn.proj.bias"]
        hdn = F.layer_norm(x, (d,), p[q + "norm2.weight"], p[q + "norm2.bias"], eps=1e-5)
        hdn = F.gelu(hdn @ p[q + "mlp.fc1.weight"] + p[q + "mlp.fc1.bias"])
        x = x + hdn @ p[q + "mlp.fc2.weight"] + p[q + "mlp.fc2.bias"]
    x = F.layer_norm(x, (d,), p["norm.weight"], p["norm.bias"], eps=1e-5)
    return x[:, 0] if pooling == "cls" else x[:, 1:].mean(dim=1)


def bn(x, p, stats, name):
    # training-mode BatchNorm; torch folds in the unbiased batch variance
    return F.batch_norm(x, stats[name + ".mean"], stats[name + ".var"], p[name + ".bn.weight"],
                        p[name + ".bn.bias"], training=True, momentum=0.1, eps=1e-5)


def proj(p, stats, y):
    x = F.relu(bn(y @ p["projector.0.weight"], p, stats, "projector.0"))
    x = F.relu(bn(x @ p["projector.1.weight"], p, stats, "projector.1"))
    return bn(x @ p["projector.2.weight"], p, stats, "projector.2")


def pred(p, stats, z):
    x = F.relu(bn(z @ p["predictor.0.weight"], p, stats, "predictor.0"))
    return x @ p["predictor.1.weight"] + p["predictor.1.bias"]


def nce(nn, pp, tau):
    logits = nn @ pp.T / tau
    return F.cross_entropy(logits, torch.arange(len(nn)))


def layer_scale(name: str, depth: int, decay: float, frozen: int) -> float:
    if name.startswith("patch_embed") or name == "cls_token":
        layer = 0
    elif name.startswith("blocks."):
        layer = int(name.split(".")[1])
    else:
        layer = depth
    if layer < frozen:
        return 0.0
    return decay ** (depth - layer)


class ScriptedCT:
    """Holds torch copies of every piece of CT state and replays iterations."""

    def __init__(self, enc: dict, head: dict, ema: dict, bn_stats: dict, ema_stats: dict, queue: np.ndarray,
                 cfg: dict):
        self.cfg = cfg
        frozen = cfg["frozen_blocks"]
        self.enc = {n: _t(a, grad=layer_scale(n, cfg["depth"], cfg["layer_decay"], frozen) > 0) for n, a in enc.items()}
        self.enc_ema = {n: _t(a) for n, a in enc.items()}
        self.head = {n: _t(a, grad=True) for n, a in head.items()}
        self.ema = {n: _t(a) for n, a in ema.items()}
        self.stats = {n: _t(a) for n, a in bn_stats.items()}
        self.ema_stats = {n: _t(a) for n, a in ema_stats.items()}
        self.queue = _t(queue)
        self.grad_peak = {}
        groups = []
        enc_peak = cfg["base_lr"] * cfg["batch_size"] * 2 / 256
        head_peak = cfg["head_lr"] * cfg["batch_size"] * 2 / 256
        self.peaks = {}
        for prefix, params, peak, wd in (("enc.", self.enc, enc_peak, cfg["weight_decay"]),
                                         ("head.", self.head, head_peak, cfg["head_weight_decay"])):
            for n, t in params.items():
                scale = layer_scale(n, cfg["depth"], cfg["layer_decay"], frozen) if prefix == "enc." else 1.0
                if scale == 0:
                    continue
                decay = 0.0 if t.ndim <= 1 or n.endswith(".bias") else wd
                self.peaks[prefix + n] = peak * scale
                groups.append({"params": [t], "lr": peak * scale, "weight_decay": decay, "name": prefix + n})
        self.opt = torch.optim.AdamW(groups, betas=(0.9, 0.95), eps=1e-8)

    def step(self, x1, x2, lr_mult: float, rng: np.random.Generator) -> float:
        c = self.cfg
        for g in self.opt.param_groups:
            g["lr"] = self.peaks[g["name"]] * lr_mult
        y1 = vit_forward(self.enc, _t(x1), c["patch"], c["depth"], c["heads"], c["pooling"])
        y2 = vit_forward(self.enc, _t(x2), c["patch"], c["depth"], c["heads"], c["pooling"])
        p1 = F.normalize(pred(self.head, self.stats, proj(self.head, self.stats, y1)), dim=1, eps=1e-12)
        p2 = F.normalize(pred(self.head, self.stats, proj(self.head, self.stats, y2)), dim=1, eps=1e-12)
        with torch.no_grad():
            z1 = F.normalize(proj(self.ema, self.ema_stats, y1.detach()), dim=1, eps=1e-12)
            z2 = F.normalize(proj(self.ema, self.ema_stats, y2.detach()), dim=1, eps=1e-12)
            picks = []
            for z in (z1, z2):
                sims = (z @ self.queue.T).numpy()
                cand = np.argsort(-sims, axis=1, kind="stable")[:, : c["k"]]
                dice = rng.integers(0, c["k"], size=len(z))
                picks.append(self.queue[torch.as_tensor(cand[np.arange(len(z)), dice])])
        nn1, nn2 = picks
        loss = 0.5 * nce(nn1, p2, c["tau"]) + 0.5 * nce(nn2, p1, c["tau"])
        self.opt.zero_grad()
        loss.backward()
        for n, t in list(self.enc.items()) + list(self.head.items()):
            if t.grad is not None:
                key = ("encoder/" if n in self.enc and t is self.enc[n] else "head/") + n
                self.grad_peak[key] = max(self.grad_peak.get(key, 0.0), float(t.grad.abs().max()))
        self.opt.step()
        with torch.no_grad():
            self.queue = torch.cat([self.queue, z1])[-c["capacity"]:]
            for n, t in self.enc.items():
                if t.requires_grad:
                    self.enc_ema[n].copy_(c["encoder_ema"] * self.enc_ema[n] + (1 - c["encoder_ema"]) * t)
            for n in self.ema:
                self.ema[n].copy_(c["projector_ema"] * self.ema[n] + (1 - c["projector_ema"]) * self.head[n])
        return loss.item()

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"encoder/{n}": t.detach().numpy() for n, t in self.enc.items()}
        out.update({f"encoder_ema/{n}": t.numpy() for n, t in self.enc_ema.items()})
        out.update({f"head/{n}": t.detach().numpy() for n, t in self.head.items()})
        out.update({f"ema/{n}": t.numpy() for n, t in self.ema.items()})
        out.update({f"bn/{n}": t.numpy() for n, t in self.stats.items()})
        out.update({f"ema_bn/{n}": t.numpy() for n, t in self.ema_stats.items()})
        out["queue"] = self.queue.numpy()
        return out
