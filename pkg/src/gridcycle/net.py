"""Tiny decoder-only transformer with arbitrary boolean attention masks.

Gradients come from torch autograd.  The model takes two masks: ``attn_mask``
(what each row may depend on, applied in the last layer) and ``deep_mask``
(applied in every earlier layer).  See :mod:`gridcycle.seqcodec` for why
they differ for the packed multi-task sequence.

Position embeddings are indexed by the offset inside the token's segment and a
learned segment embedding tells segments apart, so a G2 row computes the same
function whether or not a G1 prefix is present.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seqcodec import IMG, PAD, Batch


class ShapeError(ValueError):
    pass


class NotNormalized(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class BadCheckpoint(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 512
    d_ff: int | None = None
    init_std: float = 0.02
    grid: tuple[int, int] | None = None   # (H, W): adds row/column embeddings to image cells

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)

    @property
    def ff(self) -> int:
        return self.d_ff or 4 * self.d_model


@dataclass
class TensorBatch:
    tokens: torch.Tensor
    segment: torch.Tensor
    positions: torch.Tensor
    loss_mask: torch.Tensor
    attn_mask: torch.Tensor
    deep_mask: torch.Tensor
    valid: torch.Tensor

    @classmethod
    def from_batch(cls, b: Batch) -> "TensorBatch":
        return cls(*(torch.from_numpy(np.ascontiguousarray(getattr(b, f))) for f in
                     ("tokens", "segment", "positions", "loss_mask", "attn_mask", "deep_mask", "valid")))

    def __len__(self) -> int:
        return self.tokens.shape[0]


class KVCache:
    def __init__(self, n_layers: int):
        self.k: list[torch.Tensor | None] = [None] * n_layers
        self.v: list[torch.Tensor | None] = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[2]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(D)
        self.qkv = nn.Linear(D, 3 * D)
        self.proj = nn.Linear(D, D)
        self.ln2 = nn.LayerNorm(D)
        self.fc1 = nn.Linear(D, cfg.ff)
        self.fc2 = nn.Linear(cfg.ff, D)

    def forward(self, x, mask, cache: KVCache | None = None, layer: int = 0):
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q = q.view(B, T, H, -1).transpose(1, 2)
        k = k.view(B, T, H, -1).transpose(1, 2)
        v = v.view(B, T, H, -1).transpose(1, 2)
        if cache is not None:
            if cache.k[layer] is not None:
                k = torch.cat([cache.k[layer], k], dim=2)
                v = torch.cat([cache.v[layer], v], dim=2)
            cache.k[layer], cache.v[layer] = k, v
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None])
        y = y.transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class TinyDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab, D)
        self.pos_emb = nn.Embedding(cfg.max_positions, D)
        self.seg_emb = nn.Embedding(3, D)
        if cfg.grid is not None:
            self.row_emb = nn.Embedding(cfg.grid[0], D)
            self.col_emb = nn.Embedding(cfg.grid[1], D)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(D)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "ln" in name:
                nn.init.ones_(p)
            else:
                nn.init.normal_(p, std=self.cfg.init_std)

    # -- core ---------------------------------------------------------------

    def trunk(self, x, segment, positions, attn_mask, deep_mask=None, cache=None):
        if positions.max().item() >= self.cfg.max_positions:
            raise ShapeError("segment offset exceeds max_positions")
        if deep_mask is None:
            deep_mask = attn_mask
        x = x + self.pos_emb(positions) + self.seg_emb(segment)
        if self.cfg.grid is not None:
            H, W = self.cfg.grid
            cell = positions.clamp(0, H * W - 1)
            rc = self.row_emb(cell // W) + self.col_emb(cell % W)
            x = x + rc * (segment == IMG).unsqueeze(-1).to(x.dtype)
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x = blk(x, attn_mask if i == last else deep_mask, cache, i)
        return self.ln_f(x)

    def head(self, h):
        # output projection tied to the token embedding
        return h @ self.tok_emb.weight.T

    def forward(self, tokens, segment, positions, attn_mask, deep_mask=None, cache=None):
        tokens, segment, positions, attn_mask, deep_mask = _batched(
            tokens, segment, positions, attn_mask, deep_mask)
        if attn_mask.shape[-1] != tokens.shape[1] + (cache.length if cache else 0):
            raise ShapeError("attention mask does not match sequence length")
        return self.head(self.trunk(self.tok_emb(tokens), segment, positions,
                                    attn_mask, deep_mask, cache))

    def forward_soft(self, mixtures, segment, positions, attn_mask, deep_mask=None,
                     cache=None, check: bool = True):
        """Forward on probability vectors over the vocabulary instead of ids."""
        if mixtures.dim() == 2:
            mixtures = mixtures[None]
        if check:
            err = (mixtures.detach().sum(-1) - 1).abs().max().item()
            if err > 1e-6:
                raise NotNormalized(f"mixture rows deviate from 1 by {err:.2e}")
        segment, positions, attn_mask, deep_mask = _batched_meta(
            segment, positions, attn_mask, deep_mask)
        x = mixtures @ self.tok_emb.weight
        return self.head(self.trunk(x, segment, positions, attn_mask, deep_mask, cache))

    def run_batch(self, tb: TensorBatch):
        return self.forward(tb.tokens, tb.segment, tb.positions, tb.attn_mask, tb.deep_mask)


def _batched(tokens, segment, positions, attn_mask, deep_mask):
    tokens = torch.as_tensor(tokens)
    if tokens.dim() == 1:
        tokens = tokens[None]
    segment, positions, attn_mask, deep_mask = _batched_meta(segment, positions, attn_mask, deep_mask)
    return tokens, segment, positions, attn_mask, deep_mask


def _batched_meta(segment, positions, attn_mask, deep_mask):
    segment = torch.as_tensor(segment)
    positions = torch.as_tensor(positions)
    attn_mask = torch.as_tensor(attn_mask, dtype=torch.bool)
    if segment.dim() == 1:
        segment, positions = segment[None], positions[None]
    if attn_mask.dim() == 2:
        attn_mask = attn_mask[None]
    if deep_mask is not None:
        deep_mask = torch.as_tensor(deep_mask, dtype=torch.bool)
        if deep_mask.dim() == 2:
            deep_mask = deep_mask[None]
    return segment, positions, attn_mask, deep_mask


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> TinyDecoder:
    torch.manual_seed(seed)
    return TinyDecoder(cfg).to(dtype)


# -- losses -----------------------------------------------------------------

def token_nll(logits, tokens):
    """Per-position NLL of ``tokens[:, t+1]`` under ``logits[:, t]``; shape (B, T-1)."""
    logp = logits[:, :-1].log_softmax(-1)
    return -logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)


def ce_loss(logits, tokens, loss_mask):
    """Mean next-token cross-entropy over positions whose *target* is masked in."""
    sel = loss_mask[:, 1:]
    n = sel.sum()
    if n.item() == 0:
        raise EmptyMask("loss mask selects no target position")
    return (token_nll(logits, tokens) * sel).sum() / n


def make_optimizer(model: nn.Module, lr: float, weight_decay: float = 0.01):
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


# -- autoregressive sampling --------------------------------------------------

@dataclass
class Rollout:
    tokens: torch.Tensor      # (B, T) prefix plus emitted tokens
    logprobs: torch.Tensor    # (B, T) log-prob of each emitted token, 0 elsewhere
    emitted: torch.Tensor     # (B, T) bool, positions chosen by the sampler
    truncated: torch.Tensor   # (B,) bool, stop token never produced before the cap


def _choose(logits, greedy, temperature, generator):
    if greedy:
        tok = logits.argmax(-1)
        logp = logits.log_softmax(-1).gather(-1, tok[:, None]).squeeze(-1)
        return tok, logp
    scaled = logits / temperature
    probs = scaled.softmax(-1)
    tok = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    logp = scaled.log_softmax(-1).gather(-1, tok[:, None]).squeeze(-1)
    return tok, logp


@torch.no_grad()
def sample(model: TinyDecoder, template: TensorBatch, start: int, *, greedy: bool = False,
           temperature: float = 1.0, generator: torch.Generator | None = None,
           vocab_range: tuple[int, int] | None = None, forced: torch.Tensor | None = None,
           stop_token: int | None = None, use_cache: bool = True) -> Rollout:
    """Fill ``template.tokens[:, start:]`` autoregressively.

    ``forced`` (B, T) holds token ids to insert instead of sampling (-1 = sample).
    ``vocab_range`` restricts choices to ``[lo, hi)``; log-probs are taken under
    the restricted distribution.
    """
    tb = template
    B, T = tb.tokens.shape
    tokens = tb.tokens.clone()
    logprobs = torch.zeros(B, T, dtype=torch.float64)
    emitted = torch.zeros(B, T, dtype=torch.bool)
    done = torch.zeros(B, dtype=torch.bool)
    lo, hi = vocab_range if vocab_range is not None else (0, model.cfg.vocab)
    cache = KVCache(len(model.blocks)) if use_cache else None
    last = None
    for t in range(start, T):
        if cache is not None:
            s = slice(0, start) if t == start else slice(t - 1, t)
            out = model.forward(tokens[:, s], tb.segment[:, s], tb.positions[:, s],
                                tb.attn_mask[:, s, :s.stop], tb.deep_mask[:, s, :s.stop], cache)
            last = out[:, -1]
        else:
            last = model.forward(tokens[:, :t], tb.segment[:, :t], tb.positions[:, :t],
                                 tb.attn_mask[:, :t, :t], tb.deep_mask[:, :t, :t])[:, -1]
        tok, logp = _choose(last[:, lo:hi], greedy, temperature, generator)
        tok = tok + lo
        free = ~done
        if forced is not None:
            f = forced[:, t]
            use_forced = f >= 0
            tok = torch.where(use_forced, f, tok)
            free = free & ~use_forced
        tok = torch.where(done, torch.full_like(tok, PAD), tok)
        tokens[:, t] = tok
        logprobs[:, t] = torch.where(free, logp.double(), torch.zeros_like(logp, dtype=torch.float64))
        emitted[:, t] = free
        if stop_token is not None:
            done = done | (tok == stop_token)
            if bool(done.all()):
                tokens[:, t + 1:] = PAD
                break
    truncated = ~done if stop_token is not None else torch.zeros(B, dtype=torch.bool)
    return Rollout(tokens, logprobs, emitted, truncated)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(prefix: str | Path, model: TinyDecoder, *, vocab: dict | None = None,
                    extra: dict[str, torch.Tensor] | None = None, meta: dict | None = None) -> Path:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (float32 LE blob)."""
    prefix = Path(prefix)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    directory = {}
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {
        "config": asdict(model.cfg),
        "vocab": vocab,
        "dtype": "float32-le",
        "tensors": directory,
        "meta": meta or {},
    }
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    return prefix.with_suffix(".json")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
        blob = path.with_suffix(".bin").read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {e}") from e
    tensors = {}
    for name, ent in manifest.get("tensors", {}).items():
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        end = ent["offset"] + 4 * n
        if end > len(blob):
            raise BadCheckpoint(f"tensor {name} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=ent["offset"]).reshape(ent["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return manifest, tensors


def load_checkpoint(path: str | Path, dtype=torch.float32) -> tuple[TinyDecoder, dict, dict]:
    """Return (model, manifest, non-model tensors)."""
    manifest, tensors = read_checkpoint(path)
    try:
        model = TinyDecoder(ModelConfig(**manifest["config"]))
        state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        model.load_state_dict(state)
    except (KeyError, TypeError, RuntimeError) as e:
        raise BadCheckpoint(f"checkpoint {path} does not describe a model: {e}") from e
    extra = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model.to(dtype), manifest, extra


def optimizer_tensors(opt: torch.optim.Optimizer, model: nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"adam_m/{n}"] = st["exp_avg"]
            out[f"adam_v/{n}"] = st["exp_avg_sq"]
            out[f"adam_step/{n}"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def restore_optimizer(opt: torch.optim.Optimizer, model: nn.Module, tensors: dict[str, torch.Tensor]):
    for n, p in model.named_parameters():
        if f"adam_m/{n}" not in tensors:
            continue
        opt.state[p] = {
            "step": tensors[f"adam_step/{n}"].reshape(()).clone(),
            "exp_avg": tensors[f"adam_m/{n}"].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"adam_v/{n}"].to(p.dtype).clone(),
        }


def param_distance(a: nn.Module, b: nn.Module) -> float:
    """L2 distance between two models' flattened parameters."""
    sq = 0.0
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        sq += float(((pa.detach().double() - pb.detach().double()) ** 2).sum())
    return math.sqrt(sq)


def param_norm(model: nn.Module) -> float:
    return math.sqrt(sum(float((p.detach().double() ** 2).sum()) for p in model.parameters()))
