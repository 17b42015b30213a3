"""Pull per-layer KV caches out of a pretrained causal transformer.

Keys can be captured at two points: at the key-projection output before
the rotary embedding is applied (pre_rope, the default) via forward
hooks, or from the attention cache after rotation (post_rope).  Values
are identical at both points; the header flag records which one the
keys came from.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from .errors import BadExportSpec, HookUnavailable, ModelLoadError
from .kvdwriter import DTYPES, write_kvd

CAPTURE_POINTS = ("pre_rope", "post_rope")


@dataclass(frozen=True)
class ExportSpec:
    model_path: str
    out_path: str
    prompt: str
    max_tokens: int = 32
    capture: str = "pre_rope"
    dtype: str = "f32"

    def __post_init__(self):
        if self.capture not in CAPTURE_POINTS:
            raise BadExportSpec(f"capture must be one of {CAPTURE_POINTS}")
        if self.dtype not in DTYPES:
            raise BadExportSpec(f"dtype must be one of {DTYPES}")
        if self.max_tokens < 1:
            raise BadExportSpec("max_tokens must be >= 1")
        if not self.prompt:
            raise BadExportSpec("prompt is empty")


def bundled_prompt() -> str:
    return (resources.files("kvexport") / "data" / "sample.txt").read_text("utf-8")


def byte_tokens(text: str, vocab_size: int, limit: int) -> torch.Tensor:
    """Tokenizer-free encoding: one token per UTF-8 byte, modulo the vocab."""
    ids = [b % vocab_size for b in text.encode("utf-8")[:limit]]
    return torch.tensor(ids, dtype=torch.long).unsqueeze(0)


def load_model(path: str):
    from transformers import AutoModelForCausalLM

    try:
        model = AutoModelForCausalLM.from_pretrained(
            path, attn_implementation="eager", dtype=torch.float32
        )
    except Exception as exc:
        raise ModelLoadError(f"cannot load model from {path}: {exc}") from exc
    return model.eval()


def _decoder_layers(model):
    inner = getattr(model, "model", model)
    layers = getattr(inner, "layers", None)
    if layers is None:
        raise HookUnavailable("model has no .model.layers decoder stack")
    return list(layers)


def _cache_layer(cache, index: int) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(cache, "layers"):
        entry = cache.layers[index]
        return entry.keys, entry.values
    if hasattr(cache, "key_cache"):
        return cache.key_cache[index], cache.value_cache[index]
    return cache[index]


def _flatten(heads_first: torch.Tensor) -> np.ndarray:
    # (1, h, L, d) -> (L, h*d), heads concatenated along the feature axis
    t = heads_first[0].transpose(0, 1).reshape(heads_first.shape[2], -1)
    return t.contiguous().to(torch.float32).numpy()


def capture_cache(model, input_ids: torch.Tensor, capture: str):
    """Run the prompt, returning per-layer (K, V) and the pre-rope flag."""
    layers = _decoder_layers(model)
    want_hooks = capture == "pre_rope"
    if want_hooks:
        missing = [
            i
            for i, layer in enumerate(layers)
            if not hasattr(getattr(layer, "self_attn", None), "k_proj")
        ]
        if missing:
            print(
                f"warning: layers {missing} expose no k_proj/v_proj; "
                "falling back to post_rope capture",
                file=sys.stderr,
            )
            want_hooks = False

    grabbed: dict[str, torch.Tensor] = {}
    handles = []
    if want_hooks:

        def hook(name):
            def fn(_mod, _inp, out):
                grabbed[name] = out.detach()

            return fn

        for i, layer in enumerate(layers):
            handles.append(layer.self_attn.k_proj.register_forward_hook(hook(f"k{i}")))
            handles.append(layer.self_attn.v_proj.register_forward_hook(hook(f"v{i}")))
    try:
        with torch.no_grad():
            out = model(input_ids, use_cache=True)
    finally:
        for h in handles:
            h.remove()

    n = len(layers)
    seq_len = input_ids.shape[1]
    keys, values = [], []
    for i in range(n):
        k_cache, v_cache = _cache_layer(out.past_key_values, i)
        if want_hooks:
            width = k_cache.shape[1] * k_cache.shape[3]
            K = grabbed[f"k{i}"][0, :, :width].to(torch.float32).numpy()
            V = grabbed[f"v{i}"][0, :, :width].to(torch.float32).numpy()
        else:
            K = _flatten(k_cache)
            V = _flatten(v_cache)
        if K.shape[0] != seq_len:
            raise HookUnavailable(f"layer {i} captured {K.shape[0]} rows, "
                                  f"expected {seq_len}")
        keys.append(K)
        values.append(V)
    return keys, values, want_hooks


def export(spec: ExportSpec) -> dict:
    """Run the prompt through the model and write a KVD file."""
    model = load_model(spec.model_path)
    cfg = model.config
    limit = getattr(cfg, "max_position_embeddings", None)
    if limit is not None and spec.max_tokens > limit:
        raise BadExportSpec(f"max_tokens {spec.max_tokens} exceeds model "
                            f"context limit {limit}")
    input_ids = byte_tokens(spec.prompt, cfg.vocab_size, spec.max_tokens)
    keys, values, pre_rope = capture_cache(model, input_ids, spec.capture)

    num_kv_heads = getattr(cfg, "num_key_value_heads", cfg.num_attention_heads)
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // cfg.num_attention_heads
    write_kvd(
        spec.out_path,
        model_id=spec.model_path.rstrip("/").split("/")[-1],
        num_kv_heads=num_kv_heads,
        head_dim=head_dim,
        keys_pre_rope=pre_rope,
        rope_base=float(getattr(cfg, "rope_theta", 10000.0)),
        keys=keys,
        values=values,
        dtype=spec.dtype,
    )
    return {
        "out": spec.out_path,
        "num_layers": len(keys),
        "seq_len": int(input_ids.shape[1]),
        "width": int(keys[0].shape[1]),
        "keys_pre_rope": pre_rope,
    }


def make_toy(out_dir: str, seed: int = 0, num_layers: int = 2,
             num_q_heads: int = 4, num_kv_heads: int = 1, head_dim: int = 16,
             vocab_size: int = 512) -> None:
    """Save a small randomly initialized model for smoke testing."""
    from transformers import LlamaConfig, LlamaForCausalLM

    hidden = num_q_heads * head_dim
    cfg = LlamaConfig(
        vocab_size=vocab_size,
        hidden_size=hidden,
        intermediate_size=2 * hidden,
        num_hidden_layers=num_layers,
        num_attention_heads=num_q_heads,
        num_key_value_heads=num_kv_heads,
        max_position_embeddings=2048,
        rope_theta=10000.0,
    )
    torch.manual_seed(seed)
    model = LlamaForCausalLM(cfg)
    model.save_pretrained(out_dir)
