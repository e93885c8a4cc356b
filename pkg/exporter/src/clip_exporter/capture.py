"""Hooked CLIP vision forward: stage tokens, per-head intermediate attention
probabilities, and the final block's value (optionally query/key) embeddings
captured right after that block's input layernorm."""

from dataclasses import dataclass

import torch

CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class VisionCapture:
    hidden_states: tuple     # per layer (B, N+1, D); index 0 = embeddings
    attentions: tuple        # per layer (B, heads, N+1, N+1) post-softmax
    v_last: torch.Tensor     # (B, heads, N+1, d_head)
    q_last: torch.Tensor | None
    k_last: torch.Tensor | None
    cls_embedding: torch.Tensor   # (B, C) standard projected image embedding


def _split_heads(x, num_heads):
    b, seq, d = x.shape
    return x.view(b, seq, num_heads, d // num_heads).permute(0, 2, 1, 3).contiguous()


def preprocess_images(pil_images, image_size):
    """Resize to (image_size, image_size), normalize with the CLIP statistics,
    and stack into a (B, 3, S, S) float tensor."""
    import numpy as np
    from PIL import Image

    mean = torch.tensor(CLIP_IMAGE_MEAN).view(3, 1, 1)
    std = torch.tensor(CLIP_IMAGE_STD).view(3, 1, 1)
    batch = []
    for img in pil_images:
        img = img.convert("RGB").resize((image_size, image_size), Image.BICUBIC)
        arr = torch.from_numpy(np.asarray(img, dtype="float32") / 255.0)
        arr = arr.permute(2, 0, 1)
        batch.append((arr - mean) / std)
    return torch.stack(batch)


def run_vision(model, pixel_values, capture_qkv=False, interpolate_pos_encoding=False):
    """One deterministic forward pass with every needed tensor captured."""
    vision = model.vision_model
    num_heads = model.config.vision_config.num_attention_heads
    last_attn = vision.encoder.layers[-1].self_attn
    grabbed = {}
    hooks = [last_attn.v_proj.register_forward_hook(
        lambda mod, inp, out: grabbed.__setitem__("v", out.detach()))]
    if capture_qkv:
        hooks.append(last_attn.q_proj.register_forward_hook(
            lambda mod, inp, out: grabbed.__setitem__("q", out.detach())))
        hooks.append(last_attn.k_proj.register_forward_hook(
            lambda mod, inp, out: grabbed.__setitem__("k", out.detach())))
    try:
        with torch.no_grad():
            out = vision(pixel_values=pixel_values, output_hidden_states=True,
                         output_attentions=True, return_dict=True,
                         interpolate_pos_encoding=interpolate_pos_encoding)
    finally:
        for h in hooks:
            h.remove()
    with torch.no_grad():
        cls_embedding = model.visual_projection(out.pooler_output).detach()
    return VisionCapture(
        hidden_states=out.hidden_states,
        attentions=out.attentions,
        v_last=_split_heads(grabbed["v"], num_heads),
        q_last=_split_heads(grabbed["q"], num_heads) if capture_qkv else None,
        k_last=_split_heads(grabbed["k"], num_heads) if capture_qkv else None,
        cls_embedding=cls_embedding)


def shared_weight_arrays(model):
    """The engine-side projection weights, oriented for right-multiplication."""
    vision = model.vision_model
    out_proj = vision.encoder.layers[-1].self_attn.out_proj
    return {
        "attn_out_proj_w": out_proj.weight.detach().t().contiguous().numpy(),
        "attn_out_proj_b": out_proj.bias.detach().numpy(),
        "ln_post_scale": vision.post_layernorm.weight.detach().numpy(),
        "ln_post_bias": vision.post_layernorm.bias.detach().numpy(),
        "visual_proj": model.visual_projection.weight.detach().t().contiguous().numpy(),
    }
