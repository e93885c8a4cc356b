"""Prompt ensemble: template filling and normal/abnormal text embeddings."""

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch


class PromptError(ValueError):
    pass


@dataclass
class PromptSpec:
    template: str
    descriptors: list
    normal_states: list
    abnormal_states: list

    def __post_init__(self):
        if not self.normal_states or not self.abnormal_states:
            raise PromptError("both state-word lists must be non-empty")
        if not self.descriptors:
            raise PromptError("descriptor list must be non-empty")

    def fill(self, class_name):
        """All template fillings, split into (normal, abnormal) prompt lists."""
        def group(states):
            return [self.template.format(descriptor=d, state=s, cls=class_name)
                    for s in states for d in self.descriptors]
        return group(self.normal_states), group(self.abnormal_states)


def load_prompt_spec(path=None):
    if path is None:
        raw = resources.files("clip_exporter").joinpath("data/prompts.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    doc = json.loads(raw)
    return PromptSpec(template=doc["template"], descriptors=list(doc["descriptors"]),
                      normal_states=list(doc["normal_states"]),
                      abnormal_states=list(doc["abnormal_states"]))


def _pooled(output):
    # transformers >=5 returns an output object; older versions a tensor
    if torch.is_tensor(output):
        return output
    return output.pooler_output


def encode_text_groups(model, tokenizer, normal_prompts, abnormal_prompts):
    """Encode both prompt groups and average within each group.

    Each prompt embedding is L2-normalized before averaging and each group
    mean is re-normalized, yielding unit rows [normal, abnormal] (2, C).
    """
    def embed(prompts):
        if not prompts:
            raise PromptError("empty prompt group")
        batch = tokenizer(prompts, padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = _pooled(model.get_text_features(
                input_ids=batch["input_ids"],
                attention_mask=batch.get("attention_mask")))
        feats = feats.double()
        feats = feats / feats.norm(dim=-1, keepdim=True)
        mean = feats.mean(dim=0)
        return (mean / mean.norm()).cpu().numpy()

    rows = np.stack([embed(normal_prompts), embed(abnormal_prompts)])
    return rows.astype(np.float32)
