"""Exporter test fixtures: a tiny randomly initialized CLIP model (no
checkpoint download) and a deterministic stub tokenizer."""

import zlib

import numpy as np
import pytest
import torch
from PIL import Image
from transformers import CLIPConfig, CLIPModel, CLIPTextConfig, CLIPVisionConfig

VOCAB = 1000


class StubTokenizer:
    """Whitespace tokenizer hashing words into a fixed id range."""

    def __init__(self, vocab_size=VOCAB, max_len=16, bos=1, eos=2, pad=0):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.bos, self.eos, self.pad = bos, eos, pad

    def _ids(self, text):
        words = text.lower().split()
        body = [zlib.crc32(w.encode()) % (self.vocab_size - 3) + 3 for w in words]
        return [self.bos] + body[: self.max_len - 2] + [self.eos]

    def __call__(self, texts, padding=True, return_tensors="pt"):
        seqs = [self._ids(t) for t in texts]
        width = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), width), self.pad, dtype=torch.long)
        mask = torch.zeros((len(seqs), width), dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
            mask[i, : len(s)] = 1
        return {"input_ids": ids, "attention_mask": mask}


def build_tiny_model(seed=0):
    cfg = CLIPConfig(
        text_config=CLIPTextConfig(
            hidden_size=32, intermediate_size=64, num_hidden_layers=2,
            num_attention_heads=2, max_position_embeddings=24,
            vocab_size=VOCAB, bos_token_id=1, eos_token_id=2, pad_token_id=0),
        vision_config=CLIPVisionConfig(
            hidden_size=16, intermediate_size=32, num_hidden_layers=4,
            num_attention_heads=2, image_size=32, patch_size=8),
        projection_dim=8)
    cfg._attn_implementation = "eager"
    torch.manual_seed(seed)
    model = CLIPModel(cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_model():
    return build_tiny_model()


@pytest.fixture(scope="session")
def tokenizer():
    return StubTokenizer()


def _save_png(path, rng, size=(24, 24)):
    arr = rng.integers(0, 256, size=(size[0], size[1], 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)


@pytest.fixture
def mvtec_tree(tmp_path):
    """Minimal MVTec-style layout: 2 good + 2 defective images with masks."""
    rng = np.random.default_rng(42)
    root = tmp_path / "dataset"
    good = root / "widget" / "test" / "good"
    bad = root / "widget" / "test" / "scratch"
    gt = root / "widget" / "ground_truth" / "scratch"
    for d in (good, bad, gt):
        d.mkdir(parents=True)
    _save_png(good / "000.png", rng)
    _save_png(good / "001.png", rng)
    _save_png(bad / "000.png", rng)
    _save_png(bad / "001.png", rng)
    for name in ("000", "001"):
        mask = np.zeros((24, 24), dtype=np.uint8)
        mask[6:12, 8:16] = 255
        Image.fromarray(mask, "L").save(gt / f"{name}_mask.png")
    return root
