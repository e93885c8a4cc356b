import numpy as np
import pytest

from batchad import attention as A
from batchad import bundle as B
from batchad.errors import ConfigurationError, ShapeError
from conftest import make_toy_bundle, softmax_rows


def _recombine_oracle(attn, v, w, b):
    heads, n1, dh = v.shape
    d = heads * dh
    mixed = np.zeros((n1, d), dtype=np.float64)
    for h in range(heads):
        for i in range(n1):
            for j in range(dh):
                acc = 0.0
                for t in range(n1):
                    acc += float(attn[h, i, t]) * float(v[h, t, j])
                mixed[i, h * dh + j] = acc
    out = np.zeros((n1, d), dtype=np.float64)
    for i in range(n1):
        for j in range(d):
            acc = float(b[j])
            for t in range(d):
                acc += mixed[i, t] * float(w[t, j])
            out[i, j] = acc
    return out


def _random_pack(rng, heads=2, n=4, d=8):
    dh = d // heads
    v = rng.normal(size=(heads, n + 1, dh)).astype(np.float32)
    attn = softmax_rows(rng.normal(size=(heads, n + 1, n + 1))).astype(np.float32)
    w = rng.normal(size=(d, d)).astype(np.float32)
    b = rng.normal(size=d).astype(np.float32)
    return attn, v, w, b


class TestRecombine:
    def test_identity_attention_passes_values_through(self):
        rng = np.random.default_rng(20)
        attn, v, w, b = _random_pack(rng)
        heads, n1, dh = v.shape
        eye = np.broadcast_to(np.eye(n1, dtype=np.float32), (heads, n1, n1)).copy()
        got = A.recombine(eye, v, w, b)
        concat = np.concatenate([v[h] for h in range(heads)], axis=1)
        want = concat.astype(np.float64) @ w.astype(np.float64) + b
        assert np.allclose(got, want, atol=1e-6)

    def test_uniform_attention_collapses_to_projected_mean(self):
        rng = np.random.default_rng(21)
        attn, v, w, b = _random_pack(rng)
        heads, n1, dh = v.shape
        uniform = np.full((heads, n1, n1), 1.0 / n1, dtype=np.float32)
        got = A.recombine(uniform, v, w, b)
        mean_v = np.concatenate(
            [np.full((n1, dh), 0.0) + v[h].astype(np.float64).mean(axis=0)
             for h in range(heads)], axis=1)
        want = mean_v @ w.astype(np.float64) + b
        assert np.allclose(got, want, atol=1e-5)
        assert np.allclose(got, got[0], atol=1e-6)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(22)
        attn, v, w, b = _random_pack(rng, heads=2, n=4, d=8)
        got = A.recombine(attn, v, w, b)
        want = _recombine_oracle(attn, v, w, b)
        assert np.allclose(got, want, atol=1e-6)

    def test_head_dim_mismatch(self):
        rng = np.random.default_rng(23)
        attn, v, w, b = _random_pack(rng)
        with pytest.raises(ShapeError):
            A.recombine(attn, v[:, :-1], w, b)
        with pytest.raises(ShapeError):
            A.recombine(attn, v, w[:-1], b)

    def test_convex_combination_property(self):
        rng = np.random.default_rng(24)
        attn, v, _, _ = _random_pack(rng, heads=2, n=6, d=8)
        mixed = A.attend_values(attn, v)
        heads, n1, dh = v.shape
        for h in range(heads):
            block = mixed[:, h * dh:(h + 1) * dh]
            lo = v[h].min(axis=0) - 1e-6
            hi = v[h].max(axis=0) + 1e-6
            assert (block >= lo).all() and (block <= hi).all()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(25)
        attn, v, w, b = _random_pack(rng, heads=2, n=6, d=8)
        base = A.recombine(attn, v, w, b)
        perm = np.concatenate([[0], 1 + rng.permutation(6)])
        attn_p = attn[:, perm][:, :, perm]
        v_p = v[:, perm]
        permuted = A.recombine(attn_p, v_p, w, b)
        assert np.array_equal(permuted, base[perm])


class TestProjectPatches:
    def test_row_count_and_cls_removed(self):
        rng = np.random.default_rng(26)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        out = A.project_patches(x, np.ones(8, np.float32), np.zeros(8, np.float32),
                                np.eye(8, 6, dtype=np.float32))
        assert out.shape == (4, 6)

    def test_identical_rows_project_identically(self):
        rng = np.random.default_rng(27)
        row = rng.normal(size=8).astype(np.float32)
        x = np.vstack([rng.normal(size=8).astype(np.float32)] + [row] * 4)
        proj = rng.normal(size=(8, 5)).astype(np.float32)
        out = A.project_patches(x, np.ones(8, np.float32), np.zeros(8, np.float32), proj)
        assert np.array_equal(out, np.broadcast_to(out[0], out.shape))

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(28)
        x = rng.normal(size=(6, 10)).astype(np.float32)
        scale = rng.normal(size=10).astype(np.float32)
        bias = rng.normal(size=10).astype(np.float32)
        proj = rng.normal(size=(10, 7)).astype(np.float32)
        got = A.project_patches(x, scale, bias, proj)
        v = x[1:].astype(np.float64)
        mean = v.mean(axis=1, keepdims=True)
        var = ((v - mean) ** 2).mean(axis=1, keepdims=True)
        normed = (v - mean) / np.sqrt(var + 1e-5) * scale + bias
        want = normed @ proj.astype(np.float64)
        assert np.allclose(got, want, atol=1e-5)


class TestSelectAttentionSource:
    def _bundle(self, tmp_path, rng):
        manifest, tensors = make_toy_bundle(rng, n_images=1)
        B.write_bundle(manifest, tensors, tmp_path / "b")
        return B.read_bundle(tmp_path / "b")

    def test_inter_mode(self, tmp_path):
        rng = np.random.default_rng(29)
        bundle = self._bundle(tmp_path, rng)
        entry = bundle.manifest.images[0]
        got = A.select_attention_source(bundle, entry, "inter")
        assert np.array_equal(got, bundle.load(entry.attn_inter))
        pinned = A.select_attention_source(
            bundle, entry, f"inter:{bundle.manifest.inter_attn_layer}")
        assert np.array_equal(pinned, got)

    def test_inter_wrong_layer_rejected(self, tmp_path):
        rng = np.random.default_rng(30)
        bundle = self._bundle(tmp_path, rng)
        entry = bundle.manifest.images[0]
        with pytest.raises(ConfigurationError):
            A.select_attention_source(bundle, entry, "inter:9")

    def test_vv_mode_orthonormal_values(self, tmp_path):
        rng = np.random.default_rng(31)
        bundle = self._bundle(tmp_path, rng)
        entry = bundle.manifest.images[0]
        attn = A.select_attention_source(bundle, entry, "v-v")
        v = bundle.load(entry.v_last)
        heads, n1, dh = v.shape
        for h in range(heads):
            logits = v[h].astype(np.float64) @ v[h].astype(np.float64).T / np.sqrt(dh)
            want = softmax_rows(logits.astype(np.float32).astype(np.float64))
            assert np.allclose(attn[h], want, atol=1e-6)

    def test_vv_orthonormal_oracle(self):
        # orthonormal per-head values: logits = I/sqrt(dh); diagonal bump
        dh = 4
        z = np.zeros((1, dh, dh), dtype=np.float32)
        z[0] = np.eye(dh)
        attn = A.self_attention(z)
        diag = np.exp(1 / np.sqrt(dh)) / (np.exp(1 / np.sqrt(dh)) + (dh - 1))
        off = 1.0 / (np.exp(1 / np.sqrt(dh)) + (dh - 1))
        want = np.full((dh, dh), off)
        np.fill_diagonal(want, diag)
        assert np.allclose(attn[0], want, atol=1e-6)

    def test_qq_absent_rejected(self, tmp_path):
        rng = np.random.default_rng(32)
        bundle = self._bundle(tmp_path, rng)
        entry = bundle.manifest.images[0]
        with pytest.raises(ConfigurationError):
            A.select_attention_source(bundle, entry, "q-q")

    def test_unknown_mode_rejected(self, tmp_path):
        rng = np.random.default_rng(33)
        bundle = self._bundle(tmp_path, rng)
        entry = bundle.manifest.images[0]
        with pytest.raises(ConfigurationError):
            A.select_attention_source(bundle, entry, "qk-mixed")
