import struct

import numpy as np
import pytest
import torch

from boxprompt.backbone import (
    CACHE_MAGIC,
    CacheEntry,
    ImageEmbedding,
    MedSamBackbone,
    TOY_SPEC,
    ToyBackbone,
    cache_get,
    cache_key,
    cache_put,
    read_embedding_file,
)
from boxprompt.errors import (
    BackboneUnavailable,
    CacheConflict,
    ShapeMismatch,
    WrongInputSize,
)
from boxprompt.geometry import TightBox
from boxprompt.promptnet import PromptEmbedding


@pytest.fixture(scope="module")
def toy():
    return ToyBackbone(TOY_SPEC, seed=0)


def rand_prompt(gen=None, dtype=torch.float32):
    g = torch.Generator().manual_seed(0) if gen is None else gen
    dense = torch.rand(
        (TOY_SPEC.dense_prompt_channels, *TOY_SPEC.dense_prompt_grid),
        generator=g, dtype=dtype,
    )
    sparse = torch.randn((2, TOY_SPEC.token_dim), generator=g, dtype=dtype)
    return PromptEmbedding(dense=dense, sparse=sparse)


class TestToyEncoder:
    def test_deterministic(self, toy):
        img = torch.zeros(3, 64, 64)
        a = toy.encode_image(img, "a")
        b = toy.encode_image(img, "a")
        assert torch.equal(a.data, b.data)
        assert a.backbone_fingerprint == toy.fingerprint

    def test_single_pixel_sensitivity(self, toy):
        img = torch.zeros(3, 64, 64)
        img2 = img.clone()
        img2[:, 10, 10] = 1.0
        a = toy.encode_image(img, "a")
        b = toy.encode_image(img2, "b")
        assert not torch.equal(a.data, b.data)

    def test_wrong_input_size(self, toy):
        with pytest.raises(WrongInputSize):
            toy.encode_image(torch.zeros(3, 32, 32))

    def test_embedding_shape(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        assert tuple(emb.data.shape) == (TOY_SPEC.embed_channels, *TOY_SPEC.embed_grid)


class TestToyDecoder:
    def test_outputs_in_open_unit_interval(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        prob = toy.decode_mask(emb, rand_prompt(), (64, 64))
        assert prob.shape == (64, 64)
        assert float(prob.min()) > 0.0 and float(prob.max()) < 1.0

    def test_zero_prompt_zero_bias_gives_half(self):
        tb = ToyBackbone(TOY_SPEC, seed=0, decoder_bias=0.0)
        emb = tb.encode_image(torch.rand(3, 64, 64))
        zero = PromptEmbedding(
            dense=torch.zeros(TOY_SPEC.dense_prompt_channels, *TOY_SPEC.dense_prompt_grid),
            sparse=torch.zeros(2, TOY_SPEC.token_dim),
        )
        prob = tb.decode_mask(emb, zero, (64, 64))
        assert torch.equal(prob, torch.full((64, 64), 0.5))

    def test_default_bias_zero_prompt_constant(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        zero = PromptEmbedding(
            dense=torch.zeros(TOY_SPEC.dense_prompt_channels, *TOY_SPEC.dense_prompt_grid),
            sparse=torch.zeros(2, TOY_SPEC.token_dim),
        )
        prob = toy.decode_mask(emb, zero, (32, 32))
        assert torch.allclose(prob, torch.sigmoid(torch.tensor(toy._out_bias)))

    def test_shape_mismatch(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        bad = rand_prompt()
        bad.dense = bad.dense[:, :16, :16]
        with pytest.raises(ShapeMismatch):
            toy.decode_mask(emb, bad, (64, 64))

    def test_gradient_flows_to_prompt_not_backbone(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        pr = rand_prompt()
        pr.dense.requires_grad_(True)
        pr.sparse.requires_grad_(True)
        toy.decode_mask(emb, pr, (64, 64)).mean().backward()
        assert pr.dense.grad is not None and pr.dense.grad.abs().sum() > 0
        assert pr.sparse.grad is not None
        assert all(not w.requires_grad for w in toy.parameters().values())

    def test_decode_gradient_finite_differences(self):
        tb = ToyBackbone(TOY_SPEC, seed=0, dtype=torch.float64)
        emb = tb.encode_image(torch.rand(3, 64, 64, dtype=torch.float64))
        pr = rand_prompt(dtype=torch.float64)
        pr.dense.requires_grad_(True)
        tb.decode_mask(emb, pr, (48, 48)).mean().backward()
        grad = pr.dense.grad
        rng = np.random.default_rng(1)
        h = 1e-4
        for _ in range(8):
            c = int(rng.integers(0, pr.dense.shape[0]))
            r = int(rng.integers(0, pr.dense.shape[1]))
            cc = int(rng.integers(0, pr.dense.shape[2]))
            dp = pr.dense.detach().clone()
            dm = pr.dense.detach().clone()
            dp[c, r, cc] += h
            dm[c, r, cc] -= h
            up = float(tb.decode_mask(emb, PromptEmbedding(dp, pr.sparse.detach()), (48, 48)).mean())
            dn = float(tb.decode_mask(emb, PromptEmbedding(dm, pr.sparse.detach()), (48, 48)).mean())
            num = (up - dn) / (2 * h)
            ana = float(grad[c, r, cc])
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-6)

    def test_decoder_grid_resize_path(self):
        spec_small_decode = TOY_SPEC
        tb = ToyBackbone(spec_small_decode, seed=3)
        emb = tb.encode_image(torch.rand(3, 64, 64))
        prob = tb.decode_mask(emb, rand_prompt(), (100, 80))
        assert prob.shape == (100, 80)


class TestBoxPrompt:
    def test_deterministic(self, toy):
        a = toy.encode_box_prompt(TightBox(4, 4, 20, 30))
        b = toy.encode_box_prompt(TightBox(4, 4, 20, 30))
        assert torch.equal(a.dense, b.dense) and torch.equal(a.sparse, b.sparse)

    def test_distinct_boxes_distinct_tokens(self, toy):
        a = toy.encode_box_prompt(TightBox(4, 4, 20, 30))
        b = toy.encode_box_prompt(TightBox(5, 4, 20, 30))
        assert not torch.equal(a.sparse, b.sparse)

    def test_degenerate_box_ok(self, toy):
        out = toy.encode_box_prompt(TightBox(10, 10, 10, 10))
        assert torch.isfinite(out.sparse).all() and torch.isfinite(out.dense).all()

    def test_box_outside_input_raises(self, toy):
        with pytest.raises(ShapeMismatch):
            toy.encode_box_prompt(TightBox(0, 0, 63, 80))

    def test_decodes_with_box_prompt(self, toy):
        emb = toy.encode_image(torch.rand(3, 64, 64))
        pr = toy.encode_box_prompt(TightBox(8, 8, 40, 40))
        prob = toy.decode_mask(emb, pr, (64, 64))
        assert prob.shape == (64, 64)
        assert float(prob.min()) > 0.0 and float(prob.max()) < 1.0


class TestFrozenWeights:
    def test_checksum_stable_under_use(self, toy):
        before = toy.checksum()
        emb = toy.encode_image(torch.rand(3, 64, 64))
        toy.decode_mask(emb, rand_prompt(), (64, 64))
        toy.encode_box_prompt(TightBox(0, 0, 10, 10))
        assert toy.checksum() == before

    def test_checksum_differs_across_seeds(self):
        assert ToyBackbone(TOY_SPEC, 0).checksum() != ToyBackbone(TOY_SPEC, 1).checksum()


class TestCache:
    def _entry(self, toy, sid="img0"):
        emb = toy.encode_image(torch.rand(3, 64, 64), source_id=sid)
        key = cache_key(sid, toy.fingerprint)
        return key, CacheEntry(key=key, payload=emb)

    def test_roundtrip_bit_exact(self, toy, tmp_path):
        key, entry = self._entry(toy)
        assert cache_put(tmp_path, entry) is True
        got = cache_get(tmp_path, key)
        assert got is not None
        assert torch.equal(got.payload.data, entry.payload.data)
        assert got.payload.backbone_fingerprint == toy.fingerprint

    def test_miss_returns_none(self, tmp_path):
        assert cache_get(tmp_path, "0" * 64) is None

    def test_idempotent_put(self, toy, tmp_path):
        key, entry = self._entry(toy)
        assert cache_put(tmp_path, entry) is True
        assert cache_put(tmp_path, entry) is False  # no rewrite

    def test_conflicting_fingerprint(self, toy, tmp_path):
        key, entry = self._entry(toy)
        cache_put(tmp_path, entry)
        other = CacheEntry(
            key=key,
            payload=ImageEmbedding(entry.payload.data, "img0", "other-backbone"),
        )
        with pytest.raises(CacheConflict):
            cache_put(tmp_path, other)

    def test_conflicting_payload(self, toy, tmp_path):
        key, entry = self._entry(toy)
        cache_put(tmp_path, entry)
        other = CacheEntry(
            key=key,
            payload=ImageEmbedding(
                entry.payload.data + 1.0, "img0", toy.fingerprint
            ),
        )
        with pytest.raises(CacheConflict):
            cache_put(tmp_path, other)

    def test_file_format_layout(self, toy, tmp_path):
        key, entry = self._entry(toy)
        cache_put(tmp_path, entry)
        raw = (tmp_path / f"{key}.pemb").read_bytes()
        assert raw[:5] == CACHE_MAGIC
        c, h, w = struct.unpack("<3I", raw[5:17])
        assert (c, h, w) == tuple(entry.payload.data.shape)
        payload_end = 17 + c * h * w * 4
        arr = np.frombuffer(raw[17:payload_end], dtype="<f4").reshape(c, h, w)
        assert np.array_equal(arr, entry.payload.data.numpy())
        (fp_len,) = struct.unpack("<I", raw[payload_end : payload_end + 4])
        fp = raw[payload_end + 4 : payload_end + 4 + fp_len].decode("utf-8")
        assert fp == toy.fingerprint
        assert payload_end + 4 + fp_len == len(raw)

    def test_key_depends_on_source_and_fingerprint(self):
        assert cache_key("a", "f1") != cache_key("b", "f1")
        assert cache_key("a", "f1") != cache_key("a", "f2")
        assert cache_key("a", "f1") == cache_key("a", "f1")

    def test_read_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.pemb"
        p.write_bytes(b"WRONG" + b"\x00" * 40)
        from boxprompt.errors import IOFailure

        with pytest.raises(IOFailure):
            read_embedding_file(p)


class TestMedSamAdapter:
    def test_missing_weights_unavailable(self):
        with pytest.raises(BackboneUnavailable):
            MedSamBackbone("/nonexistent/medsam_vitb.pth")

    def test_none_weights_unavailable(self):
        with pytest.raises(BackboneUnavailable):
            MedSamBackbone(None)

    def test_weights_present_but_package_missing(self, tmp_path):
        # with a real file the adapter proceeds to import the optional
        # dependency; either outcome must surface as BackboneUnavailable
        fake = tmp_path / "weights.pth"
        fake.write_bytes(b"\x00" * 16)
        with pytest.raises(BackboneUnavailable):
            MedSamBackbone(fake)
