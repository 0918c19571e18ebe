import json

import numpy as np
import pytest

import doc_to_lora as d2l


MICRO_LM = {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_head": 4, "d_mlp": 16, "max_seq_len": 512}
MICRO_HYPER = {
    "d_latent": 8,
    "n_latents": 2,
    "n_xattn_blocks": 1,
    "n_heads": 2,
    "d_proj_hidden": 8,
    "d_mlp": 8,
    "source_layer": 1,
    "max_chunk_tokens": 32,
    "min_chunk_tokens": 4,
}


def test_tokenizer_round_trip():
    text = "The special magic number is 1234."
    assert d2l.decode(d2l.encode(text)) == text
    assert d2l.vocab_size == 78


def test_niah_sample_is_exact_length():
    s = d2l.niah_sample(300, seed=3)
    assert len(s["haystack"]) == 300
    assert s["answer"] in s["haystack"]
    assert s["answer"] == s["needle"]


def test_chunking_and_footprint():
    assert d2l.chunk_sizes(100, 32) == [25, 25, 25, 25]
    assert d2l.chunk_sizes(10, 32) == [10]
    assert d2l.kv_cache_footprint(0, 0, None, 4) == 0
    assert d2l.kv_cache_footprint(10, 0, None, 4) * 2 == d2l.kv_cache_footprint(20, 0, None, 4)


def test_losses():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(4, 78)).astype(np.float32)
    assert d2l.kl_loss(t, t) < 1e-7
    assert abs(d2l.ce_loss(np.zeros((2, 78), np.float32), [1, 2]) - np.log(78)) < 1e-6


def test_hypernet_adapter_round_trip(tmp_path):
    lm = d2l.init_lm(MICRO_LM, seed=1)
    hn = d2l.init_hypernet(MICRO_HYPER, lm, seed=2)
    ctx = d2l.niah_sample(100, seed=4)["haystack"]
    ad = hn.internalize(lm, ctx)
    assert ad.n_chunks == 4
    assert ad.total_rank == 8
    it = hn.internalize(lm, ctx, mode="iterative")
    q = d2l.student_prompt(d2l.niah_query)
    assert np.max(np.abs(lm.logits(q, adapter=ad) - lm.logits(q, adapter=it))) <= 1e-4
    path = str(tmp_path / "a.d2la")
    ad.save(path)
    assert d2l.load_adapter(path) == ad
    assert d2l.adapter_from_bytes(ad.to_bytes()) == ad
    before = lm.checksum
    lm.generate(q, max_new=4, adapter=ad)
    assert lm.checksum == before


def test_config_validation_lists_problems():
    cfg = d2l.default_config()
    cfg["schedule"]["lr"] = -1
    cfg["loss"] = "telepathy"
    with pytest.raises(ValueError) as e:
        d2l.validate_config(cfg)
    assert "schedule.lr" in str(e.value)
    assert "loss" in str(e.value)
    with pytest.raises(d2l.ConfigError, match="bogus: unknown field"):
        d2l.validate_config({"bogus": 1})
    assert json.dumps(d2l.validate_config({"name": "ok"}))
