import pytest

from quantsweep.quality import TASKS, QualityError, load_quality

Q = load_quality()


def test_anchor_13b_fp16_chat_s():
    assert Q.quality("llama2-13b", "FP16", "chat-S") == 60.0


def test_anchor_13b_w8a8kv8_int_chat_s():
    assert Q.quality("llama2-13b", "W8A8KV8-INT", "chat-S") == pytest.approx(50.48)


def test_pct_change_anchor_near_16_percent_decline():
    pct = Q.pct_change_vs_fp16("llama2-13b", "W8A8KV8-INT", "chat-S")
    assert pct == pytest.approx(-15.9, abs=0.5)


def test_pct_change_13b_w8a8_int_code():
    assert Q.pct_change_vs_fp16("llama2-13b", "W8A8-INT", "code") == pytest.approx(-92.0, abs=0.5)


def test_fp16_pct_change_zero_everywhere():
    for model in Q.models():
        for task in TASKS:
            assert Q.pct_change_vs_fp16(model, "FP16", task) == 0.0


def test_70b_chat_s_nearly_lossless():
    for method in Q.methods("llama2-70b"):
        assert Q.pct_change_vs_fp16("llama2-70b", method, "chat-S") >= -5.0


def test_w8a8_int_worst_on_code_per_model():
    for model in Q.models():
        w8a8 = Q.quality(model, "W8A8-INT", "code")
        others = [Q.quality(model, m, "code") for m in Q.methods(model) if m != "W8A8-INT"]
        assert all(w8a8 <= o for o in others)


def test_kv_compression_worsens_weight_only_quality():
    for model in Q.models():
        for task in TASKS:
            assert Q.quality(model, "W8A16KV8-INT", task) <= Q.quality(model, "W8A16-INT", task)
            assert Q.quality(model, "W4A16KV8-INT", task) <= Q.quality(model, "W4A16-INT", task)


def test_w8a16_int_is_top_quality_quantized_method():
    # the Quality-First strategy relies on this ranking
    for model in Q.models():
        for task in TASKS:
            best = Q.quality(model, "W8A16-INT", task)
            for method in Q.methods(model):
                if method in ("FP16", "W8A16-INT"):
                    continue
                assert Q.quality(model, method, task) < best


def test_missing_entry_lists_available_keys():
    with pytest.raises(QualityError, match="llama2-13b"):
        Q.quality("llama2-9000b", "FP16", "chat-S")


def test_scores_bounded():
    for score in Q.entries.values():
        assert 0.0 <= score <= 100.0
