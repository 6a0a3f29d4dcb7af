import json
import math

import numpy as np
import pytest

import orthorank as ort


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    path = tmp_path_factory.mktemp("model")
    cfg = ort.ModelConfig(n_layers=6, d_model=32, n_heads=4, n_kv_heads=2, d_ffn=64,
                          vocab_size=48)
    ort.synthesize_model(cfg, path, seed=5, sink_layer=1)
    return ort.Model.load(path)


def test_config_validation():
    with pytest.raises(ort.ConfigError, match="divisible"):
        ort.ModelConfig(n_layers=2, d_model=32, n_heads=4, n_kv_heads=3, d_ffn=64,
                        vocab_size=16)
    assert issubclass(ort.ConfigError, ort.OrthoRankError)


def test_scores_and_selection():
    states = np.array([[1, 0, 0], [0, 1, 0], [-2, 0, 0]], dtype=np.float32)
    scores = ort.compute_scores(states)
    assert math.isinf(scores[0]) and scores[1] == 0.0 and scores[2] == 2.0
    assert ort.select_topk(np.array([np.inf, 0.5, 0.1, 0.9, 0.2]), 0.4) == [2, 4]
    keep, history = ort.decode_select([np.inf, 0.1, 0.2, 0.9], 0.15, 0.5)
    assert keep and len(history) == 5


def test_gradient_helpers():
    assert ort.cos_gradient([1.0, 0.0], [0.0, 2.0]) == pytest.approx([0.5, 0.0])
    assert ort.importance_norm_sq([0.0, 1.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(ort.DomainError):
        ort.cos_gradient([0.0, 0.0], [1.0, 1.0])


def test_plan_arithmetic():
    assert ort.effective_sparsity(0.30, 0.333) == pytest.approx(0.2001)
    assert ort.plan_layer_count(40, 2, 0.2, 0.333) == 12
    with pytest.raises(ort.ConfigError, match="maximum achievable sparsity"):
        ort.plan_layer_count(8, 2, 0.3, 0.5)


def test_forward_and_perplexity(model):
    tokens = ort.sample_corpus(model, 2, 32, 0.8, 7)
    logits = model.logits(tokens[:32])
    assert logits.shape == (32, 48)
    hidden = model.hidden_states(tokens[:32])
    assert len(hidden) == 6 and hidden[0].shape == (32, 32)

    dense = ort.perplexity(model, tokens, context_len=32)
    assert dense["plan_id"] == "dense"
    plan = ort.calibrate(model, tokens, sparsity=0.15, l_sink=1, context_len=32, max_chunks=2)
    assert len(json.loads(plan)["layers"]) == 1
    sparse = ort.perplexity(model, tokens, plan=plan, context_len=32)
    assert sparse["flop_ratio"] < 1.0
    assert sparse["flop_ratio"] == pytest.approx(ort.flop_ratio(model.config, plan, 32))
    assert len(ort.generate(model, [0, 3, 4], 3, plan=plan)) == 3


def test_similarity_analysis():
    layers = ort.synthetic_sink_trace(10, 12, 16, 2, 0.3, seed=1)
    m = ort.sink_similarity(layers, [1, 2, 3])
    assert m.shape == (10, 3)
    assert np.all(m[9] > m[3])
    c = ort.cross_layer_similarity(layers, 4)
    assert np.allclose(c, c.T) and np.allclose(np.diag(c), 1.0)
    with pytest.raises(ort.UsageError):
        ort.sink_similarity(layers, [0])
