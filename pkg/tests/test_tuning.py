import math

import numpy as np
import pytest

from graphprompt import autodiff as ad
from graphprompt.autodiff import Tensor, gradient_check
from graphprompt.encoder import EncoderConfig, init_params
from graphprompt.errors import ContractError
from graphprompt.graph import SyntheticSpec, generate_synthetic
from graphprompt.readout import readout
from graphprompt.sampling import GRAPH, sample_kshot_task
from graphprompt.tuning import (
    LINEAR_PROMPT, NO_PROMPT, PROMPT, EmbeddingCache, TuneConfig, class_prototypes,
    classifier_logits, cross_entropy, initial_head, load_head, predict, predict_instances,
    predict_many, prompt_loss, prototype_loss, save_head, tunable_param_count, tune_head,
)


@pytest.fixture(scope="module")
def setup():
    spec = SyntheticSpec(num_graphs=40, nodes_per_graph=(8, 14), edge_prob=0.3, feature_dim=5,
                         graph_class_count=2, separation=3.0)
    coll = generate_synthetic(spec, 4)
    cache = EmbeddingCache(coll, init_params(EncoderConfig(input_dim=5), 0))
    triple = sample_kshot_task(coll, GRAPH, 3, seed=2)
    return coll, cache, triple


def test_prototype_of_single_shot_is_itself():
    assert class_prototypes({0: [np.array([1.0, 2.0])]})[0].tolist() == [1.0, 2.0]


def test_prototype_is_mean():
    assert class_prototypes({3: [np.array([0.0, 2.0]), np.array([2.0, 0.0])]})[3].tolist() == [1.0, 1.0]


def test_prototype_loop_oracle(rng):
    embs = {c: list(rng.standard_normal((4, 3))) for c in range(3)}
    protos = class_prototypes(embs)
    for c, rows in embs.items():
        want = [sum(r[j] for r in rows) / len(rows) for j in range(3)]
        np.testing.assert_allclose(protos[c], want, atol=1e-12)


def test_predict_matching_prototype_and_ties():
    protos = {2: np.array([1.0, 0.0]), 5: np.array([0.0, 1.0])}
    assert predict(np.array([3.0, 0.1]), protos) == 2
    assert predict(np.array([0.1, 3.0]), protos) == 5
    assert predict(np.array([1.0, 1.0]), protos) == 2
    assert predict(np.array([1.0, 1.0]), {5: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0])}) == 2
    with pytest.raises(ContractError):
        predict(np.ones(2), {})


def test_predict_brute_force(rng):
    protos = {c: rng.standard_normal(6) for c in (1, 4, 7, 9)}
    inst = rng.standard_normal((20, 6))
    for x, got in zip(inst, predict_many(inst, protos)):
        sims = {c: float(x @ p / (np.linalg.norm(x) * np.linalg.norm(p))) for c, p in protos.items()}
        assert got == max(sorted(sims), key=lambda c: sims[c])


def test_predict_scale_invariant(rng):
    protos = {c: rng.standard_normal(4) for c in range(3)}
    inst = rng.standard_normal((15, 4))
    base = predict_many(inst, protos)
    assert np.array_equal(predict_many(3.5 * inst, protos), base)
    assert np.array_equal(predict_many(inst, {c: 0.2 * p for c, p in protos.items()}), base)


def test_prototype_loss_values():
    s = Tensor(np.array([[1.0, 0.0]]))
    equal = prototype_loss(s, np.array([0]), Tensor(np.array([[1.0, 1.0], [1.0, -1.0]])), (0, 1), 1.0)
    assert float(equal.data) == pytest.approx(math.log(2), abs=1e-12)
    # sims (1, 0, 0): log(e + 2) - 1
    protos = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
    three = prototype_loss(s, np.array([0]), protos, (0, 1, 2), 1.0)
    assert float(three.data) == pytest.approx(0.5514, abs=1e-4)


def test_param_counts():
    assert tunable_param_count(PROMPT, 96, 2) == 96
    assert tunable_param_count(LINEAR_PROMPT, 96, 2) == 9216
    assert tunable_param_count(NO_PROMPT, 96, 2) == 96 * 2 + 2
    for v, n in ((PROMPT, 96), (LINEAR_PROMPT, 9216), (NO_PROMPT, 194)):
        assert initial_head(v, 96, (0, 1), 0).num_params == n


def _plain_predictions(cache, triple):
    def emb(ref):
        return readout(cache.embeddings(ref), np.arange(cache.collection[ref].num_nodes))
    by_class = {c: [emb(r) for r, y in triple.train.support if y == c] for c in triple.train.classes}
    return predict_many(np.stack([emb(r) for r, _ in triple.test_query]), class_prototypes(by_class))


def test_initial_prompt_matches_plain_classifier(setup):
    _, cache, triple = setup
    for variant in (PROMPT, LINEAR_PROMPT):
        head = initial_head(variant, cache.emb_dim, triple.train.classes, 0)
        got = predict_instances(cache, triple.train, head, triple.test_query)
        assert np.array_equal(got, _plain_predictions(cache, triple))


def test_zero_epochs_keeps_ones(setup):
    _, cache, triple = setup
    head = tune_head(triple.train, cache, TuneConfig(max_epochs=0), triple.val)
    assert head.values["p"].tolist() == [1.0] * 96
    got = predict_instances(cache, triple.train, head, triple.test_query)
    assert np.array_equal(got, _plain_predictions(cache, triple))


def test_tuning_leaves_encoder_frozen_and_is_deterministic(setup):
    _, cache, triple = setup
    before = cache.params.digest()
    cfg = TuneConfig(max_epochs=15, seed=3)
    a = tune_head(triple.train, cache, cfg, triple.val)
    b = tune_head(triple.train, cache, cfg, triple.val)
    assert cache.params.digest() == before
    assert a.values["p"].tobytes() == b.values["p"].tobytes()
    assert a.best_epoch == b.best_epoch and a.history == b.history


@pytest.mark.parametrize("variant", [PROMPT, LINEAR_PROMPT, NO_PROMPT])
def test_training_fits_planted_support(setup, variant):
    _, cache, triple = setup
    head = tune_head(triple.train, cache, TuneConfig(variant=variant, max_epochs=100, learning_rate=0.05))
    pred = predict_instances(cache, triple.train, head, triple.train.support)
    assert np.mean(pred == np.array([c for _, c in triple.train.support])) == 1.0
    assert head.history[-1] <= head.history[0]


def test_prompt_loss_rejects_no_prompt(setup):
    _, cache, triple = setup
    with pytest.raises(ContractError):
        prompt_loss(cache, triple.train, initial_head(NO_PROMPT, 96, (0, 1), 0), 1.0)


def test_cross_entropy_gradient(rng):
    s = Tensor(rng.standard_normal((6, 4)))
    labels = np.array([0, 1, 2, 1, 0, 2])

    def loss(p):
        return cross_entropy(classifier_logits(s, p), labels, (0, 1, 2))

    res = gradient_check(loss, {"W": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)})
    assert res.checked == 15 and res.max_relative_error < 1e-6


def test_cross_entropy_value():
    logits = Tensor(np.array([[0.0, 0.0], [3.0, 1.0]]))
    got = float(cross_entropy(logits, np.array([1, 0]), (0, 1)).data)
    assert got == pytest.approx(math.log(2) + math.log(1 + math.exp(-2)), abs=1e-12)


def test_head_round_trip(tmp_path, setup):
    _, cache, triple = setup
    head = tune_head(triple.train, cache, TuneConfig(variant=LINEAR_PROMPT, max_epochs=3))
    back = load_head(save_head(head, tmp_path / "h.json"))
    assert back.variant == LINEAR_PROMPT and back.classes == head.classes
    assert back.values["P"].tobytes() == head.values["P"].tobytes()
    np.testing.assert_array_equal(
        predict_instances(cache, triple.train, back, triple.test_query),
        predict_instances(cache, triple.train, head, triple.test_query),
    )
