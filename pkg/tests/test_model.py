import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_backbone, make_model, make_table, randomize_adapter
from e4srec.autodiff import Tensor, eval_mode
from e4srec.autodiff import functional as F
from e4srec.autodiff.gradcheck import check_gradients
from e4srec.backbone import BackboneConfig, BackboneWeights, Vocabulary
from e4srec.data import SplitDataset
from e4srec.errors import ContractError, OutOfRangeError
from e4srec.model import (
    E4SRecModel, PromptTemplate, TrainConfig, loss, make_optimizer, train, training_instances, training_step,
)


def test_prompt_length_arithmetic(backbone):
    template = PromptTemplate(instruction="predict the next item now", response_marker="### Response: >")
    prefix, suffix = template.render(backbone.vocab)
    assert (len(prefix), len(suffix)) == (12, 4)
    model = make_model(backbone)
    model.template = template
    model.prefix, model.suffix = prefix, suffix
    embeds, mask = model.assemble_input([[3, 1, 4]])
    assert embeds.shape == (1, 19, backbone.config.dim)
    assert mask.all()
    kinds = [k for k, _ in template.segments(backbone.vocab, 3)]
    assert kinds == ["text", "items", "text"]


def test_default_input_projection_shape():
    vocab = Vocabulary()
    bb = BackboneWeights.initialize(BackboneConfig(vocab_size=len(vocab)), vocab)
    model = E4SRecModel.create(bb, make_table(d_s=64))
    assert model.w_in.shape == (64, 128)
    assert model.w_out.shape == (128, 20)


def test_permuting_items_touches_only_their_positions(backbone):
    model = make_model(backbone)
    a, _ = model.assemble_input([[5, 6, 7, 8]])
    b, _ = model.assemble_input([[5, 8, 7, 6]])
    diff = np.any(a.data[0] != b.data[0], axis=-1)
    start = len(model.prefix)
    assert np.flatnonzero(diff).tolist() == [start + 1, start + 3]


def test_left_padding_in_batches_matches_single_rows(backbone):
    model = make_model(backbone)
    randomize_adapter(model)
    hist = [[1, 2, 3, 4, 5, 6], [7, 8]]
    batch = model.scores(hist)
    for r, h in enumerate(hist):
        np.testing.assert_allclose(batch[r], model.scores([h])[0], atol=1e-5)


def test_input_errors(backbone):
    model = make_model(backbone)
    with pytest.raises(OutOfRangeError, match="20"):
        model.predict_scores([1, 20])
    with pytest.raises(ContractError):
        model.predict_scores([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 19), min_size=1, max_size=60))
def test_predict_scores_has_exactly_n_entries(hist):
    model = _shared_model()
    s = model.predict_scores(hist)
    assert s.shape == (20,) and np.all(np.isfinite(s))
    p = model.predict_scores(hist, probabilities=True)
    assert int(np.argmax(s)) == int(np.argmax(p))


_CACHE = {}


def _shared_model():
    if "m" not in _CACHE:
        _CACHE["m"] = make_model()
        randomize_adapter(_CACHE["m"])
    return _CACHE["m"]


def test_zero_output_projection_gives_uniform(backbone):
    model = make_model(backbone)
    model.w_out.data[:] = 0.0
    assert np.all(model.predict_scores([1, 2]) == 0.0)
    np.testing.assert_allclose(model.predict_scores([1, 2], probabilities=True), 1 / 20, rtol=1e-6)


def test_loss_examples():
    assert loss(Tensor(np.zeros(200)), 7).item() == pytest.approx(math.log(200), abs=1e-6)
    assert loss(Tensor(np.array([2.0, 1.0, 0.0])), 0).item() == pytest.approx(0.4076, abs=1e-4)
    assert loss(Tensor(np.array([60.0, 0.0, 0.0])), 0).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(OutOfRangeError):
        loss(Tensor(np.zeros(3)), 3)


def test_no_llm_scores_are_mean_projection(backbone):
    model = make_model(backbone, no_llm=True)
    hist = [2, 9, 9, 4]
    expected = (model.E.data[hist] @ model.w_in.data).mean(axis=0) @ model.w_out.data
    np.testing.assert_allclose(model.predict_scores(hist), expected, rtol=1e-5, atol=1e-6)
    assert model.adapter is None and model.backbone is None


def test_input_projection_gradient_matches_finite_differences(backbone):
    model = make_model(backbone)
    randomize_adapter(model)
    rng = np.random.default_rng(0)
    w0 = rng.normal(0, 0.3, size=model.w_in.shape)
    hist, targets = [[1, 4, 2], [7, 3]], np.array([5, 0])

    def fn(w):
        model.input_projection.weight = w
        return loss(model.logits(hist), targets)

    assert check_gradients(fn, [w0]) < 1e-3


def tiny_split(n_users=40, n_items=20, seed=0):
    # deterministic successor chain: the next item is always (last + 3) % N
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for _ in range(n_users):
        start = int(rng.integers(n_items))
        seq = [(start + 3 * i) % n_items for i in range(6)]
        train.append(seq[:4])
        valid.append(seq[4])
        test.append(seq[5])
    return SplitDataset(list(range(n_users)), train, valid, test, n_items)


def test_repeated_step_reduces_batch_loss(backbone):
    model = make_model(backbone)
    batch = training_instances(tiny_split())[:8]
    opt = make_optimizer(TrainConfig(learning_rate=1e-2, warmup_steps=0, weight_decay=0.0), total_steps=10)
    first = training_step(model, batch, opt)
    for _ in range(4):
        last = training_step(model, batch, opt)
    assert last < first


def _snapshot(model):
    out = {"E": model.E.data.copy(), "W_in": model.w_in.data.copy(), "W_out": model.w_out.data.copy()}
    for name in model.adapter.module_names:
        out[name + ".A"] = model.adapter.A[name].data.copy()
        out[name + ".B"] = model.adapter.B[name].data.copy()
    for name, arr in model.backbone.arrays.items():
        out["backbone." + name] = arr.copy()
    return out


def test_freeze_invariant_and_trainable_set(backbone):
    model = make_model(backbone)
    before_hash = backbone.hash()
    before = _snapshot(model)
    train(model, tiny_split(), TrainConfig(epochs=2, batch_size=8, warmup_steps=1, learning_rate=1e-2,
                                           lora_rank=4, lora_alpha=8), eval_each_epoch=False)
    after = _snapshot(model)
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    expected = {"W_in", "W_out"} | {n + s for n in model.adapter.module_names for s in (".A", ".B")}
    assert changed == expected
    assert backbone.hash() == before_hash


def test_training_is_deterministic(backbone):
    cfg = TrainConfig(epochs=1, batch_size=8, warmup_steps=1, learning_rate=1e-2, lora_rank=4, lora_alpha=8)
    runs = []
    for _ in range(2):
        model = make_model(backbone)
        hist = train(model, tiny_split(), cfg)
        runs.append((hist, [p.data.copy() for p in model.trainable_parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_training_reports_validation_hr(backbone):
    model = make_model(backbone)
    hist = train(model, tiny_split(), TrainConfig(epochs=2, batch_size=8, warmup_steps=1, learning_rate=1e-2,
                                                  lora_rank=4, lora_alpha=8))
    assert [h["epoch"] for h in hist] == [1, 2]
    assert all(0.0 <= h["valid_hr10"] <= 1.0 for h in hist)


def test_training_instances():
    split = tiny_split(n_users=3)
    one = training_instances(split)
    assert len(one) == 3 and all(len(h) == 3 for h, _ in one)
    assert one[0] == (split.train[0][:3], split.train[0][3])
    assert len(training_instances(split, all_prefixes=True)) == 9


def test_train_config_defaults_and_files(tmp_path):
    cfg = TrainConfig()
    assert (cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, cfg.batch_size, cfg.weight_decay) == (16, 16, 0.05, 16, 0.1)
    assert cfg.lora_modules == ("gate_proj", "down_proj", "up_proj")
    (tmp_path / "t.json").write_text(json.dumps({"train": {"epochs": 5, "learning_rate": 1e-3}}))
    (tmp_path / "t.toml").write_text('epochs = 7\nlora_modules = ["up_proj"]\n')
    assert TrainConfig.from_file(tmp_path / "t.json").epochs == 5
    toml = TrainConfig.from_file(tmp_path / "t.toml")
    assert toml.epochs == 7 and toml.lora_modules == ("up_proj",)
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 1}))
    with pytest.raises(ValueError, match="epochz"):
        TrainConfig.from_file(tmp_path / "bad.json")


def test_random_prefix_and_eval_every(backbone):
    split = tiny_split(n_users=10)
    drawn = training_instances(split, rng=np.random.default_rng(0))
    assert len(drawn) == 10
    for (hist, target), seq in zip(drawn, split.train):
        assert seq[:len(hist)] == hist and seq[len(hist)] == target
    cfg = TrainConfig(epochs=3, batch_size=8, warmup_steps=1, learning_rate=1e-2, lora_rank=4, lora_alpha=8,
                      random_prefix=True, eval_every=2)
    hist = train(make_model(backbone), tiny_split(), cfg)
    assert ["valid_hr10" in h for h in hist] == [False, True, True]
