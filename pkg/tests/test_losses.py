import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pflsim import numerics as nx
from pflsim.losses import (
    Batch,
    LossWeights,
    client_loss,
    cross_entropy,
    distance_loss,
    regularizer,
)
from pflsim.model import (
    AnswerHead,
    Backbone,
    HeadParams,
    InputError,
    ModelConfig,
    PromptSet,
)
from pflsim.numerics import DimensionError, Tensor, grad_check

TINY = ModelConfig(blocks=2, prompt_len=4, width=8, heads=2, image_vocab=12, text_vocab=10,
                   image_len=4, question_len=3, head_hidden=16, init_std=0.3, embed_std=1.0, prompt_std=0.5)

finite = st.floats(-5, 5, allow_nan=False)


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.alpha, w.beta) == (0.5, 0.001)
    for bad in (-0.1, math.inf, math.nan):
        with pytest.raises(ValueError):
            LossWeights(alpha=bad)
        with pytest.raises(ValueError):
            LossWeights(beta=bad)


# --- cross entropy ----------------------------------------------------------


def test_ce_confident_correct_is_zero():
    assert cross_entropy(Tensor(np.array([100.0, 0.0, 0.0])), 0).item() < 1e-40


def test_ce_uniform_is_log_k():
    assert cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)


def test_ce_huge_logits_stay_finite():
    val = cross_entropy(Tensor(np.array([1e4, -1e4, 0.0])), 1).item()
    assert val == pytest.approx(2e4)


def test_ce_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy(Tensor(np.zeros(3)), 3)
    with pytest.raises(InputError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, -1])


def test_ce_is_batch_mean():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    per_row = [cross_entropy(Tensor(logits[i]), labels[i]).item() for i in range(5)]
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(np.mean(per_row), abs=1e-14)


def test_ce_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=5), requires_grad=True)
    cross_entropy(z, 3).backward()
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    p[3] -= 1
    np.testing.assert_allclose(z.grad, p, atol=1e-14)
    assert grad_check(lambda: cross_entropy(z, 3), {"z": z}).passed


@given(arrays(np.float64, (3, 4), elements=finite), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_ce_nonnegative(z, labels):
    assert cross_entropy(Tensor(z), labels).item() >= 0


# --- distance ---------------------------------------------------------------


def prompt(values, modality="image", kind="local"):
    return PromptSet(np.asarray(values, dtype=float), modality, kind)


def test_distance_identical_is_zero():
    p = prompt(np.random.default_rng(0).normal(size=(2, 4, 3)))
    assert distance_loss(p, prompt(p.values, kind="shared")).item() == pytest.approx(0, abs=1e-15)


def test_distance_orthogonal_is_one():
    a = np.zeros((1, 2, 2))
    b = np.zeros((1, 2, 2))
    a[0, 0, 0] = 1
    b[0, 1, 1] = 3
    assert distance_loss(prompt(a), prompt(b, kind="shared")).item() == 1.0


def test_distance_opposite_is_two():
    a = np.random.default_rng(2).normal(size=(2, 2, 3))
    assert distance_loss(prompt(a), prompt(-a, kind="shared")).item() == pytest.approx(2, abs=1e-15)


def test_distance_zero_shared_is_zero_without_gradient():
    local = Tensor(np.ones((2, 2, 3)), requires_grad=True)
    out = distance_loss(local, Tensor(np.zeros((2, 2, 3))))
    assert out.item() == 0.0
    assert not out.requires_grad


def test_distance_shape_and_modality_errors():
    with pytest.raises(DimensionError):
        distance_loss(prompt(np.ones((1, 2, 3))), prompt(np.ones((1, 2, 4))))
    with pytest.raises(DimensionError):
        distance_loss(prompt(np.ones((1, 2, 3))), prompt(np.ones((1, 2, 3)), modality="text"))


def test_distance_shared_gets_no_gradient():
    rng = np.random.default_rng(3)
    local = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    shared = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    distance_loss(local, shared).backward()
    assert local.grad is not None and shared.grad is None
    assert grad_check(lambda: distance_loss(local, shared), {"local": local}).passed


@given(arrays(np.float64, (1, 2, 3), elements=finite), arrays(np.float64, (1, 2, 3), elements=finite),
       st.floats(1e-3, 1e3))
def test_distance_scale_invariant_and_bounded(a, b, c):
    d = distance_loss(Tensor(a), Tensor(b)).item()
    assert -1e-12 <= d <= 2 + 1e-12
    if np.any(a) and np.any(b):
        assert distance_loss(Tensor(c * a), Tensor(b)).item() == pytest.approx(d, abs=1e-9)


# --- regularizer ------------------------------------------------------------


def tiny_head(seed=0, n_answers=3):
    return AnswerHead.init(TINY, n_answers, np.random.default_rng(seed))


def test_regularizer_zero_and_single_weight():
    head = tiny_head()
    for arr in head.arrays().values():
        arr[...] = 0.0
    assert regularizer(head).item() == 0.0
    head.w1[0, 0] = 3.0
    head.b1[0] = 100.0  # biases excluded
    assert regularizer(head).item() == 9.0


def test_regularizer_gradient_is_2w():
    hp = HeadParams.of(tiny_head(), requires_grad=True)
    regularizer(hp).backward()
    np.testing.assert_array_equal(hp.w1.grad, 2 * hp.w1.data)
    np.testing.assert_array_equal(hp.w2.grad, 2 * hp.w2.data)
    assert hp.b1.grad is None or not np.any(hp.b1.grad)


# --- full client loss -------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(7)
    bb = Backbone.init(TINY, seed=11)
    batch = Batch(
        image_tokens=rng.integers(0, TINY.image_vocab, size=(3, TINY.image_len)),
        question_tokens=np.array([[1, 4, 0], [2, 0, 0], [5, 6, 7]]),
        question_valid=np.array([[1, 1, 0], [1, 0, 0], [1, 1, 1]], dtype=bool),
        labels=np.array([0, 2, 1]),
    )
    return bb, batch


def prompts(seed, requires_grad=False):
    rng = np.random.default_rng(seed)
    return {t: Tensor(PromptSet.random(TINY, t, rng).values, requires_grad=requires_grad) for t in ("image", "text")}


def test_alpha_beta_zero_is_plain_ce(setup):
    bb, batch = setup
    head = HeadParams.of(tiny_head())
    parts = client_loss(batch, bb, prompts(1), prompts(2), head, LossWeights(0.0, 0.0), train=False)
    assert parts.total.item() == parts.ce


def test_zero_shared_gives_ce_plus_beta_r(setup):
    bb, batch = setup
    head = HeadParams.of(tiny_head())
    zeros = {t: Tensor(np.zeros((TINY.blocks, TINY.prompt_len, TINY.width))) for t in ("image", "text")}
    w = LossWeights()
    parts = client_loss(batch, bb, prompts(1), zeros, head, w, train=False)
    assert parts.ld == 0.0
    assert parts.total.item() == parts.ce + w.beta * parts.reg


def test_ld_is_mean_over_towers(setup):
    bb, batch = setup
    local, shared = prompts(1), prompts(2)
    parts = client_loss(batch, bb, local, shared, HeadParams.of(tiny_head()), LossWeights(), train=False)
    per = [distance_loss(local[t], shared[t]).item() for t in ("image", "text")]
    assert parts.ld == pytest.approx(np.mean(per), abs=1e-15)
    only_img = client_loss(batch, bb, {"image": local["image"], "text": None},
                           {"image": shared["image"], "text": None}, HeadParams.of(tiny_head()),
                           LossWeights(), train=False)
    assert only_img.ld == pytest.approx(per[0], abs=1e-15)


def test_full_client_loss_gradient(setup):
    bb, batch = setup
    local = prompts(3, requires_grad=True)
    shared = prompts(4)
    head = HeadParams.of(tiny_head(), requires_grad=True)
    mask = nx.DropoutMask.sample((3, TINY.head_hidden), TINY.head_dropout, np.random.default_rng(5))
    w = LossWeights(0.5, 0.01)

    def f():
        return client_loss(batch, bb, local, shared, head, w, train=True, dropout_mask=mask).total

    params = {"p_img": local["image"], "p_txt": local["text"], **head.tensors()}
    rep = grad_check(f, params)
    assert rep.max_error < 1e-4, rep.errors


def test_no_gradient_reaches_backbone_or_shared(setup):
    bb, batch = setup
    local, shared = prompts(3, requires_grad=True), prompts(4)
    head = HeadParams.of(tiny_head(), requires_grad=True)
    client_loss(batch, bb, local, shared, head, LossWeights(), train=True, rng=np.random.default_rng(0)).total.backward()
    assert not bb.has_gradients()
    assert all(s.grad is None for s in shared.values())
    assert all(p.grad is not None for p in local.values())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3), st.floats(0, 1))
def test_client_loss_nonnegative(setup, seed, alpha, beta):
    bb, batch = setup
    parts = client_loss(batch, bb, prompts(seed), prompts(seed + 1), HeadParams.of(tiny_head(seed)),
                        LossWeights(alpha, beta), train=True, rng=np.random.default_rng(seed))
    assert parts.total.item() >= 0
    assert 0 <= parts.ld <= 2
