import copy

import numpy as np
import pytest

from vflbackdoor import gradcheck, nn
from vflbackdoor.errors import ConfigError, ProtocolError
from vflbackdoor.protocol import (SUM_HEAD, TRAINABLE_HEAD, ActiveParty, FunctionInterceptor,
                                  Interceptor, PassiveParty, Site, build_parties,
                                  forward_logits, merge_trainable, merge_untrainable, predict,
                                  run_round)
from vflbackdoor.reference import MonolithicNet, protocol_parameters


def setup(head, n=40, widths=(6, 5), classes=4, seed=0, lr=0.05):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=(n, w)) for w in widths]
    labels = rng.integers(0, classes, n)
    parties, active = build_parties(blocks, labels, classes, head, rng,
                                    optimizer=nn.SgdState(lr))
    return blocks, labels, parties, active


def params_close(a, b, tol):
    return max(np.abs(x - y).max() for x, y in zip(a, b)) <= tol


@pytest.mark.parametrize("head", [SUM_HEAD, TRAINABLE_HEAD])
def test_rounds_match_monolithic(head):
    blocks, labels, parties, active = setup(head)
    mono = MonolithicNet.from_protocol(parties, active)
    x = np.hstack(blocks)
    order = np.random.default_rng(9).permutation(len(labels))
    for start in range(0, len(order), 8):
        batch = order[start:start + 8]
        run_round(parties, active, batch)
        mono.train_step(x[batch], labels[batch])
    assert params_close(protocol_parameters(parties, active), mono.parameters(), 1e-10)
    np.testing.assert_array_equal(predict(parties, active, blocks), mono.predict(x))


def test_identity_interceptors_change_nothing():
    _, _, p1, a1 = setup(TRAINABLE_HEAD)
    p2, a2 = copy.deepcopy(p1), copy.deepcopy(a1)
    ident = [FunctionInterceptor(site, lambda m, ctx: m) for site in Site]
    batch = np.arange(16)
    r1 = run_round(p1, a1, batch)
    r2 = run_round(p2, a2, batch, ident)
    assert r1.loss == r2.loss
    assert params_close(protocol_parameters(p1, a1), protocol_parameters(p2, a2), 0.0)


def test_single_party_is_softmax_regression():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(10, 3)), rng.integers(0, 3, 10)
    w = rng.normal(size=(3, 3))
    party = PassiveParty(0, [nn.DenseLayer(w.copy(), np.zeros(3), nn.IDENTITY)], x,
                         nn.SgdState(0.1))
    run_round([party], ActiveParty(y, 3), np.arange(10))
    s = nn.softmax(x @ w)
    s[np.arange(10), y] -= 1
    np.testing.assert_allclose(party.layers[0].weights, w - 0.1 * x.T @ s / 10, atol=1e-14)


def test_merge_untrainable_zero_second_party():
    rng = np.random.default_rng(5)
    h, y = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    l1, g1 = merge_untrainable([h], y)
    l2, g2 = merge_untrainable([h, np.zeros_like(h)], y)
    assert l1 == l2
    np.testing.assert_array_equal(g1[0], g2[0])
    np.testing.assert_array_equal(g2[0], g2[1])


def test_merge_untrainable_width_mismatch():
    with pytest.raises(ConfigError):
        merge_untrainable([np.zeros((2, 3)), np.zeros((2, 4))], [0, 1])


def test_merge_untrainable_loss_matches_oracle():
    blocks, labels, parties, active = setup(SUM_HEAD)
    reps = [p.forward(b)[0] for p, b in zip(parties, blocks)]
    loss, _ = merge_untrainable(reps, labels)
    mono = MonolithicNet.from_protocol(parties, active)
    assert loss == pytest.approx(mono.loss(np.hstack(blocks), labels), abs=1e-12)


def test_merge_trainable_slices_partition_input_gradient():
    rng = np.random.default_rng(6)
    h1 = rng.normal(size=(5, 3))
    head = [nn.DenseLayer(np.eye(6), np.zeros(6), nn.IDENTITY),
            nn.DenseLayer(rng.normal(size=(6, 4)), np.zeros(4), nn.IDENTITY)]
    y = rng.integers(0, 4, 5)
    _, parts, _ = merge_trainable([h1, np.zeros((5, 3))], y, head)
    logits, acts = nn.stack_forward(head, np.hstack([h1, np.zeros((5, 3))]))
    _, rows = nn.softmax_ce_grad(logits, y)
    _, full = nn.stack_backward(head, acts, rows)
    np.testing.assert_array_equal(np.hstack(parts), full)


def test_merge_trainable_width_mismatch():
    head = [nn.DenseLayer(np.zeros((5, 2)), np.zeros(2), nn.IDENTITY)]
    with pytest.raises(ConfigError):
        merge_trainable([np.zeros((1, 3)), np.zeros((1, 3))], [0], head)


def test_merge_trainable_permutation_symmetry():
    rng = np.random.default_rng(7)
    h1, h2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    y = rng.integers(0, 3, 4)
    w1 = rng.normal(size=(5, 6))
    rest = nn.DenseLayer(rng.normal(size=(6, 3)), np.zeros(3), nn.IDENTITY)
    head = [nn.DenseLayer(w1, np.zeros(6)), rest]
    swapped = [nn.DenseLayer(np.vstack([w1[3:], w1[:3]]), np.zeros(6)), rest]
    assert merge_trainable([h1, h2], y, head)[0] == pytest.approx(
        merge_trainable([h2, h1], y, swapped)[0], abs=1e-14)


def test_trainable_head_gradients_finite_differences():
    assert gradcheck.check_network(TRAINABLE_HEAD, np.random.default_rng(0)).passed
    assert gradcheck.check_network(SUM_HEAD, np.random.default_rng(1)).passed


def test_predict_argmax_and_ties():
    party = PassiveParty(0, [nn.DenseLayer(np.eye(3), np.zeros(3), nn.IDENTITY)], np.zeros((1, 3)))
    active = ActiveParty(np.zeros(1, int), 3)
    assert predict([party], active, [np.array([[0.1, 0.9, 0.0]])])[0] == 1
    assert predict([party], active, [np.array([[0.5, 0.1, 0.5]])])[0] == 0


def test_forward_logits_block_count():
    _, _, parties, active = setup(SUM_HEAD)
    with pytest.raises(ConfigError):
        forward_logits(parties, active, [np.zeros((1, 6))])


def test_shape_changing_interceptor_rejected():
    _, _, parties, active = setup(SUM_HEAD)
    bad = FunctionInterceptor(Site.ACTIVE_DOWN, lambda m, ctx: m[:, :2], party=1, name="trim")
    with pytest.raises(ProtocolError) as err:
        run_round(parties, active, np.arange(4), [bad])
    assert err.value.site == "active_down[1]"
    assert "trim" in str(err.value)


def test_untrainable_down_messages_identical():
    _, _, parties, active = setup(SUM_HEAD)
    res = run_round(parties, active, np.arange(8))
    np.testing.assert_array_equal(res.messages.down[0], res.messages.down[1])
    for k in (0, 1):
        assert res.messages.down[k].shape == res.messages.up[k].shape


def test_interceptor_order_and_targeting():
    _, _, parties, active = setup(SUM_HEAD)
    seen = []

    class Tag(Interceptor):
        site = Site.PASSIVE_APPLY

        def __init__(self, name, party):
            self.name, self.party = name, party

        def transform(self, message, ctx):
            seen.append((self.name, ctx.party))
            return message

    run_round(parties, active, np.arange(4), [Tag("first", None), Tag("second", 1)])
    assert seen == [("first", 0), ("first", 1), ("second", 1)]


def test_head_kind_validation():
    with pytest.raises(ConfigError):
        ActiveParty(np.zeros(2, int), 2, head="mean")
    with pytest.raises(ConfigError):
        ActiveParty(np.zeros(2, int), 2, head=TRAINABLE_HEAD)


def test_build_parties_widths():
    _, _, parties, active = setup(SUM_HEAD, classes=4)
    assert [p.width for p in parties] == [4, 4]
    _, _, parties, active = setup(TRAINABLE_HEAD, classes=4)
    assert [p.width for p in parties] == [32, 32]
    assert active.head_layers[0].in_dim == 64 and active.head_layers[-1].out_dim == 4


def test_against_torch_autograd():
    torch = pytest.importorskip("torch")
    blocks, labels, parties, active = setup(TRAINABLE_HEAD, n=12, seed=3, lr=1.0)
    layers = [l for p in parties for l in p.layers] + active.head_layers
    tw = [(torch.tensor(l.weights, requires_grad=True), torch.tensor(l.bias, requires_grad=True))
          for l in layers]

    def branch(x, ps):
        for w, b in ps:
            x = torch.relu(x @ w + b)
        return x

    h = torch.cat([branch(torch.tensor(blocks[0]), tw[:1]), branch(torch.tensor(blocks[1]), tw[1:2])], 1)
    h = torch.relu(h @ tw[2][0] + tw[2][1])
    logits = h @ tw[3][0] + tw[3][1]
    torch.nn.functional.cross_entropy(logits, torch.tensor(labels)).backward()

    before = [(l.weights.copy(), l.bias.copy()) for l in layers]
    run_round(parties, active, np.arange(12))
    after = [l for p in parties for l in p.layers] + active.head_layers
    for (w0, b0), l, (tw_, tb_) in zip(before, after, tw):
        np.testing.assert_allclose(w0 - l.weights, tw_.grad.numpy(), atol=1e-12)
        np.testing.assert_allclose(b0 - l.bias, tb_.grad.numpy(), atol=1e-12)
