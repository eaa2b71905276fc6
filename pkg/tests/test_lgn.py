import math
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cannet import engine
from cannet.datasets import VariableSchema, synth_scm_dataset, chain_spec
from cannet.errors import BudgetExhausted, ContractViolation, NonFiniteLoss, SchemaMismatch
from cannet.lgn import (LagrangianState, TrainConfig, build_lgn, decode_heads, discriminator_loss,
                        generator_forward, generator_loss, lagrangian_update, latent_forward,
                        sample_conditional, sample_interventional, sample_observational, train_lgn)
from cannet.scm import acyclicity_penalty, compile_intervention, descendants, extract_graph

from conftest import CHAIN_SEEDS, chain_run, independent_run


def binary_schema(n):
    return VariableSchema(tuple(f"v{i}" for i in range(n)), (2,) * n)


def set_A(model, A):
    with torch.no_grad():
        model.gen_params["scm.A"].copy_(torch.as_tensor(A, dtype=torch.float64))


def constant_critic(model, c):
    with torch.no_grad():
        for name, t in model.disc_params.params.items():
            t.zero_()
        last = len(model.disc_net.layers) - 1
        model.disc_params[f"disc.{last}.bias"].fill_(c)


# ---------------------------------------------------------------------- build


def test_nine_binary_variables():
    m = build_lgn(binary_schema(9))
    assert m.gen_net.fan_in == 9
    assert m.gen_net.layers[-1].out_blocks == (2,) * 9
    assert m.disc_net.fan_in == 18 and m.disc_net.fan_out == 1


def test_child_sized_schema_has_critic_input_60():
    cards = (2,) * 10 + (3,) * 6 + (5,) * 2 + (6,) * 2
    assert sum(cards) == 60
    m = build_lgn(VariableSchema(tuple(f"c{i}" for i in range(20)), cards))
    assert m.disc_net.fan_in == 60 and m.gen_net.fan_in == 20
    assert m.gen_net.layers[-1].out_blocks == cards


def test_single_binary_variable():
    m = build_lgn(binary_schema(1))
    assert m.gen_net.fan_in == 1 and m.gen_net.layers[-1].out_blocks == (2,)
    out = generator_forward(m, torch.zeros(3, 1))
    assert out.shape == (3, 2)


def test_shared_mode_uses_one_trunk():
    m = build_lgn(binary_schema(4), TrainConfig(head_mode="shared"))
    kinds = [l.kind for l in m.gen_net.layers]
    assert "batch-norm" in kinds and m.gen_net.layers[0].in_blocks is None
    assert kinds.count("dense") == 4
    assert TrainConfig().gen_batch_norm is False


def test_build_starts_with_zero_adjacency_and_is_seeded():
    a, b = build_lgn(binary_schema(3), TrainConfig(seed=4)), build_lgn(binary_schema(3), TrainConfig(seed=4))
    assert np.all(a.adjacency() == 0)
    for k in a.gen_params.names():
        assert torch.equal(a.gen_params[k], b.gen_params[k])


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(rho0=0), dict(lr_g=-1), dict(head_mode="x"), dict(l1=-1)])
def test_config_contracts(bad):
    with pytest.raises(ContractViolation):
        TrainConfig(**bad)


def test_rho_zero_state_rejected():
    with pytest.raises(ContractViolation):
        LagrangianState(0.0, 0.0)


# ---------------------------------------------------------------------- generator forward


def test_heads_are_distributions():
    m = build_lgn(VariableSchema(("a", "b"), (3, 2)))
    out = generator_forward(m, torch.randn(16, 2, dtype=torch.float64))
    assert torch.allclose(out[:, :3].sum(1), torch.ones(16, dtype=torch.float64))
    assert torch.allclose(out[:, 3:].sum(1), torch.ones(16, dtype=torch.float64))


def test_unit_alpha_equals_observational_pass():
    m = build_lgn(binary_schema(4))
    set_A(m, np.triu(np.random.default_rng(0).uniform(-2, 2, (4, 4)), 1))
    Z = torch.randn(8, 4, dtype=torch.float64)
    C = torch.randn(4, dtype=torch.float64)
    alpha, C0 = compile_intervention({}, 4)
    assert torch.equal(alpha, torch.ones(4, dtype=torch.float64))
    base = generator_forward(m, Z, mode="eval")
    assert torch.equal(generator_forward(m, Z, alpha, C, mode="eval"), base)
    assert torch.equal(generator_forward(m, Z, alpha, C0, mode="eval"), base)


def test_all_intervened_output_ignores_noise():
    m = build_lgn(binary_schema(3), TrainConfig(head_mode="shared"))
    alpha, C = compile_intervention({0: 1.0, 1: 0.0, 2: 1.0}, 3)
    a = generator_forward(m, torch.randn(5, 3, dtype=torch.float64), alpha, C, mode="eval")
    b = generator_forward(m, torch.randn(5, 3, dtype=torch.float64), alpha, C, mode="eval")
    assert torch.equal(a, b)


def test_noise_width_checked():
    with pytest.raises(SchemaMismatch):
        generator_forward(build_lgn(binary_schema(3)), torch.zeros(2, 4))


@given(st.integers(0, 10**6))
def test_structured_heads_local_to_intervention(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    m = build_lgn(binary_schema(n), TrainConfig(seed=seed % 1000))
    perm = rng.permutation(n)
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                A[perm[i], perm[j]] = rng.uniform(-2, 2)
    set_A(m, A)
    i = int(rng.integers(n))
    Z = torch.randn(32, n, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    outs = [generator_forward(m, Z, *compile_intervention({i: v}, n), mode="eval") for v in (0.0, 1.0, 3.7)]
    keep = [j for j in range(n) if j != i and j not in descendants(A, i)]
    for j in keep:
        for o in outs[1:]:
            assert torch.equal(o[:, 2 * j:2 * j + 2], outs[0][:, 2 * j:2 * j + 2])


# ---------------------------------------------------------------------- losses


def test_constant_critic_loss_is_lambda():
    m = build_lgn(binary_schema(3))
    constant_critic(m, 0.7)
    real = torch.eye(2, dtype=torch.float64).repeat(4, 3)[:, :6]
    fake = torch.full((8, 6), 0.5, dtype=torch.float64)
    assert discriminator_loss(m, real, fake, lam=1.0).item() == pytest.approx(1.0)
    assert discriminator_loss(m, real, fake, lam=2.5).item() == pytest.approx(2.5)


def test_lambda_zero_is_pure_critic_difference():
    m = build_lgn(binary_schema(2))
    real = torch.tensor([[1.0, 0, 0, 1], [0, 1, 1, 0]], dtype=torch.float64)
    fake = torch.tensor([[0.6, 0.4, 0.3, 0.7], [0.2, 0.8, 0.9, 0.1]], dtype=torch.float64)
    expected = m.critic(fake).mean() - m.critic(real).mean()
    assert discriminator_loss(m, real, fake, lam=0.0).item() == pytest.approx(expected.item(), abs=1e-12)


def test_linear_unit_critic_on_equal_batches():
    m = build_lgn(binary_schema(2), TrainConfig(disc_depth=1, hidden=1))
    # critic(x) = x . (1, 0, 0, 0): inputs are nonnegative so the leaky unit is the identity
    with torch.no_grad():
        m.disc_params["disc.0.weight"].copy_(torch.tensor([[1.0], [0.0], [0.0], [0.0]], dtype=torch.float64))
        m.disc_params["disc.0.bias"].fill_(0.0)
        m.disc_params["disc.2.weight"].fill_(1.0)
        m.disc_params["disc.2.bias"].fill_(0.0)
    real = torch.tensor([[1.0, 0, 0, 1], [0.5, 0.5, 1, 0]] * 4, dtype=torch.float64)
    assert discriminator_loss(m, real, real.clone(), lam=1.0).item() == pytest.approx(0.0, abs=1e-12)


def two_cycle_model():
    m = build_lgn(binary_schema(2))
    a = 0.25 ** 0.25
    set_A(m, [[0.0, a], [a, 0.0]])
    assert acyclicity_penalty(m.A, 1.0).item() == pytest.approx(0.5)
    return m


def test_constraint_contribution_arithmetic():
    m = two_cycle_model()
    Z = torch.randn(16, 2, dtype=torch.float64)
    adv = -m.critic(generator_forward(m, Z, mode="eval")).mean().item()
    total = generator_loss(m, Z, LagrangianState(2.0, 4.0), 1.0, mode="eval").item()
    assert total - adv == pytest.approx(1.5, abs=1e-12)


def test_zero_h_leaves_adversarial_term():
    m = build_lgn(binary_schema(3))
    Z = torch.randn(16, 3, dtype=torch.float64)
    adv = -m.critic(generator_forward(m, Z, mode="eval")).mean().item()
    assert generator_loss(m, Z, LagrangianState(5.0, 9.0), mode="eval").item() == pytest.approx(adv, abs=1e-12)


def test_constant_critic_generator_term():
    m = build_lgn(binary_schema(3))
    constant_critic(m, 1.25)
    for _ in range(3):
        Z = torch.randn(8, 3, dtype=torch.float64)
        assert generator_loss(m, Z, LagrangianState(0.0, 1.0)).item() == pytest.approx(-1.25)


def test_l1_term_added_when_configured():
    m = build_lgn(binary_schema(2), TrainConfig(l1=0.1))
    set_A(m, [[0.0, 0.5], [0.0, 0.0]])
    Z = torch.randn(4, 2, dtype=torch.float64)
    adv = -m.critic(generator_forward(m, Z, mode="eval")).mean().item()
    assert generator_loss(m, Z, LagrangianState(0.0, 1.0), mode="eval").item() == pytest.approx(adv + 0.05)


def test_non_finite_loss_raises():
    m = build_lgn(binary_schema(2))
    with torch.no_grad():
        m.disc_params["disc.0.bias"].fill_(float("nan"))
    real = torch.tensor([[1.0, 0, 0, 1]], dtype=torch.float64)
    with pytest.raises(NonFiniteLoss):
        discriminator_loss(m, real, real)
    with pytest.raises(NonFiniteLoss):
        generator_loss(m, torch.zeros(1, 2, dtype=torch.float64))


# ---------------------------------------------------------------------- lagrangian


def test_lagrangian_update_examples():
    out = lagrangian_update(LagrangianState(0.0, 1.0), 0.5)
    assert out.lambda_bar == 0.5
    same = lagrangian_update(LagrangianState(3.0, 10.0, 1.0), 0.0)
    assert same.lambda_bar == 3.0 and same.rho == 10.0
    with pytest.raises(ContractViolation):
        lagrangian_update(LagrangianState(), -1e-6)


def test_rho_schedule():
    s = LagrangianState(0.0, 1.0)
    s = lagrangian_update(s, 1.0)  # first update: previous h is infinite, no growth
    assert s.rho == 1.0
    s = lagrangian_update(s, 0.3)  # 0.3 > 0.25: grows
    assert s.rho == 10.0
    s = lagrangian_update(s, 0.01)  # shrank enough
    assert s.rho == 10.0
    big = lagrangian_update(LagrangianState(0.0, 5e5, 1.0), 1.0)
    assert big.rho == 1e6


@given(st.lists(st.floats(0, 10, allow_nan=False), max_size=30), st.floats(0, 5))
def test_lambda_bar_never_decreases(hs, start):
    s = LagrangianState(start, 1.0)
    for h in hs:
        nxt = lagrangian_update(s, h)
        assert nxt.lambda_bar >= s.lambda_bar and nxt.rho >= s.rho > 0
        s = nxt
    assert s.lambda_bar >= start


# ---------------------------------------------------------------------- decoding and sampling


def test_argmax_decode():
    m = build_lgn(binary_schema(1))
    assert decode_heads(m, torch.tensor([[0.9, 0.1]])).tolist() == [[0]]
    assert decode_heads(m, torch.tensor([[0.2, 0.8]])).tolist() == [[1]]


def test_empty_batches():
    m = build_lgn(binary_schema(3))
    assert sample_observational(m, 0, 1).shape == (0, 3)
    assert sample_interventional(m, {"v0": 1}, 0, 1).shape == (0, 3)


def test_intervene_every_variable():
    m = build_lgn(VariableSchema(("a", "b", "c"), (2, 3, 2)))
    rows = sample_interventional(m, {"a": 1, "b": 2, "c": 0}, 50, 3)
    assert (rows == [1, 2, 0]).all()


def test_invalid_category_rejected():
    m = build_lgn(binary_schema(2))
    with pytest.raises(ContractViolation):
        sample_interventional(m, {"v0": 2}, 5, 0)
    with pytest.raises(ContractViolation):
        sample_conditional(m, {"v1": 5}, 5)
    with pytest.raises(ContractViolation):
        sample_conditional(m, {"v1": 1}, 10, budget=5)


def test_empty_condition_is_observational():
    m = build_lgn(binary_schema(3))
    assert np.array_equal(sample_conditional(m, {}, 40, rng=5), sample_observational(m, 40, 5))
    rows, rate = sample_conditional(m, {}, 4, rng=5, return_rate=True)
    assert rate == 1.0


def test_conditional_rows_satisfy_conditions():
    m = build_lgn(binary_schema(3))
    set_A(m, [[0, 1.5, 0], [0, 0, -1.0], [0, 0, 0]])
    observed = sample_observational(m, 2000, 0)
    target = {0: int(observed[0, 0]), 2: int(observed[0, 2])}
    rows, rate = sample_conditional(m, target, 100, rng=1, return_rate=True)
    assert len(rows) == 100 and 0 < rate <= 1
    assert (rows[:, 0] == target[0]).all() and (rows[:, 2] == target[2]).all()


def test_impossible_condition_exhausts_budget():
    m = build_lgn(binary_schema(2))
    observed = sample_observational(m, 5000, 0)
    # the untrained heads are nearly constant, so one of the categories is (practically) never decoded
    rare = int(np.bincount(observed[:, 0], minlength=2).argmin())
    if (observed[:, 0] == rare).mean() > 0.001:
        pytest.skip("untrained head is not degenerate for this seed")
    with pytest.raises(BudgetExhausted) as err:
        sample_conditional(m, {0: rare}, 50, budget=2000, rng=1)
    assert err.value.requested == 50 and len(err.value.partial) < 50
    assert err.value.acceptance_rate < 0.025


def test_sampling_is_deterministic():
    m = build_lgn(binary_schema(3))
    set_A(m, [[0, 1.0, 0], [0, 0, 1.0], [0, 0, 0]])
    assert np.array_equal(sample_observational(m, 100, 9), sample_observational(m, 100, 9))


# ---------------------------------------------------------------------- training


def test_training_is_deterministic_and_logs_history():
    data = synth_scm_dataset(chain_spec(), 300, seed=0)
    cfg = TrainConfig(epochs=3, seed=2)
    c1, h1 = train_lgn(data, cfg)
    c2, h2 = train_lgn(data, cfg)
    assert c1.to_bytes() == c2.to_bytes()
    assert [r["epoch"] for r in h1] == [1, 2, 3]
    assert set(h1[0]) == {"epoch", "d_loss", "g_loss", "h", "lambda_bar", "rho"}


def test_training_schema_mismatch():
    data = synth_scm_dataset(chain_spec(), 50, seed=0)
    model = build_lgn(binary_schema(3))
    with pytest.raises(SchemaMismatch):
        train_lgn(data, TrainConfig(epochs=1), model)


@pytest.mark.slow
def test_chain_recovers_forward_edge():
    graphs = [frozenset(extract_graph(chain_run(s)[1].A, 0.3).edges) for s in CHAIN_SEEDS]
    votes = {g: graphs.count(g) for g in graphs}
    winner = max(votes, key=votes.get)
    print("chain graphs per seed:", [sorted(g) for g in graphs])
    assert winner == frozenset({(0, 1)}) and votes[winner] >= 3


@pytest.mark.slow
def test_independent_variables_give_empty_graph():
    sizes = [len(extract_graph(independent_run(s)[1].A, 0.3).edges) for s in CHAIN_SEEDS]
    print("independent edge counts:", sizes)
    assert statistics.median(sizes) == 0


@pytest.mark.slow
def test_constraint_satisfied_after_training():
    runs = [chain_run(s) for s in CHAIN_SEEDS] + [independent_run(s) for s in CHAIN_SEEDS]
    for _, _, hist in runs:
        assert hist[-1]["h"] <= 1e-3
        lam = [r["lambda_bar"] for r in hist]
        assert all(b >= a for a, b in zip(lam, lam[1:]))


@pytest.mark.slow
def test_chain_joint_within_tv():
    data, model, _ = chain_run(0)
    obs = sample_observational(model, 10000, 1)
    p_model = np.bincount(obs[:, 0] * 2 + obs[:, 1], minlength=4) / len(obs)
    p_data = np.bincount(data.values[:, 0] * 2 + data.values[:, 1], minlength=4) / len(data)
    tv = 0.5 * np.abs(p_model - p_data).sum()
    print(f"chain TV distance {tv:.4f}")
    assert tv <= 0.05


@pytest.mark.slow
def test_chain_intervening_child_leaves_parent():
    gaps = []
    for s in CHAIN_SEEDS:
        _, model, _ = chain_run(s)
        base = sample_observational(model, 10000, 1)[:, 0].mean()
        do = sample_interventional(model, {"b": 1}, 10000, 2)[:, 0].mean()
        gaps.append(abs(do - base))
    print("do(b=1) gaps:", np.round(gaps, 4))
    assert statistics.median(gaps) <= 0.03


@pytest.mark.slow
def test_chain_intervening_parent_moves_child():
    data, model, _ = chain_run(0)
    truth = data.values
    # ground-truth effect from the generating SCM's own samples
    effect_true = truth[truth[:, 0] == 1, 1].mean() - truth[truth[:, 0] == 0, 1].mean()
    effect = (sample_interventional(model, {"a": 1}, 10000, 3)[:, 1].mean()
              - sample_interventional(model, {"a": 0}, 10000, 4)[:, 1].mean())
    print(f"do(a) effect on b: model {effect:.3f} truth {effect_true:.3f}")
    assert abs(effect - effect_true) <= 0.1


@pytest.mark.slow
def test_chain_conditional_frequency():
    data, model, _ = chain_run(0)
    v = data.values
    target = v[v[:, 1] == 1, 0].mean()
    rows = sample_conditional(model, {"b": 1}, 5000, budget=10**6, rng=3)
    print(f"P(a=1|b=1): model {rows[:, 0].mean():.3f} data {target:.3f}")
    assert abs(rows[:, 0].mean() - target) <= 0.05
