import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manrl.core import ContractViolation, FactoredActionSpace, NumericError, make_rng
from manrl.envs import mdp_generate
from manrl.tabular import (
    DivergenceError,
    ExplicitMDP,
    ModelError,
    TabularJointQ,
    TabularMAN,
    bellman_residual,
    index_transition,
    joint_q_update,
    man_epsilon_greedy,
    man_greedy,
    man_update_first,
    man_update_first_variant_eq3,
    man_update_second,
    policy_evaluation,
    read_mdp_text,
    train_on_mdp,
    train_on_mdp_reference,
    value_iteration,
    write_mdp_text,
)


def man(alpha=0.5, gamma=0.5, S=2, n1=2, n2=3):
    return TabularMAN(S, FactoredActionSpace(n1, n2), alpha, gamma)


class TestSecondUpdate:
    def test_substitution(self):
        m = man(0.5, 0.5)
        m.q_first[1] = [2.0, -1.0]
        man_update_second(m, index_transition(0, 1, 2, 1.0, 1))
        assert m.q_second[0, 1, 2] == pytest.approx(1.0)

    def test_terminal_drops_bootstrap(self):
        m = man(1.0, 0.5)
        m.q_first[1] = [5.0, 5.0]
        man_update_second(m, index_transition(0, 0, 0, 1.0, 1, terminal=True))
        assert m.q_second[0, 0, 0] == 1.0

    def test_zero_alpha_is_noop(self):
        m = man(0.0, 0.9)
        m.q_second[0, 1, 1] = 0.3
        m.q_first[1] = [4.0, 2.0]
        man_update_second(m, index_transition(0, 1, 1, 7.0, 1))
        assert m.q_second[0, 1, 1] == 0.3

    def test_non_finite_reward(self):
        with pytest.raises(NumericError):
            man_update_second(man(), index_transition(0, 0, 0, float("nan"), 1))

    def test_out_of_range(self):
        with pytest.raises(ContractViolation):
            man_update_second(man(), index_transition(0, 2, 0, 0.0, 1))
        with pytest.raises(ContractViolation):
            man_update_second(man(), index_transition(0, 0, 0, 0.0, 5))


class TestFirstUpdate:
    def test_substitution(self):
        m = man(0.25, 0.5)
        m.q_first[0, 1] = 1.0
        m.q_second[1, 1] = [4.0, -3.0, 0.0]
        # Bootstrap uses the stored first sub-action in the next state only.
        m.q_second[1, 0] = [100.0, 0.0, 0.0]
        man_update_first(m, index_transition(0, 1, 0, 0.0, 1))
        assert m.q_first[0, 1] == pytest.approx(1.25)

    def test_terminal(self):
        m = man(1.0, 0.9)
        m.q_second[1] = 3.0
        man_update_first(m, index_transition(0, 0, 0, -1.0, 1, terminal=True))
        assert m.q_first[0, 0] == -1.0

    def test_zero_discount_is_running_average(self):
        m = man(1.0, 0.0)
        rewards = [3.0, -1.0, 4.0, 1.5, -2.0]
        for k, r in enumerate(rewards, start=1):
            m.alpha = 1.0 / k
            man_update_first(m, index_transition(0, 1, 2, r, 1))
        assert m.q_first[0, 1] == pytest.approx(np.mean(rewards))


class TestSelfBootstrapVariant:
    def test_substitution(self):
        m = man(0.5, 1.0)
        m.q_first[0, 0] = 1.0
        m.q_first[1, 0] = 2.0
        man_update_first_variant_eq3(m, index_transition(0, 0, 1, 0.0, 1))
        assert m.q_first[0, 0] == pytest.approx(1.5)

    def test_terminal(self):
        m = man(1.0, 0.9)
        m.q_first[1] = 8.0
        man_update_first_variant_eq3(m, index_transition(0, 1, 1, 0.7, 1, terminal=True))
        assert m.q_first[0, 1] == 0.7

    @given(arrays(float, (3, 2, 4), elements=st.floats(-5, 5)), st.integers(0, 2),
           st.integers(0, 1), st.integers(0, 3), st.integers(0, 2), st.floats(-1, 1))
    def test_coincides_with_cross_rule_under_coupling(self, q2, s, a1, a2, sp, r):
        a = TabularMAN(3, FactoredActionSpace(2, 4), 0.3, 0.9, q2.max(axis=2).copy(), q2.copy())
        b = TabularMAN(3, FactoredActionSpace(2, 4), 0.3, 0.9, q2.max(axis=2).copy(), q2.copy())
        t = index_transition(s, a1, a2, r, sp)
        man_update_first(a, t)
        man_update_first_variant_eq3(b, t)
        np.testing.assert_allclose(a.q_first, b.q_first, rtol=0, atol=1e-12)


def test_combined_update_uses_pre_update_tables():
    m = man(0.5, 0.5, S=1, n1=1, n2=1)
    m.q_first[0, 0] = 2.0
    m.q_second[0, 0, 0] = 4.0
    m.update(index_transition(0, 0, 0, 1.0, 0))
    # Q2 <- 4 + .5 (1 + .5 * 2 - 4); Q1 <- 2 + .5 (1 + .5 * 4 - 2)
    assert m.q_second[0, 0, 0] == pytest.approx(3.0)
    assert m.q_first[0, 0] == pytest.approx(2.5)


class TestGreedy:
    def test_nested_argmax(self):
        m = man(S=1, n1=2, n2=2)
        m.q_first[0] = [0, 5]
        m.q_second[0, 1] = [3, 1]
        assert man_greedy(m, 0) == (1, 0)

    def test_all_zero(self):
        assert man_greedy(man(), 0) == (0, 0)

    def test_first_stage_tie(self):
        m = man(S=1, n1=2, n2=2)
        m.q_first[0] = [2, 2]
        m.q_second[0, 0] = [0, 9]
        assert man_greedy(m, 0) == (0, 1)

    def test_eps_zero_is_greedy(self, rng):
        m = man(S=1, n1=3, n2=3)
        m.q_first[0] = [0, 1, 0]
        m.q_second[0, 1] = [0, 0, 2]
        assert all(man_epsilon_greedy(m, 0, 0.0, rng) == (1, 2) for _ in range(50))

    def test_eps_one_uniform_over_pairs(self):
        m = TabularMAN(1, FactoredActionSpace(4, 14))
        g = make_rng(5)
        n = 100_000
        counts = np.zeros(56)
        for _ in range(n):
            a1, a2 = man_epsilon_greedy(m, 0, 1.0, g)
            counts[a1 * 14 + a2] += 1
        p = 1 / 56
        sd = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 5 * sd)
        chi2 = np.sum((counts - n * p) ** 2 / (n * p))
        assert abs(chi2 - 55) <= 5 * np.sqrt(2 * 55)

    def test_seeded_sequence(self):
        m = man(S=1, n1=4, n2=5)
        seq = lambda: [man_epsilon_greedy(m, 0, 0.5, g) for g in [make_rng(2)] for _ in range(30)]
        assert seq() == seq()


@given(arrays(float, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-100, 100)))
def test_max_over_coupled_first_equals_joint_max(q2):
    q1 = q2.max(axis=2)
    np.testing.assert_array_equal(q1.max(axis=1), q2.reshape(q2.shape[0], -1).max(axis=1))


class TestJointQ:
    def test_q_learning_substitution(self, rng):
        b = TabularJointQ(2, FactoredActionSpace(2, 2), 0.5, 0.5)
        b.q[1] = [0, 2, 1, -1]
        joint_q_update(b, index_transition(0, 1, 0, 1.0, 1), "q_learning", rng)
        assert b.q[0, 2] == pytest.approx(1.0)

    def test_terminal(self, rng):
        b = TabularJointQ(2, FactoredActionSpace(2, 2), 1.0, 0.9)
        b.q[1] = 10
        joint_q_update(b, index_transition(0, 0, 1, 2.5, 1, True), "q_learning", rng)
        assert b.q[0, 1] == 2.5

    def test_double_with_equal_tables_matches_single(self):
        single = TabularJointQ(3, FactoredActionSpace(2, 3), 0.4, 0.9)
        double = TabularJointQ(3, FactoredActionSpace(2, 3), 0.4, 0.9, double=True)
        init = make_rng(1).normal(size=single.q.shape)
        single.q[...] = init
        double.q[...] = init
        double.q_b[...] = init
        t = index_transition(1, 1, 2, 0.3, 2)
        joint_q_update(single, t, "q_learning")
        joint_q_update(double, t, "double_q", make_rng(0))
        updated = double.q if not np.array_equal(double.q, init) else double.q_b
        np.testing.assert_allclose(updated, single.q, rtol=0, atol=1e-15)

    def test_unknown_mode(self, rng):
        with pytest.raises(ContractViolation):
            TabularJointQ(1, FactoredActionSpace(1, 1)).update(index_transition(0, 0, 0, 0, 0), "sarsa", rng)


# ---------------------------------------------------------------------------


def single_state_mdp(rewards, gamma=0.5):
    r = np.asarray(rewards, float).reshape(1, 1, -1)
    return ExplicitMDP(np.ones(r.shape + (1,)), r, gamma)


def test_value_iteration_single_state_closed_form():
    rewards = [0.3, -1.0, 0.8]
    sol = value_iteration(single_state_mdp(rewards), tol=1e-12)
    expected = np.array(rewards) + 0.5 * max(rewards) / (1 - 0.5)
    np.testing.assert_allclose(sol.q_star[0], expected, atol=1e-11)
    assert sol.greedy_policy[0] == 2


def test_value_iteration_two_state_chain():
    # State 0: action 0 stays (r=0), action 1 moves to absorbing state 1 (r=1).
    # Hand solution at gamma 0.9: V(1)=0, Q(0,1)=1, Q(0,0)=0.9*V(0)=0.9.
    P = np.zeros((2, 1, 2, 2))
    P[0, 0, 0, 0] = 1
    P[0, 0, 1, 1] = 1
    P[1, 0, :, 1] = 1
    R = np.zeros((2, 1, 2))
    R[0, 0, 1] = 1.0
    sol = value_iteration(ExplicitMDP(P, R, 0.9), tol=1e-12)
    np.testing.assert_allclose(sol.q_star, [[0.9, 1.0], [0.0, 0.0]], atol=1e-11)
    np.testing.assert_allclose(sol.v_star, [1.0, 0.0], atol=1e-11)
    assert list(sol.greedy_policy) == [1, 0]


def test_value_iteration_tolerance_and_contraction():
    mdp = mdp_generate(4, 12, 3, 3, 0.3, gamma=0.9)
    sol = value_iteration(mdp, tol=1e-10)
    assert bellman_residual(mdp, sol.q_star, 0.9) <= 1e-10
    sweeps = np.array(sol.residuals[:-1])
    assert np.all(sweeps[1:] <= 0.9 * sweeps[:-1] + 1e-14)
    np.testing.assert_array_equal(sol.v_star, sol.q_star.max(axis=1))
    np.testing.assert_array_equal(sol.greedy_policy, np.argmax(sol.q_star, axis=1))


def test_policy_evaluation_of_greedy_policy_matches_v_star():
    mdp = mdp_generate(11, 8, 2, 3, 0.5)
    sol = value_iteration(mdp, tol=1e-12)
    np.testing.assert_allclose(policy_evaluation(mdp, sol.greedy_policy), sol.v_star, atol=1e-9)


def test_value_iteration_errors():
    mdp = single_state_mdp([1.0])
    with pytest.raises(DivergenceError):
        value_iteration(mdp, gamma=1.0)
    with pytest.raises(ModelError):
        ExplicitMDP(np.full((2, 1, 1, 2), 0.6), np.zeros((2, 1, 1)))


def test_tie_break_lowest_index():
    sol = value_iteration(single_state_mdp([1.0, 1.0, 0.0]), tol=1e-12)
    assert sol.greedy_policy[0] == 0


def test_text_format_round_trip(tmp_path):
    mdp = mdp_generate(3, 6, 2, 3, 0.6)
    write_mdp_text(mdp, tmp_path / "m.txt")
    back = read_mdp_text(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.P, mdp.P)
    # Rewards are stored per successor and re-averaged on read.
    np.testing.assert_allclose(back.R, mdp.R, rtol=0, atol=1e-15)
    assert back.gamma == mdp.gamma


def test_text_format_rejects_bad_mass(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("2 1 1 0.9\n0 0 0 0 0.5 1.0\n0 0 0 1 0.4 1.0\n1 0 0 1 1.0 0.0\n")
    with pytest.raises(ModelError):
        read_mdp_text(f)


def test_text_format_accepts_mass_within_tolerance(tmp_path):
    f = tmp_path / "ok.txt"
    f.write_text("2 1 1 0.9\n0 0 0 0 0.5 1.0\n0 0 0 1 0.5000000000001 1.0\n1 0 0 1 1 0\n")
    assert read_mdp_text(f).n_states == 2


# ---------------------------------------------------------------------------


def test_compiled_kernel_matches_reference():
    mdp = mdp_generate(21, 7, 3, 2, 0.4)
    for rule in ("cross", "self"):
        fast = train_on_mdp(mdp, "man", 5000, make_rng(8), 0.1, 0.2, 10, rule, chunk=1024)
        ref = train_on_mdp_reference(mdp, 5000, make_rng(8), 0.1, 0.2, 10, rule, chunk=1024)
        np.testing.assert_array_equal(fast.learner.q_first, ref.learner.q_first)
        np.testing.assert_array_equal(fast.learner.q_second, ref.learner.q_second)
        np.testing.assert_array_equal(fast.visits, ref.visits)


def test_tabular_q_learning_reaches_oracle():
    mdp = mdp_generate(2, 5, 2, 2, 0.3)
    sol = value_iteration(mdp)
    run = train_on_mdp(mdp, "q_learning", 200_000, make_rng(1), alpha=0.05)
    v_pi = policy_evaluation(mdp, run.learner.greedy_policy())
    assert np.max(sol.v_star - v_pi) <= 0.01 * np.max(np.abs(sol.v_star))


def test_double_q_runs_and_learns():
    mdp = mdp_generate(2, 5, 2, 2, 0.3)
    sol = value_iteration(mdp)
    run = train_on_mdp(mdp, "double_q", 200_000, make_rng(1), alpha=0.05)
    v_pi = policy_evaluation(mdp, run.learner.greedy_policy())
    assert np.max(sol.v_star - v_pi) <= 0.01 * np.max(np.abs(sol.v_star))


def test_first_table_stationary_point_single_state():
    """With one state and uniform behaviour the coupled updates settle at

    Q2(a, b) = r(a, b) + g M,   Q1(a) = mean_b r(a, b) + g max_b r(a, b) + g^2 M,
    M = max_a Q1(a) = max_a [mean_b r(a, b) + g max_b r(a, b)] / (1 - g^2).

    Q1 then differs from max_b Q2(a, b) whenever r(a, .) is not constant.
    """
    r = np.array([[1.0, -1.0], [0.2, 0.2]])
    g = 0.5
    mdp = ExplicitMDP(np.ones((1, 2, 2, 1)), r[None], g)
    M = np.max(r.mean(axis=1) + g * r.max(axis=1)) / (1 - g * g)
    q2_expected = r + g * M
    q1_expected = r.mean(axis=1) + g * r.max(axis=1) + g * g * M

    runs = [train_on_mdp(mdp, "man", 1_000_000, make_rng(seed), alpha=0.001, eps=1.0, horizon=0)
            for seed in range(8)]
    q2 = np.mean([run.learner.q_second[0] for run in runs], axis=0)
    q1 = np.mean([run.learner.q_first[0] for run in runs], axis=0)
    np.testing.assert_allclose(q2, q2_expected, atol=0.03)
    np.testing.assert_allclose(q1, q1_expected, atol=0.03)
    assert q1_expected[0] < q2_expected[0].max() - 0.5
