from __future__ import annotations

import math

import numpy as np
import pytest

from flowlab import finite
from flowlab import rng as rngmod
from flowlab.core import FiniteKernel
from flowlab.stats import chi_square, mc_mean_ci

# two-point jump table of the coalescing map flow, state order (0,0), (1,1), (0,1), (1,0)
A2_PAPER = np.array([
    [0.5, 0.5, 0.0, 0.0],
    [0.5, 0.5, 0.0, 0.0],
    [0.25, 0.25, 0.25, 0.25],
    [0.25, 0.25, 0.25, 0.25],
])
PAPER_ORDER = [(0, 0), (1, 1), (0, 1), (1, 0)]


def in_paper_order(chain, m):
    idx = [chain.index(p) for p in PAPER_ORDER]
    return m[np.ix_(idx, idx)]


def test_one_point_table_is_uniform():
    assert np.allclose(finite.two_state_law().mean_kernel().matrix, 0.5)


def test_two_point_table_matches_printed_matrix():
    chain = finite.two_state_chain(2, 1.0)
    assert np.array_equal(in_paper_order(chain, chain.joint.matrix), A2_PAPER)


def test_kernel_flow_table_is_mixture():
    p = 0.3
    chain = finite.two_state_chain(2, p)
    want = p * A2_PAPER + (1 - p) * 0.25
    assert np.allclose(in_paper_order(chain, chain.joint.matrix), want, atol=1e-15)


def test_exact_semigroup_t0_identity():
    assert np.array_equal(finite.exact_semigroup(finite.two_state_chain(2), 0.0).matrix, np.eye(4))


@pytest.mark.parametrize("t", [0.1, math.log(2), 1.0, 3.0])
def test_one_point_closed_form(t):
    P = finite.exact_semigroup(finite.two_state_chain(1), t).matrix
    assert P[0, 0] == pytest.approx(math.exp(-t) + (1 - math.exp(-t)) / 2, abs=1e-13)


def test_one_point_ln2_is_three_quarters():
    P = finite.exact_semigroup(finite.two_state_chain(1), math.log(2)).matrix
    assert P[0, 0] == pytest.approx(0.75, abs=1e-13)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 5.0])
def test_two_point_offdiagonal_survival(t):
    chain = finite.two_state_chain(2)
    P = finite.exact_semigroup(chain, t).matrix
    i = chain.index((0, 1))
    off = P[i, chain.index((0, 1))] + P[i, chain.index((1, 0))]
    assert off == pytest.approx(math.exp(-t / 2), abs=1e-13)


def test_expm_matches_eigen_decomposition():
    g = rngmod.stream(1, "expm")
    J = g.random((5, 5))
    J /= J.sum(axis=1, keepdims=True)
    Q = 2.0 * 3.0 * (J - np.eye(5))
    w, V = np.linalg.eig(Q)
    ref = (V @ np.diag(np.exp(w)) @ np.linalg.inv(V)).real
    assert np.abs(finite.expm_generator(J, 2.0, 3.0) - ref).max() < 1e-12


def test_chapman_kolmogorov():
    g = rngmod.stream(2, "ck")
    chain = finite.two_state_chain(2, 0.6)
    for s, t in g.uniform(0, 5, (10, 2)):
        lhs = finite.exact_semigroup(chain, s + t).matrix
        rhs = finite.exact_semigroup(chain, s).matrix @ finite.exact_semigroup(chain, t).matrix
        assert np.abs(lhs - rhs).max() < 1e-10


# coalescing chain construction


def test_product_walkers_coalesced_by_hand():
    one = FiniteKernel(np.full((2, 2), 0.5))
    built = finite.build_coalescing_chain(finite.JumpChainSpec(one, 2)).joint.matrix
    # product order (0,0), (0,1), (1,0), (1,1); diagonal rows move as one walker
    want = np.array([
        [0.5, 0.0, 0.0, 0.5],
        [0.25, 0.25, 0.25, 0.25],
        [0.25, 0.25, 0.25, 0.25],
        [0.5, 0.0, 0.0, 0.5],
    ])
    assert np.array_equal(built, want)


def test_coalescing_chain_is_fixed_point():
    chain = finite.two_state_chain(2)
    assert np.array_equal(finite.build_coalescing_chain(chain).joint.matrix, chain.joint.matrix)


def test_inconsistent_marginals_rejected():
    one = FiniteKernel(np.full((2, 2), 0.5))
    joint = FiniteKernel(np.eye(4))
    with pytest.raises(ValueError):
        finite.build_coalescing_chain(finite.JumpChainSpec(one, 2, joint))


def test_cycle_walkers_absorption_matches_built_chain():
    n, t = 5, 1.5
    one = np.zeros((n, n))
    for i in range(n):
        one[i, (i + 1) % n] = one[i, (i - 1) % n] = 0.5
    chain = finite.build_coalescing_chain(finite.JumpChainSpec(FiniteKernel(one), 2))
    P = finite.exact_semigroup(chain, t).matrix
    start = chain.index((0, 2))
    diag = finite.diagonal_mask(chain)
    exact = P[start, diag].sum()
    g = rngmod.stream(3, "cycle")
    R = 40_000
    k = g.poisson(t, R)
    x, y = np.zeros(R, int), np.full(R, 2)
    met = np.zeros(R, bool)
    for j in range(int(k.max())):
        act = k > j
        sx = g.choice([-1, 1], R)
        sy = g.choice([-1, 1], R)
        sy = np.where(met, sx, sy)
        x = np.where(act, (x + sx) % n, x)
        y = np.where(act, (y + sy) % n, y)
        met |= x == y
    m, se = mc_mean_ci(met.astype(float))
    assert abs(m - exact) <= 4 * se


# realizations


def test_zero_events_give_identity_flow():
    law = finite.two_state_law()
    spec = finite.PoissonFlowSpec(1e-300, law)
    fl = finite.simulate_map_flow(spec, (0.0, 1.0), 1)
    assert np.array_equal(fl.total(), [0, 1])


def test_forced_sigma_swaps():
    law = finite.RandomMapLaw(np.array([[1, 0]]), np.array([1.0]), ("sigma",))
    spec = finite.PoissonFlowSpec(1.0, law)
    fl = finite.simulate_map_flow(spec, (0.0, 1.0), np.random.default_rng(0))
    k = len(fl.events[0])
    assert np.array_equal(fl.total(), [1, 0] if k % 2 else [0, 1])


def test_map_flow_reproducible_from_seed():
    spec = finite.two_state_spec(0.5)
    a = finite.simulate_map_flow(spec, (0.0, 4.0), 7, level=2)
    b = finite.simulate_map_flow(spec, (0.0, 4.0), 7, level=2)
    assert all(np.array_equal(x, y) for x, y in zip(a.increments, b.increments))
    assert a.events == b.events


def test_filter_all_marks_one_gives_deltas():
    spec = finite.two_state_spec(1.0)
    fl = finite.simulate_map_flow(spec, (0.0, 5.0), 3, level=2)
    filt = finite.filter_flow(fl)
    for m, k in zip(fl.increments, filt.increments):
        assert np.array_equal(FiniteKernel.from_map(m, 2).matrix, k.matrix)


def test_filter_all_marks_zero_gives_uniform():
    spec = finite.two_state_spec(0.0)
    fl = finite.simulate_map_flow(spec, (0.0, 5.0), 3, level=2)
    for ev, k in zip(fl.events, finite.filter_flow(fl).increments):
        want = np.eye(2) if not ev else np.full((2, 2), 0.5)
        assert np.array_equal(k.matrix, want)


def test_filter_requires_marks():
    fl = finite.simulate_map_flow(finite.two_state_spec(), (0.0, 1.0), 3)
    with pytest.raises(ValueError):
        finite.filter_flow(fl)


def _two_point_table(kernels):
    prod = np.einsum("rac,rbd->rabcd", kernels, kernels).reshape(kernels.shape[0], 4, 4)
    return prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(kernels.shape[0])


def test_kernel_flow_p1_is_map_flow_law():
    g = rngmod.stream(4, "p1")
    b = finite.sample_flow_batch(finite.two_state_spec(1.0), 1.0, 20_000, g)
    m, se = _two_point_table(b.kernels)
    exact = finite.exact_semigroup(finite.two_state_chain(2, 1.0), 1.0).matrix
    assert np.all(np.abs(m - exact) <= 4 * se + 1e-12)


def test_kernel_flow_p0_offdiagonal_half_after_event():
    g = rngmod.stream(5, "p0")
    b = finite.sample_flow_batch(finite.two_state_spec(0.0), 1.0, 5000, g)
    hit = b.counts >= 1
    k = b.kernels[hit]
    off = k[:, 0, 0] * k[:, 1, 1] + k[:, 0, 1] * k[:, 1, 0]
    assert np.allclose(off, 0.5)


def test_filtered_flow_matches_mixture_table_p_half():
    g = rngmod.stream(6, "filter")
    b = finite.sample_flow_batch(finite.two_state_spec(0.5), 1.0, 40_000, g)
    m, se = _two_point_table(b.filtered)
    exact = finite.exact_semigroup(finite.two_state_chain(2, 0.5), 1.0).matrix
    assert np.all(np.abs(m - exact) <= 4 * se + 1e-12)


def test_batch_and_single_realization_agree_in_law():
    g = rngmod.stream(7, "law")
    b = finite.sample_flow_batch(finite.two_state_spec(), math.log(2), 20_000, g)
    m, se = mc_mean_ci(b.maps[:, 0] == 0)
    assert abs(m - 0.75) <= 4 * se


# noise atoms


def test_identity_atom_closed_form_expands():
    eps = 0.01
    exact = math.exp(-eps) * (1 + 0.5 * (math.exp(eps / 2) - 1))
    assert exact == pytest.approx(math.exp(-eps) + 0.25 * eps * math.exp(-eps), abs=eps**2)


def test_noise_atoms_map_flow():
    rep = finite.noise_atom_check(None, 0.01, 200_000, 1)
    assert rep.passed, rep.summary()
    names = [r.statistic for r in rep.rows]
    assert "P[no_event] eps=0.01" in names and "P[map_is_identity] eps=0.01" in names


def test_noise_atoms_kernel_flow_p0():
    rep = finite.noise_atom_check(0.0, 0.01, 200_000, 2)
    row = next(r for r in rep.rows if "uniform_kernel_event" in r.statistic)
    assert row.oracle == pytest.approx(0.01 * math.exp(-0.01), abs=1e-15)
    assert rep.passed, rep.summary()


def test_noise_atoms_p1_reduces_to_map_list():
    rep = finite.noise_atom_check(1.0, 0.01, 10_000, 3)
    row = next(r for r in rep.rows if "uniform_kernel_event" in r.statistic)
    assert row.oracle == 0.0 and row.estimate == 0.0
    singles = [r.oracle for r in rep.rows if "single_" in r.statistic]
    assert singles == pytest.approx([0.01 * math.exp(-0.01) / 4] * 4, abs=1e-16)


def test_noise_atoms_reject_large_eps():
    with pytest.raises(ValueError):
        finite.noise_atom_check(None, 0.1, 100, 1)


# coupling from the past


def test_cftp_single_state():
    law = finite.RandomMapLaw(np.array([[0]]), np.array([1.0]))
    r = finite.cftp_sample(law, rngmod.stream(1, "c"))
    assert r.value == 0 and r.tau == 0


def test_cftp_two_state_uniform():
    vals, _ = finite.cftp_batch(finite.two_state_law(), 20_000, 3)
    assert chi_square(np.bincount(vals, minlength=2), [0.5, 0.5])[1] > 1e-3


def test_monotone_coupling_law():
    law = finite.monotone_map_law(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert np.array_equal(law.maps, [[0, 0], [0, 1], [1, 1]])
    assert np.allclose(law.probs, [0.2, 0.7, 0.1])
    assert np.allclose(law.mean_kernel().matrix, [[0.9, 0.1], [0.2, 0.8]])
    assert np.allclose(finite.stationary_law(law.mean_kernel().matrix), [2 / 3, 1 / 3])


def test_cftp_monotone_stationary():
    law = finite.monotone_map_law(np.array([[0.9, 0.1], [0.2, 0.8]]))
    vals, taus = finite.cftp_batch(law, 20_000, 4)
    assert chi_square(np.bincount(vals, minlength=2), [2 / 3, 1 / 3])[1] > 1e-3
    assert np.mean(taus > 20) < 0.05


def test_cftp_never_coalescing_raises():
    law = finite.RandomMapLaw(np.array([[0, 1]]), np.array([1.0]))
    with pytest.raises(finite.CftpError):
        finite.cftp_sample(law, rngmod.stream(1, "c"), cap=64)


def test_cftp_is_deterministic_per_stream():
    law = finite.two_state_law()
    a = [finite.cftp_sample(law, rngmod.stream(9, "d", i)).value for i in range(50)]
    b = [finite.cftp_sample(law, rngmod.stream(9, "d", i)).value for i in range(50)]
    assert a == b


# chain files


def test_parse_chain_spec_roundtrip():
    text = """
    # three-state monotone chain
    states = a b c
    map = a a b
    map = b c c   # trailing comment
    probs = 0.25 0.75
    """
    cf = finite.parse_chain_spec(text)
    assert cf.states == ["a", "b", "c"]
    assert np.array_equal(cf.law.maps, [[0, 0, 1], [1, 2, 2]])
    assert finite.parse_chain_spec(cf.echo()).echo() == cf.echo()


@pytest.mark.parametrize("text", [
    "map = 0 1",
    "states = 0 1\n",
    "states = 0 1\nmap = 0 2",
    "states = 0 1\nmap = 0",
    "states = 0 1\nmap = 0 1\nrate = -1",
    "states = 0 1\nmap = 0 1\nbogus = 1",
    "states = 0 0\nmap = 0 0",
])
def test_parse_chain_spec_errors(text):
    with pytest.raises(ValueError):
        finite.parse_chain_spec(text)
