from __future__ import annotations

import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from cranioplan.cohort import (
    PatientParams,
    PopulationParams,
    generate_patient,
    head_to_skull,
)
from cranioplan.design import SpringModel, SurgicalConfig
from cranioplan.mesh import (
    Label,
    OsteotomySpec,
    TriMesh,
    apply_osteotomy,
    compute_cephalic_index,
    mesh_edges,
    offset_surface,
)
from cranioplan.simulator import (
    MaterialConfig,
    SimulationError,
    attachment_separation,
    build_system,
    simulate_surgery,
    solve_equilibrium,
    spring_force,
)
from cranioplan.simulator import _energy_and_gradient, _energy_only


RATIOS = dict(a_ratio=0.25, ap_ratio=0.55, lat_ratio=0.30)
STANDARD = SpringModel(stiffness=0.8, free_length=60.0, id="standard")


def patient_skull(seed=7,
                  bumps=(0.5, -0.3, 0.2, 0.1, -0.4, 0.3, 0.0, 0.0)) -> TriMesh:
    params = PatientParams(
        age_days=150.0,
        ap_elongation=1.30,
        lateral_narrowing=0.82,
        height_factor=1.0,
        bump_amplitudes=bumps,
        seed=seed,
    )
    head = generate_patient(params, resolution=24)
    return head_to_skull(head, PopulationParams())


@pytest.fixture(scope="module")
def skull() -> TriMesh:
    return patient_skull()


@pytest.fixture(scope="module")
def cut(skull):
    return apply_osteotomy(skull, OsteotomySpec(**RATIOS))


@pytest.fixture(scope="module")
def system(cut):
    return build_system(cut.mesh, MaterialConfig(), cut.notch_ids)


@pytest.fixture(scope="module")
def solved(system):
    return solve_equilibrium(system, (STANDARD, STANDARD))


@pytest.fixture(scope="module")
def surgery(skull):
    config = SurgicalConfig(front_spring=STANDARD, back_spring=STANDARD, **RATIOS)
    return simulate_surgery(skull, config)


# spring_force


def test_force_zero_at_free_length():
    assert spring_force(STANDARD, 60.0) == 0.0


def test_force_at_partial_compression():
    spring = SpringModel(stiffness=1.0, free_length=60.0, id="unit")
    assert spring_force(spring, 40.0) == pytest.approx(20.0)


def test_force_zero_past_free_length():
    assert spring_force(STANDARD, 75.0) == 0.0
    assert spring_force(STANDARD, 60.0 + 1e-9) == 0.0


def test_force_difference_is_stiffness_times_gap():
    # on the compressed branch the curve is linear with slope -k, so
    # F(30) - F(40) must equal 10 k for any spring
    rng = np.random.default_rng(2210)
    for i in range(100):
        k = float(rng.uniform(0.1, 3.0))
        L0 = float(rng.uniform(45.0, 90.0))
        spring = SpringModel(stiffness=k, free_length=L0, id=f"s{i}")
        diff = spring_force(spring, 30.0) - spring_force(spring, 40.0)
        assert diff == pytest.approx(10.0 * k, rel=1e-12)


def test_negative_opening_rejected():
    with pytest.raises(SimulationError):
        spring_force(STANDARD, -1.0)


# build_system


def test_edge_stiffness_matches_direct_recomputation(cut, system):
    mats = MaterialConfig()
    verts = cut.mesh.vertices - np.round(cut.mesh.vertices.mean(axis=0))
    labels = cut.mesh.labels
    suture = np.isin(labels, (Label.CORONAL_SUTURE, Label.LAMBDOID_SUTURE))
    n_suture_edges = 0
    for e, (a, b) in enumerate(system.edges):
        rest = float(np.linalg.norm(verts[b] - verts[a]))
        k = mats.bone_edge_stiffness_scale * mats.t_skull / rest
        if suture[a] or suture[b]:
            k *= mats.suture_stiffness_ratio
            n_suture_edges += 1
        assert system.stiffness[e] == pytest.approx(k, rel=1e-12)
        assert system.rest_lengths[e] == pytest.approx(rest, rel=1e-12)
    assert n_suture_edges > 0


def test_unit_suture_ratio_gives_uniform_product(cut):
    mats = MaterialConfig(suture_stiffness_ratio=1.0)
    sys_ = build_system(cut.mesh, mats, cut.notch_ids)
    product = sys_.stiffness * sys_.rest_lengths
    expect = mats.bone_edge_stiffness_scale * mats.t_skull
    assert np.allclose(product, expect, rtol=1e-12)


def test_fixed_count_matches_base_ring(cut, system):
    n_ring = int((cut.mesh.labels == Label.BASE_RING).sum())
    assert n_ring > 0
    assert len(system.fixed) == n_ring
    assert np.all(cut.mesh.labels[system.fixed] == Label.BASE_RING)


def test_no_base_ring_rejected(cut):
    labels = cut.mesh.labels.copy()
    labels[labels == Label.BASE_RING] = Label.FREE
    floating = TriMesh(cut.mesh.vertices, cut.mesh.triangles, labels)
    with pytest.raises(SimulationError, match="BASE_RING"):
        build_system(floating, MaterialConfig(), cut.notch_ids)


def test_empty_notch_set_rejected(cut):
    al, ar, pl, pr = cut.notch_ids
    bad = (al, np.array([], dtype=np.int64), pl, pr)
    with pytest.raises(SimulationError, match="anterior right"):
        build_system(cut.mesh, MaterialConfig(), bad)


def test_hinges_cover_every_interior_edge(cut, system):
    # independent census: an interior edge appears in exactly two faces
    count = {}
    for tri in cut.mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    interior = {key for key, c in count.items() if c == 2}
    assert len(system.hinges) == len(interior)
    hinge_keys = {
        (min(a, b), max(a, b)) for a, b in system.hinges[:, :2]
    }
    assert hinge_keys == interior


def test_hinge_rest_angles_match_cut_geometry(cut, system):
    verts = cut.mesh.vertices
    rng = np.random.default_rng(5)
    for h in rng.choice(len(system.hinges), size=50, replace=False):
        i0, i1, i2, i3 = system.hinges[h]
        e = verts[i1] - verts[i0]
        n1 = np.cross(e, verts[i2] - verts[i0])
        n2 = np.cross(verts[i3] - verts[i0], e)
        n1 = n1 / np.linalg.norm(n1)
        n2 = n2 / np.linalg.norm(n2)
        sin_t = np.dot(np.cross(n1, n2), e / np.linalg.norm(e))
        angle = np.arctan2(sin_t, np.dot(n1, n2))
        assert system.hinge_rest[h] == pytest.approx(angle, abs=1e-9)


def test_energy_gradient_matches_finite_differences(system):
    rng = np.random.default_rng(99)
    pos = system.nodes + rng.normal(scale=0.05, size=system.nodes.shape)
    springs = (STANDARD, STANDARD)
    _, grad = _energy_and_gradient(pos, system, springs)
    free_ids = np.nonzero(system.free_mask)[0]
    h = 1e-6
    for node in rng.choice(free_ids, size=8, replace=False):
        for c in range(3):
            probe = pos.copy()
            probe[node, c] += h
            e_plus = _energy_only(probe, system, springs)
            probe[node, c] -= 2 * h
            e_minus = _energy_only(probe, system, springs)
            fd = (e_plus - e_minus) / (2 * h)
            assert grad[node, c] == pytest.approx(fd, rel=2e-4, abs=1e-6)


# solve_equilibrium


def test_unloaded_system_stays_put(system):
    result = solve_equilibrium(system, springs=())
    assert result.converged
    assert np.abs(result.positions - system.nodes).max() < 1e-9


def test_energy_trace_non_increasing(solved):
    trace = np.asarray(solved.energy_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 0.0)


def test_converged_below_tolerance(solved):
    assert solved.converged
    assert solved.residual < 1e-2


def test_force_balance_at_equilibrium(system, solved):
    # recompute out-of-band: every free node's net force below the tolerance
    _, grad = _energy_and_gradient(solved.positions, system, (STANDARD, STANDARD))
    worst = np.linalg.norm(grad[system.free_mask], axis=1).max()
    assert worst < 1e-2


def test_fixed_nodes_do_not_move(system, solved):
    moved = np.abs(solved.positions[system.fixed] - system.nodes[system.fixed])
    assert moved.max() < 1e-12


def test_doubled_stiffness_opens_strictly_more(system):
    def opening(k):
        spring = SpringModel(stiffness=k, free_length=60.0, id=f"k{k}")
        res = solve_equilibrium(system, (spring, spring))
        assert res.converged
        gains = [
            attachment_separation(res.positions, pair)
            - attachment_separation(system.nodes, pair)
            for pair in system.attachments
        ]
        return float(np.mean(gains))

    soft, stiff = opening(0.4), opening(0.8)
    assert stiff > soft + 0.5


def test_translation_invariance(cut):
    shift = np.array([10.0, -7.0, 3.0])
    mats = MaterialConfig()
    base = solve_equilibrium(
        build_system(cut.mesh, mats, cut.notch_ids), (STANDARD, STANDARD))
    moved_mesh = cut.mesh.with_vertices(cut.mesh.vertices + shift)
    moved = solve_equilibrium(
        build_system(moved_mesh, mats, cut.notch_ids), (STANDARD, STANDARD))
    diff = np.abs(moved.positions - shift - base.positions).max()
    assert diff < 1e-9


def test_iteration_budget_flags_non_convergence(system):
    result = solve_equilibrium(system, (STANDARD, STANDARD), max_iters=2)
    assert not result.converged
    assert result.iterations == 2
    assert np.all(np.isfinite(result.positions))


def test_spring_pair_validation(system):
    with pytest.raises(SimulationError):
        solve_equilibrium(system, (STANDARD,))
    with pytest.raises(SimulationError):
        solve_equilibrium(system, (STANDARD, STANDARD, STANDARD))
    with pytest.raises(SimulationError):
        solve_equilibrium(system, (STANDARD, "spring"))


# simulate_surgery


def test_springs_at_rest_change_nothing(skull, cut, system):
    sep_front = attachment_separation(system.nodes, system.attachments[0])
    sep_back = attachment_separation(system.nodes, system.attachments[1])
    config = SurgicalConfig(
        front_spring=SpringModel(stiffness=0.8, free_length=sep_front, id="f0"),
        back_spring=SpringModel(stiffness=0.8, free_length=sep_back, id="b0"),
        **RATIOS,
    )
    result = simulate_surgery(skull, config)
    assert np.abs(result.skull.vertices - skull.vertices).max() < 0.1
    reference_head = offset_surface(skull, 3.42)
    assert np.abs(result.head.vertices - reference_head.vertices).max() < 0.1
    assert abs(result.gap_opening_mm) < 0.01


def test_default_opening_in_working_band(surgery):
    assert surgery.equilibrium.converged
    assert 5.0 < surgery.gap_opening_mm < 15.0


def test_cephalic_index_increases(skull, surgery):
    pre = compute_cephalic_index(skull)
    post = compute_cephalic_index(surgery.skull)
    assert post > pre


def test_gap_opening_is_mean_of_separation_gains(surgery):
    front = surgery.front_separation_final - surgery.front_separation_initial
    back = surgery.back_separation_final - surgery.back_separation_initial
    assert surgery.gap_opening_mm == pytest.approx(0.5 * (front + back))
    assert front > 0 and back > 0


def test_output_topology_matches_input(skull, surgery):
    assert surgery.skull.num_vertices == skull.num_vertices
    assert np.array_equal(surgery.skull.triangles, skull.triangles)


def test_symmetric_patient_gives_symmetric_output():
    skull_sym = patient_skull(seed=3, bumps=(0.0,) * 8)
    config = SurgicalConfig(front_spring=STANDARD, back_spring=STANDARD, **RATIOS)
    result = simulate_surgery(skull_sym, config)

    mirrored = skull_sym.vertices * np.array([-1.0, 1.0, 1.0])
    dist, perm = cKDTree(skull_sym.vertices).query(mirrored)
    assert dist.max() < 1e-6  # the uncut skull is mirror symmetric

    post = result.skull.vertices
    asym = np.linalg.norm(post[perm] - post * np.array([-1.0, 1.0, 1.0]), axis=1)
    assert asym.max() < 0.05


def test_repeated_run_is_identical(skull):
    config = SurgicalConfig(front_spring=STANDARD, back_spring=STANDARD, **RATIOS)
    a = simulate_surgery(skull, config)
    b = simulate_surgery(skull, config)
    assert np.array_equal(a.head.vertices, b.head.vertices)
    assert a.gap_opening_mm == b.gap_opening_mm


def test_single_surgery_runs_quickly(skull):
    config = SurgicalConfig(front_spring=STANDARD, back_spring=STANDARD, **RATIOS)
    start = time.perf_counter()
    result = simulate_surgery(skull, config)
    elapsed = time.perf_counter() - start
    assert result.equilibrium.converged
    assert elapsed < 3.0
