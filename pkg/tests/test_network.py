import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseltrack.network import (
    Branch,
    Seed,
    VesselNetwork,
    branch_distance,
    export_swc,
    export_topology,
    next_seeds,
    rasterize_mask,
    read_swc,
    read_topology,
    remove_duplicates,
    seed_is_new,
    validate_branches,
)
from vesseltrack.vesselness import CylinderModel, Detection
from vesseltrack.volume import Volume


def det(p, r=2.0, fit=0.9, direction=(0, 0, 1), layer=1):
    return Detection(CylinderModel(p, direction, r), 1.0 / fit - 1.0, layer)


def line(p0, p1, n, r=2.0, fits=None):
    pts = np.linspace(p0, p1, n)
    fits = fits if fits is not None else [0.9] * n
    d = np.subtract(p1, p0)
    return [det(p, r, f, d, k + 1) for k, (p, f) in enumerate(zip(pts, fits))]


def trunk_net(r=2.0):
    net = VesselNetwork()
    net.branches.append(Branch(0, line((20, 20, 5), (20, 20, 45), 21, r), cost=-30))
    return net


def test_identical_branches_keep_one():
    a = Branch(1, line((0, 0, 0), (0, 0, 20), 10), cost=-5.0)
    b = Branch(2, line((0, 0, 0), (0, 0, 20), 10), cost=-7.0)
    out = validate_branches(VesselNetwork(), [a, b])
    assert [x.id for x in out] == [2]


def test_duplicate_tie_goes_to_lower_id():
    a = Branch(4, line((0, 0, 0), (0, 0, 20), 10), cost=-5.0)
    b = Branch(3, line((0.2, 0, 0), (0.2, 0, 20), 10), cost=-5.0)
    assert [x.id for x in validate_branches(VesselNetwork(), [a, b])] == [3]
    assert [x.id for x in validate_branches(VesselNetwork(), [b, a])] == [3]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(-10, -0.1), st.floats(-10, -0.1))
def test_duplicate_rule_is_order_independent(offset, ca, cb):
    a = Branch(1, line((0, 0, 0), (0, 0, 20), 8), cost=ca)
    b = Branch(2, line((offset, 0, 0), (offset, 0, 20), 8), cost=cb)
    ids_ab = sorted(x.id for x in remove_duplicates([a, b]))
    ids_ba = sorted(x.id for x in remove_duplicates([b, a]))
    assert ids_ab == ids_ba


def test_separated_branches_both_survive():
    a = Branch(1, line((0, 0, 0), (0, 0, 20), 10), cost=-5.0)
    b = Branch(2, line((30, 0, 0), (30, 0, 20), 10), cost=-4.0)
    assert len(validate_branches(VesselNetwork(), [a, b])) == 2
    assert branch_distance(a, b) == pytest.approx(30.0)


def test_child_is_trimmed_to_its_new_part():
    net = trunk_net()
    # starts on the trunk axis and leaves sideways
    child = Branch(1, line((20, 20, 25), (32, 20, 31), 9), parent_branch=0, parent_index=10, cost=-3)
    (out,) = validate_branches(net, [child])
    first = out.detections[0].center
    assert np.hypot(first[0] - 20, first[1] - 20) >= 0.5 * 2.0
    assert len(out.detections) < 9
    assert out.parent_branch == 0
    # attaches at the nearest trunk detection
    trunk = net.branches[0].points
    assert out.parent_index == int(np.argmin(np.linalg.norm(trunk - first, axis=1)))


def test_branch_inside_parent_is_dropped():
    net = trunk_net()
    inside = Branch(1, line((20.5, 20, 10), (20.5, 20, 30), 10), parent_branch=0, parent_index=2, cost=-3)
    assert validate_branches(net, [inside]) == []


def test_reconnecting_branch_is_a_loop():
    net = trunk_net()
    # leaves the trunk top, swings out and comes back down to the trunk base
    t = np.linspace(0, math.pi, 40)
    pts = np.stack([20 + 12 * np.sin(t), np.full_like(t, 20.0), 45 - 20 * (1 - np.cos(t))], axis=1)
    loop = Branch(1, [det(p, 2.0) for p in pts], parent_branch=0, parent_index=20, cost=-10)
    assert validate_branches(net, [loop]) == []


def test_diverging_child_is_not_a_loop():
    net = trunk_net()
    child = Branch(1, line((20, 20, 45), (35, 20, 60), 12), parent_branch=0, parent_index=20, cost=-4)
    assert len(validate_branches(net, [child])) == 1


def test_parent_falls_back_to_nearest_branch():
    net = trunk_net()
    orphan = Branch(5, line((24, 20, 46), (35, 20, 55), 8), parent_branch=99, parent_index=0, cost=-2)
    (out,) = validate_branches(net, [orphan])
    assert out.parent_branch == 0 and out.parent_index == 20


def test_validation_does_not_mutate_network():
    net = trunk_net()
    child = Branch(1, line((20, 20, 45), (35, 20, 60), 12), parent_branch=0, parent_index=20)
    validate_branches(net, [child])
    assert len(net.branches) == 1


def test_seed_window():
    fits = [0.95, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.7, 0.9, 0.8]
    b = Branch(0, line((0, 0, 0), (0, 0, 18), 10, fits=fits))
    (s,) = next_seeds([b])
    # window is the last ceil(0.3 * 10) = 3 detections; best is index 8
    assert np.allclose(s.position, b.detections[8].center)
    assert s.parent_branch == 0 and s.parent_index == 8
    assert s.radius == 2.0


def test_single_detection_gives_no_seed():
    assert next_seeds([Branch(0, line((0, 0, 0), (0, 0, 1), 1))]) == []


def test_monotone_fitness_seeds_at_the_end():
    b = Branch(0, line((0, 0, 0), (0, 0, 10), 6, fits=[0.5, 0.6, 0.7, 0.8, 0.85, 0.9]))
    (s,) = next_seeds([b])
    assert np.allclose(s.position, b.detections[-1].center)


def test_seed_direction_follows_travel():
    dets = [det((0, 0, z), direction=(0, 0, -1)) for z in (0, 2, 4, 6)]
    (s,) = next_seeds([Branch(0, dets)])
    assert s.direction @ (0, 0, 1) > 0.99


def test_at_most_one_seed_per_branch():
    bs = [Branch(k, line((10 * k, 0, 0), (10 * k, 0, 12), 7)) for k in range(4)]
    assert len(next_seeds(bs)) == 4


def test_seed_guard():
    used = [Seed(np.zeros(3), np.array([0, 0, 1.0]), 2.0)]
    assert not seed_is_new(Seed(np.array([0, 0, 2.9]), np.array([0, 0, 1.0]), 2.0), used, 1.5)
    assert seed_is_new(Seed(np.array([0, 0, 3.1]), np.array([0, 0, 1.0]), 2.0), used, 1.5)


def y_network():
    net = VesselNetwork()
    net.branches.append(Branch(0, line((10, 10, 2), (10, 10, 20), 10, r=2.5), cost=-12))
    net.branches.append(Branch(1, line((12, 10, 22), (18, 10, 30), 6, r=2.0), 0, 9, source_seed=1, cost=-5))
    net.branches.append(Branch(2, line((8, 10, 22), (3, 10, 30), 6, r=2.0), 0, 9, source_seed=1, cost=-4))
    net.seeds_used.append(Seed(np.array([10.0, 10, 2]), np.array([0, 0, 1.0]), 2.5))
    return net


def test_topology_round_trip(tmp_path):
    net = y_network()
    back = read_topology(export_topology(net, tmp_path / "t.json"))
    assert [(b.id, b.parent_branch, b.parent_index) for b in back.branches] == [
        (0, None, None), (1, 0, 9), (2, 0, 9)]
    for a, b in zip(net.branches, back.branches):
        assert np.abs(a.points - b.points).max() < 1e-6
        assert np.allclose(a.radii, b.radii)
        assert [d.fitness for d in a.detections] == pytest.approx([d.fitness for d in b.detections])
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["fields"][:5] == ["x", "y", "z", "radius", "fitness"]


def test_empty_topology(tmp_path):
    back = read_topology(export_topology(VesselNetwork(), tmp_path / "e.json"))
    assert back.branches == []


def test_swc_linearizes_forest(tmp_path):
    net = y_network()
    rows = read_swc(export_swc(net, tmp_path / "y.swc"))
    assert len(rows) == net.n_detections()
    assert np.all(rows[:, 1] == 2)
    assert rows[0, 6] == -1 and np.sum(rows[:, 6] == -1) == 1
    ids = rows[:, 0]
    assert np.all(rows[1:, 6] < ids[1:]) and np.all(rows[1:, 6] >= 1)
    # both arms hang from the last trunk node (id 10)
    assert rows[10, 6] == 10 and rows[16, 6] == 10


def test_empty_mask():
    tpl = Volume(np.zeros((10, 10, 10)))
    assert rasterize_mask(VesselNetwork(), tpl).data.sum() == 0


def test_straight_branch_volume_matches_cylinder():
    tpl = Volume(np.zeros((40, 40, 40)))
    net = VesselNetwork()
    net.branches.append(Branch(0, line((20, 20, 5), (20, 20, 35), 16, r=2.0)))
    count = rasterize_mask(net, tpl).data.sum()
    # capsule ends add two half spheres
    analytic = math.pi * 4 * 30 + 4 / 3 * math.pi * 8
    assert abs(count - analytic) / analytic < 0.15


def test_mask_grows_with_radius():
    tpl = Volume(np.zeros((40, 40, 40)))
    net = y_network()
    small = rasterize_mask(net, tpl).data > 0
    big = rasterize_mask(net, tpl, radius_scale=1.1).data > 0
    assert np.all(big[small]) and big.sum() > small.sum()


def test_branch_must_be_nonempty():
    with pytest.raises(ValueError):
        Branch(0, [])


def test_seed_direction_ignores_coincident_tail():
    # the last two detections coincide, so a local difference has no direction
    pts = [(0, 0, 0), (0, 0, 2), (0, 0, 4), (0, 0, 4.0), (0, 0, 4.0 - 1e-6)]
    dets = [det(p, direction=(0, 0, -1)) for p in pts]
    (s,) = next_seeds([Branch(0, dets)])
    assert s.direction @ (0, 0, 1) > 0.99
