import itertools
import json
import math

import numpy as np
import pytest

from semloc.geometry import VisibilityWedge
from semloc.mapfile import (QUANT_STEP, SEMANTIC_DESCRIPTOR_BITS, MapFormatError, decode_map, encode_map,
                            map_to_json, quantize_probs, record_size)
from semloc.semantic_map import (CITYSCAPES_CLASSES, MapPoint, SemanticDescriptor, SemanticMap, brute_force_visible_set,
                                 build_descriptor, class_prior_from_images, map_from_arrays, occluded_pmf,
                                 potentially_visible_set)

ROAD, SIDEWALK, BUILDING, VEG, SKY = 0, 1, 2, 8, 10
C = len(CITYSCAPES_CLASSES)
ROAD_TRACK = np.array([[0, 0, 0, 0, 0, 0], [10, 0, 0, 0, 0, 0]], float)


def uniform(n=C):
    return np.full(n, 1.0 / n)


def random_map(rng, m, n_classes=C, dense=False, max_range=200.0):
    pos = rng.normal(0, 500, (m, 3))
    ga = rng.uniform(-math.pi, math.pi, m)
    span = rng.uniform(0, 2 * math.pi, m)
    wedges = np.column_stack([rng.uniform(0, 1, m), ga, ga + span, rng.uniform(1, max_range, m)])
    prior = rng.dirichlet(np.ones(n_classes))
    occ = rng.dirichlet(np.ones(n_classes))
    road = rng.normal(0, 100, (rng.integers(1, 20), 6))
    names = tuple(f"c{i}" for i in range(n_classes))
    if dense:
        return map_from_arrays(names, pos, wedges, prior, occ, road, dense=rng.integers(0, 256, (m, 128)))
    pm = rng.dirichlet(np.full(n_classes, 0.3), m)
    return map_from_arrays(names, pos, wedges, prior, occ, road, sem_pmfs=pm)


# descriptors -----------------------------------------------------------------

def test_descriptor_single_class():
    d = build_descriptor([np.full((7, 7), BUILDING)], C)
    assert d.as_dict(CITYSCAPES_CLASSES) == {"building": 1.0}


def test_descriptor_two_even_patches():
    d = build_descriptor([np.full((7, 7), ROAD), np.full((7, 7), VEG)], C)
    assert d.as_dict(CITYSCAPES_CLASSES) == {"road": 0.5, "vegetation": 0.5}


def test_descriptor_top3_matches_full_histogram():
    rng = np.random.default_rng(0)
    for _ in range(100):
        patches = [rng.choice([0, 2, 5, 8, 9], size=(7, 7), p=rng.dirichlet(np.ones(5))) for _ in range(3)]
        counts = {}
        for p in patches:
            for v in p.ravel():
                counts[int(v)] = counts.get(int(v), 0) + 1
        top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        total = sum(c for _, c in top)
        expect = {k: c / total for k, c in top}
        got = build_descriptor(patches, C)
        assert dict(zip(got.classes.tolist(), got.probs)) == pytest.approx(expect, abs=1e-12)
        assert got.probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_descriptor_rejects_bad_input():
    with pytest.raises(ValueError):
        build_descriptor([], C)
    with pytest.raises(ValueError):
        build_descriptor([np.full((7, 7), C)], C)


# class prior -----------------------------------------------------------------

def test_prior_direct_count():
    img = np.array([[ROAD, ROAD], [SKY, BUILDING]])
    p = class_prior_from_images([img], C)
    assert p[ROAD] == 0.5 and p[SKY] == 0.25 and p[BUILDING] == 0.25


def test_prior_duplication_invariant():
    rng = np.random.default_rng(1)
    img = rng.integers(0, C, (20, 30))
    assert np.array_equal(class_prior_from_images([img], C), class_prior_from_images([img, img], C))


def test_prior_matches_flat_count():
    rng = np.random.default_rng(2)
    imgs = [rng.integers(0, C, (rng.integers(1, 40), rng.integers(1, 40))) for _ in range(10)]
    counts = [0] * C
    for im in imgs:
        for v in im.ravel():
            counts[v] += 1
    expect = np.array(counts) / sum(counts)
    assert np.abs(class_prior_from_images(imgs, C) - expect).max() < 1e-12


def test_prior_rejects_out_of_range():
    with pytest.raises(ValueError):
        class_prior_from_images([np.array([[C]])], C)
    with pytest.raises(ValueError):
        class_prior_from_images([], C)


# occluded PMF ----------------------------------------------------------------

def test_occluded_examples():
    assert np.allclose(occluded_pmf([0.5, 0.5], [1], 2.0), [1 / 3, 2 / 3])
    assert np.array_equal(occluded_pmf([0.2, 0.8], [1], 1.0), [0.2, 0.8])
    assert np.array_equal(occluded_pmf([0.2, 0.8], [], 4.0), [0.2, 0.8])


def test_occluded_exhaustive_small_vectors():
    grid = [0.0, 0.1, 0.25, 0.5, 1.0]
    for raw in itertools.product(grid, repeat=4):
        if sum(raw) == 0:
            continue
        prior = np.array(raw) / sum(raw)
        for boost in ([0], [1, 3], [0, 1, 2, 3]):
            out = occluded_pmf(prior, boost, 4.0)
            assert abs(out.sum() - 1.0) < 1e-12
            rest = [i for i in range(4) if i not in boost]
            for i, j in itertools.combinations(rest, 2):
                assert np.sign(out[i] - out[j]) == np.sign(prior[i] - prior[j])


# potentially visible set -------------------------------------------------------

def test_pvs_examples():
    one = map_from_arrays(CITYSCAPES_CLASSES, [[0, 0, 0]], [[1.0, -math.pi, math.pi, 100]], uniform(), uniform(),
                          ROAD_TRACK, sem_pmfs=np.eye(C)[[BUILDING]])
    assert list(potentially_visible_set(one, [10, 0, 0])) == [0]
    assert potentially_visible_set(one, [300, 0, 0]).size == 0


def test_pvs_matches_linear_scan():
    rng = np.random.default_rng(3)
    m = 10_000
    pos = np.column_stack([rng.uniform(-500, 500, (m, 2)), rng.uniform(0, 10, m)])
    ga = rng.uniform(-math.pi, math.pi, m)
    wedges = np.column_stack([np.ones(m), ga, ga + rng.uniform(0, 2 * math.pi, m), rng.uniform(5, 60, m)])
    smap = map_from_arrays(CITYSCAPES_CLASSES, pos, wedges, uniform(), uniform(), ROAD_TRACK,
                           sem_pmfs=np.eye(C)[rng.integers(0, C, m)])
    for q in rng.uniform(-520, 520, (20, 2)):
        q3 = np.append(q, 1.6)
        got = potentially_visible_set(smap, q3)
        assert np.array_equal(got, brute_force_visible_set(smap, q3))


# map model --------------------------------------------------------------------

def test_map_from_points_and_validation():
    d = SemanticDescriptor([BUILDING, VEG], [0.7, 0.3])
    pts = [MapPoint(np.array([1.0, 2, 3]), d, VisibilityWedge(0.0, 1.0, 30.0, 0.8))]
    smap = SemanticMap.from_points(pts, CITYSCAPES_CLASSES, uniform(), uniform(), ROAD_TRACK)
    p = smap.point(0)
    assert np.allclose(p.position, [1, 2, 3]) and p.wedge.rho == 0.8
    assert p.descriptor.as_dict(CITYSCAPES_CLASSES) == pytest.approx({"building": 0.7, "vegetation": 0.3})
    with pytest.raises(ValueError):
        SemanticMap.from_points(pts, CITYSCAPES_CLASSES, uniform(), uniform(), np.zeros((0, 6)))
    with pytest.raises(ValueError):
        SemanticMap.from_points(pts, CITYSCAPES_CLASSES, np.ones(C), uniform(), ROAD_TRACK)


def test_visible_pmfs_are_floored_and_normalized():
    smap = map_from_arrays(CITYSCAPES_CLASSES, [[0, 0, 0]], [[1, 0, 1, 10]], uniform(), uniform(), ROAD_TRACK,
                           sem_pmfs=np.eye(C)[[BUILDING]])
    p = smap.visible_pmfs(1e-3)[0]
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and p.min() > 0
    assert p[BUILDING] == pytest.approx(1 / (1 + (C - 1) * 1e-3))


# binary format ----------------------------------------------------------------

def test_semantic_descriptor_is_39_bits():
    assert SEMANTIC_DESCRIPTOR_BITS == 39
    assert record_size(False) == 12 + 4 + 5
    assert record_size(True) == 12 + 4 + 128
    assert 128 / math.ceil(39 / 8) > 6


def test_empty_map_round_trip():
    smap = map_from_arrays(CITYSCAPES_CLASSES, np.zeros((0, 3)), np.zeros((0, 4)), uniform(), uniform(),
                           ROAD_TRACK, sem_pmfs=np.zeros((0, C)))
    data = encode_map(smap)
    back = decode_map(data)
    assert len(back) == 0 and back.class_table == CITYSCAPES_CLASSES


def test_one_point_record_size():
    rng = np.random.default_rng(4)
    empty = encode_map(random_map(rng, 0))
    one = encode_map(random_map(np.random.default_rng(4), 1))
    assert len(one) - len(empty) == record_size(False) == 21


def check_round_trip(a: SemanticMap, b: SemanticMap):
    assert a.class_table == b.class_table and a.is_dense == b.is_dense
    assert np.array_equal(a.positions.astype(np.float32), b.positions.astype(np.float32))
    assert np.abs(a.rho - b.rho).max(initial=0) <= QUANT_STEP["rho"] + 1e-12
    dga = np.abs((a.gamma_a - b.gamma_a + math.pi) % (2 * math.pi) - math.pi)
    assert dga.max(initial=0) <= QUANT_STEP["gamma_a"] + 1e-9
    assert np.abs(a.span - b.span).max(initial=0) <= QUANT_STEP["span"] + 1e-9
    assert np.abs(a.wedge_range - b.wedge_range).max(initial=0) <= 0.5 * 200.0 / 255 + 1e-9
    assert np.allclose(a.class_prior, b.class_prior, atol=1e-6)
    assert np.allclose(a.road, b.road.astype(np.float32), atol=1e-3 * (1 + np.abs(a.road)).max())
    if a.is_dense:
        assert np.array_equal(a.dense, b.dense)
    else:
        pa = np.zeros((len(a), a.n_classes))
        pb = np.zeros_like(pa)
        for i in range(len(a)):
            pa[i] = a.descriptor(i).dense(a.n_classes)
            pb[i] = b.descriptor(i).dense(b.n_classes)
        assert np.abs(pa - pb).max(initial=0) <= QUANT_STEP["prob"] + 1e-12


def test_round_trip_1000_random_maps():
    rng = np.random.default_rng(5)
    for k in range(1000):
        smap = random_map(rng, int(rng.integers(0, 40)), int(rng.integers(1, 33)), dense=(k % 4 == 0))
        check_round_trip(smap, decode_map(encode_map(smap)))


def test_decode_rejects_corruption():
    smap = random_map(np.random.default_rng(6), 5, 4)
    data = encode_map(smap)
    with pytest.raises(MapFormatError):
        decode_map(b"XMAP" + data[4:])
    with pytest.raises(MapFormatError):
        decode_map(data[:-3])
    # first record's class-id field points past a four-class table
    bad = bytearray(data)
    off = len(data) - 5 * 21 + 16
    bad[off] = (bad[off] & 0xE0) | 31
    with pytest.raises(MapFormatError):
        decode_map(bytes(bad))


def test_quantize_probs_sums_to_255():
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(3), 1000)
    q = quantize_probs(p)
    assert np.all(q.sum(axis=1) == 255)
    assert np.abs(q - p * 255).max() < 1.0


def test_json_dump_schema():
    smap = random_map(np.random.default_rng(8), 3, 5)
    doc = json.loads(map_to_json(smap))
    assert doc["format"] == "SMAP" and doc["descriptor_kind"] == "semantic"
    assert len(doc["points"]) == 3
    assert set(doc["points"][0]["wedge"]) == {"rho", "gamma_a", "gamma_b", "range"}
    assert sum(doc["points"][0]["descriptor"].values()) == pytest.approx(1.0)
