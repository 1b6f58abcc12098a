import math
import random

import pytest

from bionet.errors import InsufficientMinutiae
from bionet.matcher import (
    CalibrationResult,
    GalleryBlock,
    MatcherParams,
    Outcome,
    build_cylinders,
    calibrate_threshold,
    identify,
    local_similarity,
    match_score,
    score_block,
)
from bionet.templates import (
    Minutia,
    PerturbationParams,
    Template,
    generate_template,
    perturb,
    rigid_transform,
)

P = MatcherParams()

GENUINE_NOISE = PerturbationParams(pos_sigma=4.0, angle_sigma=math.radians(5),
                                   dropout_prob=0.1, spurious_count=2)


def _ident(i: int) -> bytes:
    return i.to_bytes(16, "big")


def test_single_minutia_yields_no_valid_cylinders():
    t = Template(512, 512, (Minutia(x=100.0, y=100.0, angle=1.0),))
    cs = build_cylinders(t, P)
    assert all(not c.valid for c in cs.cylinders)
    assert cs.n_valid == 0


def test_cell_count_is_fixed_by_grid():
    cs = build_cylinders(generate_template(seed=1, n=20), P)
    assert all(len(c.bits) == 8 * 8 * 6 == 384 for c in cs.cylinders)
    assert all(len(c.cell_valid) == 384 for c in cs.cylinders)


def test_bit_set_implies_cell_valid():
    cs = build_cylinders(generate_template(seed=2, n=40), P)
    for c in cs.cylinders:
        assert not (c.bits & ~c.cell_valid).any()


def test_rigid_transform_preserves_cylinder_cells():
    # Discretization is the only error source: corresponding cylinders must
    # agree on at least 95% of mutually valid cells.
    agree, total = 0, 0
    for seed in range(50):
        t = generate_template(seed=300 + seed, n=35, margin=45.0)
        tr = rigid_transform(t, math.pi / 7, 12.0, -9.0)
        ca, cb = build_cylinders(t, P), build_cylinders(tr, P)
        for a, b in zip(ca.cylinders, cb.cylinders):
            both = a.cell_valid & b.cell_valid
            agree += int((a.bits[both] == b.bits[both]).sum())
            total += int(both.sum())
    assert total > 0
    assert agree / total >= 0.95


def test_local_similarity_self_is_one():
    cs = build_cylinders(generate_template(seed=3, n=30), P)
    for c in cs.cylinders:
        if c.valid and c.bits.any():
            assert local_similarity(c, c, P) == 1.0


def test_local_similarity_symmetric():
    cyls = [c for s in range(4)
            for c in build_cylinders(generate_template(seed=40 + s, n=30), P).cylinders
            if c.valid]
    rng = random.Random(0)
    for _ in range(1000):
        a, b = rng.choice(cyls), rng.choice(cyls)
        assert local_similarity(a, b, P) == local_similarity(b, a, P)


def test_local_similarity_empty_restriction_is_zero():
    # two valid cylinders whose mutually valid cells hold no set bits
    cyls = [c for c in build_cylinders(generate_template(seed=5, n=30), P).cylinders if c.valid]
    a = cyls[0]
    zero = type(a)(center=a.center, valid=True, cell_count=a.cell_count,
                   bits_words=a.bits_words * 0, valid_words=a.valid_words)
    assert local_similarity(zero, zero, P) == 0.0


def test_self_match_is_exactly_one():
    for seed in range(20):
        cs = build_cylinders(generate_template(seed=seed, n=30), P)
        assert match_score(cs, cs, P) == 1.0


def test_match_score_symmetric_exactly():
    for seed in range(10):
        a = build_cylinders(generate_template(seed=seed, n=30), P)
        b = build_cylinders(perturb(generate_template(seed=seed, n=30),
                                    GENUINE_NOISE, seed=seed + 1), P)
        assert match_score(a, b, P) == match_score(b, a, P)


def test_scores_stay_in_unit_interval():
    sets = [build_cylinders(generate_template(seed=s, n=25), P) for s in range(12)]
    for a in sets:
        for b in sets:
            assert 0.0 <= match_score(a, b, P) <= 1.0


def test_insufficient_minutiae_raises():
    # 4 far-apart minutiae: nobody has 2 neighbors in reach, so 0 valid cylinders
    t = Template(512, 512, tuple(
        Minutia(x=float(x), y=float(y), angle=0.5)
        for x, y in ((50, 50), (450, 50), (50, 450), (450, 450))))
    sparse = build_cylinders(t, P)
    good = build_cylinders(generate_template(seed=9, n=30), P)
    assert sparse.n_valid < P.min_valid_cylinders
    with pytest.raises(InsufficientMinutiae):
        match_score(sparse, good, P)


def test_genuine_scores_run_high_impostor_low():
    # Distribution check on a small corpus; bounds hold with wide slack
    # relative to the measured medians (genuine ~0.73, impostor ~0.46).
    genuine, impostor = [], []
    templates = [generate_template(seed=600 + i, n=40) for i in range(30)]
    sets = [build_cylinders(t, P) for t in templates]
    for i, t in enumerate(templates):
        probe = build_cylinders(perturb(t, GENUINE_NOISE, seed=i), P)
        genuine.append(match_score(sets[i], probe, P))
        impostor.append(match_score(sets[(i + 1) % 30], probe, P))
    genuine.sort(), impostor.sort()
    assert genuine[len(genuine) // 2] >= 0.65
    assert impostor[-1] <= 0.60
    assert min(genuine) > max(impostor)


def test_identify_empty_gallery():
    probe = build_cylinders(generate_template(seed=8, n=30), P)
    res = identify(probe, [], P)
    assert res.outcome is Outcome.NO_MATCH
    assert res.score == 0.0 and res.scanned == 0


def test_identify_exact_match():
    cs = build_cylinders(generate_template(seed=10, n=30), P)
    res = identify(cs, [(_ident(7), cs)], P)
    assert res.outcome is Outcome.MATCH
    assert res.identity_id == _ident(7) and res.score == 1.0 and res.scanned == 1


def test_identify_duplicate_enrollment_is_ambiguous():
    cs = build_cylinders(generate_template(seed=11, n=30), P)
    res = identify(cs, [(_ident(1), cs), (_ident(2), cs)], P)
    assert res.outcome is Outcome.AMBIGUOUS
    assert res.score == 1.0 and res.second_score == 1.0
    assert res.identity_id == _ident(1)  # tie breaks to the smaller id
    assert res.second_identity_id == _ident(2)


def test_identify_skips_subfloor_entries_but_counts_them():
    sparse = Template(512, 512, tuple(
        Minutia(x=float(x), y=float(y), angle=0.5)
        for x, y in ((50, 50), (450, 50), (50, 450), (450, 450))))
    cs = build_cylinders(generate_template(seed=12, n=30), P)
    gallery = [(_ident(1), build_cylinders(sparse, P)), (_ident(2), cs)]
    res = identify(cs, gallery, P)
    assert res.outcome is Outcome.MATCH and res.identity_id == _ident(2)
    assert res.scanned == 2


def test_identify_worker_count_does_not_change_result():
    gallery = [(_ident(i), build_cylinders(generate_template(seed=i, n=30), P))
               for i in range(60)]
    probe = build_cylinders(perturb(generate_template(seed=30, n=30),
                                    GENUINE_NOISE, seed=5), P)
    results = {w: identify(probe, gallery, P, workers=w) for w in (1, 2, 4)}
    assert results[1] == results[2] == results[4]


def test_monotone_gallery_growth():
    probe = build_cylinders(generate_template(seed=90, n=30), P)
    gallery = [(_ident(i), build_cylinders(generate_template(seed=i, n=30), P))
               for i in range(30)]
    best = 0.0
    for k in range(1, 31):
        res = identify(probe, gallery[:k], P)
        assert res.score >= best
        best = res.score


def test_score_block_matches_per_pair_scoring():
    sets = [build_cylinders(generate_template(seed=s, n=30), P) for s in range(40)]
    probe = build_cylinders(generate_template(seed=100, n=30), P)
    block = GalleryBlock.build(sets, P.min_valid_cylinders)
    assert score_block(probe, block, P) == [match_score(probe, s, P) for s in sets]
    # chunk boundaries must not change any bit
    assert score_block(probe, block, P, chunk_cylinders=64) == score_block(probe, block, P)


def test_calibrate_separable_corpus():
    res = calibrate_threshold([0.9, 0.95, 1.0], [0.1, 0.2], target_fmr=0.0)
    assert res == CalibrationResult(0.9, 0.0, 0.0)


def test_calibrate_inverted_corpus():
    res = calibrate_threshold([0.5], [0.9], target_fmr=0.0)
    assert res.threshold > 0.9
    assert res.fnmr == 1.0 and res.fmr == 0.0


def test_calibrate_rejects_empty():
    with pytest.raises(ValueError):
        calibrate_threshold([], [0.5], 0.01)


def test_calibrate_tolerates_impostor_at_one():
    res = calibrate_threshold([0.9], [1.0], target_fmr=0.0)
    assert res.threshold > 1.0 and res.fmr == 0.0
