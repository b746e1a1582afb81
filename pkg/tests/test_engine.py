import numpy as np
import pytest

from nnmerge.domain import Decomposition, Domain
from nnmerge.engine import distribute, run_parallel, run_stores
from nnmerge.fixtures import example_population
from nnmerge.oracle import Reference
from nnmerge.parcels import ParcelStore, sample_artificial


@pytest.mark.parametrize("workers", [1, 2, 4, 8])
def test_partition_equals_reference(unit8, pop8, workers):
    res = run_parallel(pop8, unit8, workers, apply=False)
    assert res.partition == Reference(pop8, unit8).partition(Decomposition.for_workers(unit8, workers))
    assert res.partition.n_merges > 0


def test_example_parcels(unit8):
    pop = example_population(unit8)
    for w in (1, 2, 4):
        res = run_parallel(pop, unit8, w, apply=False)
        assert res.partition.member_sets() == [(0, 1, 5), (2, 3), (4, 7, 11), (6, 8, 9, 10)]
        assert res.partition.roots().tolist() == [3, 5, 7, 8]


@pytest.mark.parametrize("workers", [1, 4])
def test_merge_cycle_conserves_and_shrinks(unit8, pop8, workers):
    res = run_parallel(pop8, unit8, workers)
    after = res.store
    assert len(after) == len(pop8) - res.partition.n_merges
    before, got = pop8.totals(), after.totals()
    for k in before:
        assert got[k] == pytest.approx(before[k], rel=1e-12, abs=1e-12)
    # any two small parcels add up to at least the threshold
    assert not np.any(after.volume < unit8.vmin)
    assert len(np.unique(after.gid)) == len(after)


def test_parcels_end_on_their_owner(unit8, pop8):
    dec = Decomposition.for_workers(unit8, 4)
    res = run_stores(distribute(pop8, dec), dec)
    for r, o in enumerate(res.outcomes):
        if len(o.store):
            assert (np.atleast_1d(dec.owner_of_position(o.store.position)) == r).all()


def test_empty_population(unit8):
    res = run_parallel(ParcelStore.empty(), unit8, 4)
    assert res.partition.n_merges == 0
    assert res.participants == []
    assert len(res.store) == 0


def test_no_small_parcels(unit8, pop8):
    big = pop8.take(np.flatnonzero(pop8.volume >= unit8.vmin))
    res = run_parallel(big, unit8, 2)
    assert res.partition.n_merges == 0
    assert all(o.counters.n_barrier == 0 for o in res.outcomes)


@pytest.mark.parametrize("seed", range(3))
def test_schedule_independence_with_checking(unit8, seed):
    pop = sample_artificial(unit8, 10, 50 + seed)
    base = run_parallel(pop, unit8, 4, apply=False)
    other = run_parallel(pop, unit8, 4, apply=False, checking=True, schedule_seed=seed)
    assert base.partition == other.partition
    assert [o.counters for o in base.outcomes] == [o.counters for o in other.outcomes]


def test_counter_law_per_participant(unit8, pop8):
    res = run_parallel(pop8, unit8, 4, apply=False)
    its = {o.counters.n_iterations for o in res.outcomes if o.participated}
    assert len(its) == 1
    for o in res.outcomes:
        if o.participated:
            assert o.counters.law_holds()


def test_evaluations_positive(unit8, pop8):
    assert run_parallel(pop8, unit8, 2, apply=False).evaluations > 0
