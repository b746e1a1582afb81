import json

import numpy as np
import pytest

from nnmerge.runtime import (
    BoundsError,
    CounterBoard,
    DeadlockError,
    EpochError,
    ProtocolError,
    RaceError,
    Runtime,
    exchange,
)


def run(size, program, **kw):
    rt = Runtime(size, **{k: kw.pop(k) for k in list(kw) if k in ("checking", "schedule_seed", "neighbours", "max_steps")})
    return rt, rt.run(program, **kw)


def put_then_read(ctx):
    win = yield ctx.win_create(None, "w", 8)
    win.lock_all()
    win.put((ctx.rank + 1) % ctx.world.size, 5, True)
    yield ctx.barrier()
    out = bool(win.local[5])
    win.unlock_all()
    return out


def test_put_visible_after_barrier():
    rt, res = run(4, put_then_read)
    assert res == [True] * 4
    assert list(rt.counters["puts"]) == [1, 1, 1, 1]
    assert list(rt.counters["barriers"]) == [1, 1, 1, 1]


def test_never_written_slot_reads_false():
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 3)
        win.lock_all()
        v = win.get(0, [0, 1, 2])
        win.unlock_all()
        return v.tolist()

    _, res = run(2, prog)
    assert res == [[False] * 3] * 2


def test_same_value_writes_converge_in_checking_mode():
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 4)
        win.lock_all()
        win.put(0, 2, True)
        yield ctx.barrier()
        return bool(win.local[2])

    _, res = run(3, prog, checking=True)
    assert res[0] is True


def test_differing_writes_race():
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 4)
        win.lock_all()
        win.put(0, 2, ctx.rank == 1)
        yield ctx.barrier()

    with pytest.raises(RaceError):
        run(2, prog, checking=True)
    run(2, prog, checking=False)


@pytest.mark.parametrize("seed", [None, 0, 1, 2, 3])
def test_read_and_foreign_write_in_one_epoch_race(seed):
    # raised on whichever access comes second
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 4)
        win.lock_all()
        if ctx.rank == 1:
            win.put(0, 1, True)
        else:
            win.get(0, 1)
        yield ctx.barrier()

    with pytest.raises(RaceError):
        run(2, prog, checking=True, schedule_seed=seed)


def test_unified_model_own_write_visible_in_epoch():
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 4)
        win.lock_all()
        seen = None
        if ctx.rank == 0:
            win.put(1, 3, True)
            seen = bool(win.get(1, 3)[0])
        yield ctx.barrier()
        return seen

    for seed in (None, 1, 2):
        _, res = run(2, prog, checking=True, schedule_seed=seed)
        assert res[0] is True


def test_epoch_and_bounds_errors():
    def closed(ctx):
        win = yield ctx.win_create(None, "w", 2)
        win.put(0, 0, True)

    with pytest.raises(EpochError):
        run(1, closed)

    def outside(ctx):
        win = yield ctx.win_create(None, "w", 2 + ctx.rank)
        win.lock_all()
        win.get(1, 2)  # fine on worker 1 (length 3)
        win.put(0, 2, True)  # worker 0 only has 2 slots

    with pytest.raises(BoundsError):
        run(2, outside)

    def twice(ctx):
        win = yield ctx.win_create(None, "w", 2)
        win.lock_all()
        win.lock_all()

    with pytest.raises(EpochError):
        run(1, twice)


def test_allreduce_values():
    def prog(ctx, values):
        return (yield ctx.allreduce_sum(None, values[ctx.rank]))

    assert run(4, prog, values=[0, 0, 0, 0])[1] == [0] * 4
    assert run(4, prog, values=[2, 1, 0, 0])[1] == [3] * 4
    assert run(1, prog, values=[7])[1] == [7]


def test_split_subgroup():
    def prog(ctx, flags):
        g = yield ctx.split(None, flags[ctx.rank])
        if g is None:
            return None
        yield ctx.barrier(g)
        return g.members, g.rank_of(ctx.rank)

    rt, res = run(4, prog, flags=[True, False, True, False])
    assert res == [((0, 2), 0), None, ((0, 2), 1), None]
    assert list(rt.counters["barriers"]) == [1, 0, 1, 0]
    _, res = run(3, prog, flags=[False] * 3)
    assert res == [None] * 3
    _, res = run(3, prog, flags=[True] * 3)
    assert [r[0] for r in res] == [(0, 1, 2)] * 3


def test_size_one_barrier_immediate():
    def prog(ctx):
        g = yield ctx.split(None, ctx.rank == 2)
        if g is not None:
            for _ in range(3):
                yield ctx.barrier(g)
        return "done"

    rt, res = run(3, prog)
    assert res == ["done"] * 3
    assert list(rt.counters["barriers"]) == [0, 0, 3]


def test_subgroup_collectives_do_not_block_others():
    def prog(ctx):
        g = yield ctx.split(None, ctx.rank < 2)
        if g is not None:
            yield ctx.barrier(g)
            yield ctx.barrier(g)
        msg = yield from exchange(ctx, "x", {1 - ctx.rank % 2 + 2 * (ctx.rank // 2): ctx.rank}, [1 - ctx.rank % 2 + 2 * (ctx.rank // 2)])
        return msg

    _, res = run(4, prog)
    assert res == [{1: 1}, {0: 0}, {3: 3}, {2: 2}]


def test_deadlock_detected():
    def prog(ctx):
        if ctx.rank == 0:
            yield ctx.barrier()
        return None

    with pytest.raises(DeadlockError):
        run(2, prog)

    def lonely(ctx):
        yield ctx.recv(1 - ctx.rank, "never")

    with pytest.raises(DeadlockError):
        run(2, lonely)


def test_step_budget():
    def spin(ctx):
        while True:
            yield None

    with pytest.raises(DeadlockError):
        run(1, spin, max_steps=50)


def test_collective_mismatch_is_protocol_error():
    def prog(ctx):
        if ctx.rank == 0:
            yield ctx.barrier()
        else:
            yield ctx.allreduce_sum(None, 1)

    with pytest.raises(ProtocolError):
        run(2, prog)


def test_message_to_non_neighbour_rejected():
    def prog(ctx):
        ctx.send(2, "t", 1)
        yield None

    with pytest.raises(ProtocolError):
        run(3, prog, neighbours=[[1], [0], [1]])


def test_counters_identical_across_schedules():
    def prog(ctx):
        win = yield ctx.win_create(None, "w", 16)
        win.lock_all()
        for it in range(3):
            win.put((ctx.rank + it) % 4, np.arange(ctx.rank, 16, 4), True)
            yield ctx.barrier()
            total = yield ctx.allreduce_sum(None, int(win.local.sum()))
        win.unlock_all()
        return total, win.local.tolist()

    base_rt, base = run(4, prog, checking=True)
    for seed in range(5):
        rt, res = run(4, prog, checking=True, schedule_seed=seed)
        assert res == base
        assert rt.counters.rows() == base_rt.counters.rows()


def test_counter_board_json():
    b = CounterBoard(2)
    b.add("puts", 1, 3)
    rows = json.loads(b.to_json())
    assert rows[1] == {"worker": 1, "puts": 3, "gets": 0, "barriers": 0, "allreduces": 0, "msgs": 0}
    with pytest.raises(ValueError):
        b.add("puts", 0, -1)
