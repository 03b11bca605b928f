import numpy as np
import pytest

from pencilpoisson.comm import (
    CommError,
    DeadlockError,
    MessageDescriptor,
    SPMDError,
    run_spmd,
)


def test_ring_exchange_and_counters():
    def program(rank, comm):
        right, left = (rank + 1) % comm.size, (rank - 1) % comm.size
        out = np.full(5, float(rank))
        into = np.empty(5)
        comm.exchange([MessageDescriptor(right, 7, out)], [MessageDescriptor(left, 7, into)])
        return into, comm.stats

    results = run_spmd(3, program)
    for rank, (into, stats) in enumerate(results):
        assert (into == (rank - 1) % 3).all()
        assert stats.messages == 1 and stats.bytes == 40 and stats.exchanges == 1


def test_self_messages_are_free():
    def program(rank, comm):
        into = np.empty(3)
        comm.exchange([MessageDescriptor(rank, 1, np.arange(3.0))], [MessageDescriptor(rank, 1, into)])
        return into, comm.stats.messages, comm.stats.bytes

    for into, messages, nbytes in run_spmd(2, program):
        assert list(into) == [0, 1, 2] and messages == 0 and nbytes == 0


def test_messages_with_same_tag_arrive_in_order():
    def program(rank, comm):
        if rank == 0:
            for v in range(4):
                comm.exchange([MessageDescriptor(1, 3, np.array([float(v)]))], [])
            return None
        got = []
        for _ in range(4):
            buf = np.empty(1)
            comm.exchange([], [MessageDescriptor(0, 3, buf)])
            got.append(buf[0])
        return got

    assert run_spmd(2, program)[1] == [0, 1, 2, 3]


def test_payload_is_copied_at_send():
    def program(rank, comm):
        if rank == 0:
            buf = np.ones(2)
            pending = comm.exchange_start([MessageDescriptor(1, 1, buf)], [])
            pending.finish()
            buf[:] = 5.0  # must not affect the message already sent
            comm.barrier()
            return None
        comm.barrier()
        into = np.empty(2)
        comm.exchange([], [MessageDescriptor(0, 1, into)])
        return into

    assert list(run_spmd(2, program)[1]) == [1.0, 1.0]


@pytest.mark.parametrize("nworkers", [1, 2, 3, 5])
def test_allreduce_is_identical_on_every_rank(nworkers):
    rng = np.random.default_rng(0)
    parts = rng.standard_normal((nworkers, 4)) * 1e8

    def program(rank, comm):
        return comm.allreduce_sum(parts[rank]), comm.stats.reductions

    results = run_spmd(nworkers, program)
    expected = parts[0].copy()
    for p in parts[1:]:
        expected += p
    for total, reductions in results:
        assert np.array_equal(total, expected)  # rank-order summation, bitwise
        assert reductions == 1


def test_allreduce_length_mismatch():
    with pytest.raises(SPMDError) as info:
        run_spmd(2, lambda rank, comm: comm.allreduce_sum([1.0] * (rank + 1)), timeout=5)
    assert isinstance(info.value.error, CommError)


def test_mismatched_collectives_are_reported():
    def program(rank, comm):
        if rank == 0:
            comm.barrier()
        else:
            comm.allreduce_sum([1.0])

    with pytest.raises(SPMDError) as info:
        run_spmd(2, program, timeout=5)
    assert isinstance(info.value.error, CommError)


def test_missing_send_is_a_deadlock():
    def program(rank, comm):
        if rank == 1:
            comm.exchange([], [MessageDescriptor(0, 9, np.empty(1))])

    with pytest.raises(SPMDError) as info:
        run_spmd(2, program, timeout=0.3)
    assert isinstance(info.value.error, DeadlockError)
    assert info.value.rank == 1


def test_worker_failure_aborts_the_others():
    def program(rank, comm):
        if rank == 2:
            raise KeyError("boom")
        comm.barrier()

    with pytest.raises(SPMDError) as info:
        run_spmd(3, program, timeout=30)
    assert info.value.rank == 2 and isinstance(info.value.error, KeyError)


def test_receive_size_mismatch():
    def program(rank, comm):
        comm.exchange([MessageDescriptor(rank, 1, np.zeros(3))], [MessageDescriptor(rank, 1, np.zeros(2))])

    with pytest.raises(SPMDError) as info:
        run_spmd(1, program)
    assert isinstance(info.value.error, CommError)


def test_debug_mode_locks_buffers_while_pending():
    def program(rank, comm):
        send, recv = np.zeros(2), np.zeros(2)
        pending = comm.exchange_start([MessageDescriptor(rank, 1, send)], [MessageDescriptor(rank, 1, recv)])
        with pytest.raises(ValueError):
            send[0] = 1.0
        with pytest.raises(ValueError):
            recv[0] = 1.0
        pending.finish()
        send[0] = recv[0] = 1.0
        with pytest.raises(CommError):
            pending.finish()
        return True

    assert run_spmd(1, program) == [True]


def test_invalid_peer_and_worker_count():
    with pytest.raises(SPMDError):
        run_spmd(2, lambda r, c: c.exchange([MessageDescriptor(5, 1, np.zeros(1))], []), timeout=5)
    with pytest.raises(ValueError):
        run_spmd(0, lambda r, c: None)
