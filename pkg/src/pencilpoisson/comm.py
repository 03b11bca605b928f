"""In-process SPMD message passing.

:func:`run_spmd` starts one thread per rank and hands each a
:class:`Communicator`. Point-to-point traffic goes through per
``(sender, receiver, tag)`` FIFO mailboxes, payloads are copied to ``bytes``
at send time. Collectives (``allreduce_sum``, ``barrier``) use a shared slot
table guarded by two barrier phases; every rank sums the slots itself in
rank-ascending order, so reductions are bitwise identical everywhere and
across runs.
"""

from __future__ import annotations

import threading
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

DEFAULT_TIMEOUT = 60.0


class CommError(RuntimeError):
    pass


class DeadlockError(CommError):
    """A receive or collective did not complete within the harness timeout."""


class WorkerAborted(CommError):
    """Raised inside surviving workers after another worker failed."""


class SPMDError(RuntimeError):
    def __init__(self, rank: int, error: BaseException):
        super().__init__(f"worker {rank} failed: {error!r}")
        self.rank = rank
        self.error = error


@dataclass
class MessageDescriptor:
    peer: int
    tag: int
    buffer: np.ndarray


@dataclass
class CommStats:
    messages: int = 0
    bytes: int = 0
    exchanges: int = 0
    reductions: int = 0
    barriers: int = 0

    def snapshot(self) -> "CommStats":
        return CommStats(**vars(self))

    def since(self, earlier: "CommStats") -> "CommStats":
        return CommStats(**{k: v - getattr(earlier, k) for k, v in vars(self).items()})


class _Transport:
    def __init__(self, size: int, timeout: float):
        self.size = size
        self.timeout = timeout
        self.cond = threading.Condition()
        self.mailboxes: dict[tuple[int, int, int], deque] = defaultdict(deque)
        self.barrier = threading.Barrier(size)
        self.slots: list = [None] * size
        self.aborted = False

    def abort(self):
        with self.cond:
            self.aborted = True
            self.cond.notify_all()
        self.barrier.abort()

    def post(self, src: int, dst: int, tag: int, payload: bytes):
        with self.cond:
            self.mailboxes[(src, dst, tag)].append(payload)
            self.cond.notify_all()

    def take(self, src: int, dst: int, tag: int) -> bytes:
        key = (src, dst, tag)
        with self.cond:
            ok = self.cond.wait_for(
                lambda: self.aborted or self.mailboxes[key], timeout=self.timeout
            )
            if self.aborted:
                raise WorkerAborted("another worker failed")
            if not ok:
                raise DeadlockError(
                    f"rank {dst} timed out waiting for tag {tag} from rank {src}"
                )
            return self.mailboxes[key].popleft()

    def wait(self):
        try:
            self.barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            if self.aborted:
                raise WorkerAborted("another worker failed") from None
            raise DeadlockError("collective timed out (mismatched collective calls?)") from None


class PendingExchange:
    """Handle for an exchange started with :meth:`Communicator.exchange_start`."""

    def __init__(self, comm: "Communicator", sends, recvs):
        self._comm = comm
        self._recvs = list(recvs)
        self._locked: list[tuple[np.ndarray, bool]] = []
        self.done = False
        if comm.debug:
            for d in list(sends) + self._recvs:
                self._locked.append((d.buffer, d.buffer.flags.writeable))
                d.buffer.flags.writeable = False

    def finish(self) -> list[np.ndarray]:
        if self.done:
            raise CommError("exchange finished twice")
        self.done = True
        for buf, writeable in self._locked:
            buf.flags.writeable = writeable
        comm = self._comm
        for d in self._recvs:
            payload = comm._transport.take(d.peer, comm.rank, d.tag)
            if len(payload) != d.buffer.nbytes:
                raise CommError(
                    f"rank {comm.rank}: payload from {d.peer} (tag {d.tag}) has "
                    f"{len(payload)} bytes, receive buffer has {d.buffer.nbytes}"
                )
            d.buffer[...] = np.frombuffer(payload, dtype=d.buffer.dtype).reshape(d.buffer.shape)
        return [d.buffer for d in self._recvs]


class Communicator:
    def __init__(self, rank: int, transport: _Transport, debug: bool = True):
        self.rank = rank
        self.size = transport.size
        self.debug = debug
        self._transport = transport
        self._step = 0
        self.stats = CommStats()

    def __repr__(self):
        return f"Communicator(rank={self.rank}, size={self.size})"

    def exchange_start(self, sends, recvs) -> PendingExchange:
        self.stats.exchanges += 1
        for d in sends:
            if not 0 <= d.peer < self.size:
                raise CommError(f"invalid peer {d.peer}")
            payload = d.buffer.tobytes()
            if d.peer != self.rank:
                self.stats.messages += 1
                self.stats.bytes += len(payload)
            self._transport.post(self.rank, d.peer, d.tag, payload)
        return PendingExchange(self, sends, recvs)

    def exchange_finish(self, pending: PendingExchange) -> list[np.ndarray]:
        return pending.finish()

    def exchange(self, sends, recvs) -> list[np.ndarray]:
        return self.exchange_start(sends, recvs).finish()

    def _collective(self, kind: str, payload=None) -> list:
        t = self._transport
        self._step += 1
        t.slots[self.rank] = (kind, self._step, payload)
        t.wait()
        entries = list(t.slots)
        t.wait()
        for other, (k, step, _) in enumerate(entries):
            if (k, step) != (kind, self._step):
                raise CommError(
                    f"rank {self.rank} in {kind} step {self._step} matched rank "
                    f"{other} in {k} step {step}"
                )
        return [p for _, _, p in entries]

    def allreduce_sum(self, partials) -> np.ndarray:
        """Elementwise sum over ranks, accumulated in rank order."""
        local = np.atleast_1d(np.asarray(partials, dtype=float)).copy()
        self.stats.reductions += 1
        if self.size == 1:
            return local
        gathered = self._collective("allreduce", local)
        shapes = {g.shape for g in gathered}
        if len(shapes) != 1:
            raise CommError(f"allreduce_sum length mismatch across ranks: {sorted(shapes)}")
        total = gathered[0].copy()
        for g in gathered[1:]:
            total += g
        return total

    def barrier(self):
        self.stats.barriers += 1
        if self.size > 1:
            self._collective("barrier")


def run_spmd(nworkers: int, program, *, timeout: float = DEFAULT_TIMEOUT, debug: bool = True):
    """Run ``program(rank, comm)`` on ``nworkers`` threads and return per-rank results."""
    if nworkers < 1:
        raise ValueError(f"nworkers must be >= 1, got {nworkers}")
    transport = _Transport(nworkers, timeout)
    results: list = [None] * nworkers
    errors: dict[int, BaseException] = {}

    def worker(rank):
        comm = Communicator(rank, transport, debug=debug)
        try:
            results[rank] = program(rank, comm)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the harness
            errors[rank] = exc
            transport.abort()

    if nworkers == 1:
        worker(0)
    else:
        threads = [
            threading.Thread(target=worker, args=(r,), name=f"spmd-{r}", daemon=True)
            for r in range(nworkers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if errors:
        primary = {r: e for r, e in errors.items() if not isinstance(e, WorkerAborted)}
        rank, err = min((primary or errors).items())
        raise SPMDError(rank, err) from err
    return results
