"""Planned transpositions between z, y and x pencils.

A :class:`TransposePlan` is built once per layout change and executed as many
times as needed. Plans only connect adjacent orientations (z<->y within a
process-grid row, y<->x within a column); z<->x goes through y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .comm import MessageDescriptor
from .grid import GridSpec, PencilLayout, ProcessGrid

_TAGS = {frozenset("zy"): 101, frozenset("yx"): 102}
_MAX_ITEMSIZE = np.dtype(np.complex128).itemsize


class LayoutMismatch(ValueError):
    pass


@dataclass
class DistributedField:
    """One rank's block of a global field, axes ordered as ``layout.axes``."""

    layout: PencilLayout
    rank: int
    values: np.ndarray

    def __post_init__(self):
        expected = self.layout.local_shape(self.rank)
        if self.values.shape != expected:
            raise LayoutMismatch(
                f"values shape {self.values.shape} != local shape {expected} "
                f"of {self.layout.orientation}-pencil on rank {self.rank}"
            )

    @property
    def kind(self) -> str:
        return "complex" if np.iscomplexobj(self.values) else "real"

    @classmethod
    def from_global(cls, layout: PencilLayout, rank: int, global_array, dtype=None):
        values = layout.extract(rank, np.asarray(global_array))
        if dtype is not None:
            values = values.astype(dtype)
        return cls(layout, rank, values)

    @classmethod
    def zeros(cls, layout: PencilLayout, rank: int, dtype=float):
        return cls(layout, rank, np.zeros(layout.local_shape(rank), dtype=dtype))

    def to_global_block(self) -> tuple[tuple[slice, slice, slice], np.ndarray]:
        """``(slices, block)`` with the block in global (x, y, z) axis order."""
        inverse = np.argsort(self.layout.axes)
        return self.layout.global_slices(self.rank), self.values.transpose(inverse)


def assemble(fields) -> np.ndarray:
    """Gather per-rank fields (e.g. ``run_spmd`` results) into a global array."""
    fields = list(fields)
    grid = fields[0].layout.grid
    dtype = np.result_type(*[f.values.dtype for f in fields])
    out = np.zeros(grid.shape, dtype=dtype)
    for f in fields:
        slices, block = f.to_global_block()
        out[slices] = block
    return out


@dataclass(frozen=True)
class Block:
    """A box of elements moving from one rank's source block to another's target block."""

    peer: int
    src: tuple[slice, slice, slice]
    dst: tuple[slice, slice, slice]
    shape: tuple[int, int, int]  # in target axis order
    offset: int  # elements into the plan buffer

    @property
    def count(self) -> int:
        return math.prod(self.shape)


def _intersect(a, b):
    box = tuple((max(lo0, lo1), min(hi0, hi1)) for (lo0, hi0), (lo1, hi1) in zip(a, b))
    if any(lo >= hi for lo, hi in box):
        return None
    return box


def _local_slices(box, owner_box, axes):
    return tuple(slice(box[d][0] - owner_box[d][0], box[d][1] - owner_box[d][0]) for d in axes)


class TransposePlan:
    def __init__(self, source: PencilLayout, target: PencilLayout, comm, sends, recvs,
                 local, send_buf, recv_buf):
        self.source = source
        self.target = target
        self.comm = comm
        self.rank = comm.rank
        self.sends: list[Block] = sends
        self.recvs: list[Block] = recvs
        self.local: Block | None = local
        self.send_buf = send_buf
        self.recv_buf = recv_buf
        self.tag = _TAGS[frozenset(source.orientation + target.orientation)]
        # source axis i ends up at target position perm.index(i)
        self.perm = tuple(source.axes.index(d) for d in target.axes)

    @property
    def peers(self) -> list[int]:
        return [b.peer for b in self.sends]

    @property
    def buffer_bytes(self) -> int:
        return self.send_buf.nbytes + self.recv_buf.nbytes

    def __repr__(self):
        return (
            f"TransposePlan({self.source.orientation}->{self.target.orientation}, "
            f"rank={self.rank}, peers={self.peers}, buffer_bytes={self.buffer_bytes})"
        )

    def descriptors(self):
        return (
            [(b.peer, b.src, b.dst, b.shape, b.offset) for b in self.sends],
            [(b.peer, b.src, b.dst, b.shape, b.offset) for b in self.recvs],
            None if self.local is None else (self.local.src, self.local.dst, self.local.shape),
        )

    def dump(self) -> str:
        """Human readable description of every message in the plan."""

        def fmt(slices):
            return "[" + ", ".join(f"{s.start}:{s.stop}" for s in slices) + "]"

        lines = [
            f"plan {self.source.orientation}->{self.target.orientation} rank {self.rank} "
            f"grid {self.source.grid.shape} pgrid {self.source.pgrid.px}x{self.source.pgrid.py} "
            f"buffer_bytes {self.buffer_bytes}"
        ]
        if self.local is not None:
            b = self.local
            lines.append(f"  local  src{fmt(b.src)} -> dst{fmt(b.dst)} elements {b.count}")
        for b in self.sends:
            lines.append(f"  send -> {b.peer}  src{fmt(b.src)} elements {b.count} "
                         f"bytes(f8) {8 * b.count}")
        for b in self.recvs:
            lines.append(f"  recv <- {b.peer}  dst{fmt(b.dst)} elements {b.count} "
                         f"bytes(f8) {8 * b.count}")
        return "\n".join(lines)


def _peers(pgrid: ProcessGrid, rank: int, pair: frozenset) -> list[int]:
    ix, iy = pgrid.coords(rank)
    if pair == frozenset("zy"):
        return [pgrid.rank_of(ix, j) for j in range(pgrid.py)]
    return [pgrid.rank_of(i, iy) for i in range(pgrid.px)]


def plan_transpose(grid: GridSpec, pgrid: ProcessGrid, source: str, target: str, comm) -> TransposePlan:
    pair = frozenset(source + target)
    if source == target or pair not in _TAGS:
        raise ValueError(
            f"no direct transpose {source}->{target}; only z<->y and y<->x are planned "
            "(compose z<->x through y)"
        )
    if pgrid.size != comm.size:
        raise ValueError(f"process grid has {pgrid.size} ranks, communicator {comm.size}")
    src_layout = PencilLayout(source, grid, pgrid)
    dst_layout = PencilLayout(target, grid, pgrid)
    me = comm.rank
    my_src, my_dst = src_layout.box(me), dst_layout.box(me)

    sends, recvs, local = [], [], None
    send_off = recv_off = 0
    for peer in _peers(pgrid, me, pair):
        out_box = _intersect(my_src, dst_layout.box(peer))
        in_box = _intersect(src_layout.box(peer), my_dst)
        if out_box is None or in_box is None:
            raise AssertionError(f"empty block between ranks {me} and {peer}")
        if peer == me:
            local = Block(
                me,
                _local_slices(out_box, my_src, src_layout.axes),
                _local_slices(out_box, my_dst, dst_layout.axes),
                tuple(out_box[d][1] - out_box[d][0] for d in dst_layout.axes),
                0,
            )
            continue
        out_peer_dst = dst_layout.box(peer)
        send = Block(
            peer,
            _local_slices(out_box, my_src, src_layout.axes),
            _local_slices(out_box, out_peer_dst, dst_layout.axes),
            tuple(out_box[d][1] - out_box[d][0] for d in dst_layout.axes),
            send_off,
        )
        recv = Block(
            peer,
            _local_slices(in_box, src_layout.box(peer), src_layout.axes),
            _local_slices(in_box, my_dst, dst_layout.axes),
            tuple(in_box[d][1] - in_box[d][0] for d in dst_layout.axes),
            recv_off,
        )
        send_off += send.count
        recv_off += recv.count
        sends.append(send)
        recvs.append(recv)

    # both buffers hold either direction, so the inverse plan can swap them
    nbytes = max(send_off, recv_off) * _MAX_ITEMSIZE
    return TransposePlan(
        src_layout, dst_layout, comm, sends, recvs, local,
        np.empty(nbytes, dtype=np.uint8), np.empty(nbytes, dtype=np.uint8),
    )


def invert_plan(plan: TransposePlan) -> TransposePlan:
    """Plan for the reverse layout change, sharing ``plan``'s buffers."""
    axes = plan.source.axes

    def flip(b: Block) -> Block:
        shape = tuple(b.dst[plan.target.axes.index(d)].stop - b.dst[plan.target.axes.index(d)].start
                      for d in axes)
        return Block(b.peer, b.dst, b.src, shape, b.offset)

    return TransposePlan(
        plan.target, plan.source, plan.comm,
        [flip(b) for b in plan.recvs],
        [flip(b) for b in plan.sends],
        None if plan.local is None else flip(plan.local),
        plan.recv_buf, plan.send_buf,
    )


def _segment(buf: np.ndarray, block: Block, dtype) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    start = block.offset * itemsize
    return buf[start:start + block.count * itemsize].view(dtype).reshape(block.shape)


def execute_transpose(plan: TransposePlan, field_in: DistributedField, out: DistributedField | None = None) -> DistributedField:
    if field_in.layout != plan.source or field_in.rank != plan.rank:
        raise LayoutMismatch(
            f"field is a {field_in.layout.orientation}-pencil on rank {field_in.rank}, "
            f"plan expects {plan.source.orientation}-pencil on rank {plan.rank}"
        )
    src = field_in.values
    dtype = src.dtype
    if out is None:
        out = DistributedField.zeros(plan.target, plan.rank, dtype)
    elif out.layout != plan.target or out.values.dtype != dtype:
        raise LayoutMismatch("output field does not match plan target layout/dtype")
    dst = out.values

    sends = []
    for b in plan.sends:
        seg = _segment(plan.send_buf, b, dtype)
        np.copyto(seg, src[b.src].transpose(plan.perm))
        sends.append(MessageDescriptor(b.peer, plan.tag, seg))
    recvs = [MessageDescriptor(b.peer, plan.tag, _segment(plan.recv_buf, b, dtype)) for b in plan.recvs]

    pending = plan.comm.exchange_start(sends, recvs)
    if plan.local is not None:
        b = plan.local
        np.copyto(dst[b.dst], src[b.src].transpose(plan.perm))
    pending.finish()
    for b, d in zip(plan.recvs, recvs):
        dst[b.dst] = d.buffer
    return out
