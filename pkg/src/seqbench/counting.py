"""Multiply-accumulate instrumentation for the dense kernels.

An OpCounter is owned by one worker (no shared mutation); counters from
parallel workers are combined with `merge`. Scopes attribute MACs to named
buckets like "encoder.attn_scores" so benchmark code can split counts by
model section.
"""

from __future__ import annotations

from contextlib import contextmanager


class OpCounter:
    """Tallies matmul multiply-accumulates and elementwise operations.

    mac_count covers matmuls only; elementwise_count covers activation and
    normalization work and is tracked separately (it is excluded from the
    operation-count model fits). Both are monotone within a measured region
    and resettable.
    """

    def __init__(self) -> None:
        self.mac_count = 0
        self.elementwise_count = 0
        self.buckets: dict[str, int] = {}
        self._scopes: list[str] = []

    def reset(self) -> None:
        self.mac_count = 0
        self.elementwise_count = 0
        self.buckets = {}

    def add_macs(self, n: int) -> None:
        self.mac_count += n
        if self._scopes:
            key = ".".join(self._scopes)
            self.buckets[key] = self.buckets.get(key, 0) + n

    def add_macs_bucket(self, bucket: str, n: int) -> None:
        """Scope-free bucket add for hot loops (incremental decode steps)."""
        self.mac_count += n
        self.buckets[bucket] = self.buckets.get(bucket, 0) + n

    def add_elementwise(self, n: int) -> None:
        self.elementwise_count += n

    @contextmanager
    def scope(self, name: str):
        """Attribute MACs recorded inside the block to a dotted bucket name."""
        self._scopes.append(name)
        try:
            yield self
        finally:
            self._scopes.pop()

    def bucket_total(self, prefix: str = "") -> int:
        """Sum of all buckets whose dotted name starts with `prefix`."""
        if not prefix:
            return sum(self.buckets.values())
        return sum(
            v for k, v in self.buckets.items()
            if k == prefix or k.startswith(prefix + ".")
        )

    def merge(self, other: "OpCounter") -> None:
        """Fold another worker's counter into this one."""
        self.mac_count += other.mac_count
        self.elementwise_count += other.elementwise_count
        for k, v in other.buckets.items():
            self.buckets[k] = self.buckets.get(k, 0) + v

    def snapshot(self) -> dict[str, int]:
        out = dict(self.buckets)
        out["__total_macs__"] = self.mac_count
        out["__elementwise__"] = self.elementwise_count
        return out


@contextmanager
def scoped(counter: OpCounter | None, name: str):
    """counter.scope(name) that tolerates counter=None."""
    if counter is None:
        yield None
    else:
        with counter.scope(name):
            yield counter
