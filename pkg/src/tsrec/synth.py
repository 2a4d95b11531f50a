"""Synthetic interaction logs with planted repeat structure.

Each user fills a timeline of slots spaced `base_gap` seconds apart.  A slot
emits, in priority order: a scheduled repurchase of one of the user's periodic
items (due every `period_slots` slots, jittered by a uniform integer in
[-jitter_slots, +jitter_slots]), a uniform-random noise item at `noise_rate`,
or the next entry of the user's personal block of `block_len` items replayed
in order.  Slots with nothing to emit stay empty, so per-user timestamps are
strictly increasing multiples of base_gap apart.

Periodic items come from the pool 1..periodic_items; block items from the
remainder of the vocabulary.  Per-user generators are seeded from
(seed, user id), so output is independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionLog, make_log


@dataclass
class SyntheticConfig:
    users: int = 200
    items: int = 50
    events_per_user: int = 60
    periodic_items: int = 10    # pool size; item ids 1..periodic_items cycle
    periodic_per_user: int = 2
    period_slots: int = 8       # consumption cycle in base_gap units
    jitter_slots: int = 1
    block_len: int = 3          # 0 disables block replay
    noise_rate: float = 0.1
    base_gap: int = 60          # seconds between adjacent slots
    seed: int = 0

    def validate(self):
        for name in ("users", "items", "events_per_user", "base_gap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.period_slots <= 0:
            raise ValueError("period_slots must be positive")
        if not 0 <= self.jitter_slots < self.period_slots:
            raise ValueError("jitter must be non-negative and below the period")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if self.periodic_items > self.items:
            raise ValueError("periodic pool larger than the vocabulary")
        if self.periodic_per_user > self.periodic_items:
            raise ValueError("periodic_per_user exceeds the periodic pool")
        if self.block_len > self.items - self.periodic_items:
            raise ValueError("block_len exceeds the non-periodic pool")
        if self.periodic_per_user == 0 and self.block_len == 0 and self.noise_rate == 0.0:
            raise ValueError("no event source active; users would never emit")
        return self


def generate(cfg: SyntheticConfig) -> InteractionLog:
    """Deterministic log with planted periodic and block-replay patterns."""
    cfg.validate()
    users, items, times = [], [], []
    for u in range(1, cfg.users + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, u]))
        periodic = (rng.choice(np.arange(1, cfg.periodic_items + 1),
                               size=cfg.periodic_per_user, replace=False)
                    if cfg.periodic_per_user else np.zeros(0, dtype=np.int64))
        due = {int(i): int(rng.integers(0, cfg.period_slots)) for i in periodic}
        if cfg.block_len:
            pool = np.arange(cfg.periodic_items + 1, cfg.items + 1)
            block = rng.choice(pool, size=cfg.block_len, replace=False)
        else:
            block = np.zeros(0, dtype=np.int64)
        block_pos = 0
        t0 = u  # stagger users; within-user gaps stay multiples of base_gap

        emitted = 0
        slot = 0
        while emitted < cfg.events_per_user:
            item = None
            ready = [i for i, d in due.items() if d <= slot]
            if ready:
                item = min(ready, key=lambda i: (due[i], i))
                jitter = int(rng.integers(-cfg.jitter_slots, cfg.jitter_slots + 1)) \
                    if cfg.jitter_slots else 0
                due[item] = slot + cfg.period_slots + jitter
            elif cfg.noise_rate and rng.random() < cfg.noise_rate:
                item = int(rng.integers(1, cfg.items + 1))
            elif cfg.block_len:
                item = int(block[block_pos])
                block_pos = (block_pos + 1) % cfg.block_len
            if item is not None:
                users.append(u)
                items.append(item)
                times.append(t0 + slot * cfg.base_gap)
                emitted += 1
            slot += 1
    return make_log(np.array(users), np.array(items), np.array(times))
