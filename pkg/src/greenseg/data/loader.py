"""Batch loader with optional in-memory caching and threaded prefetching.

Worker ``w`` of ``W`` produces batches ``w, w+W, w+2W, ...`` of an epoch into
its own bounded queue holding ``prefetch_per_worker`` batches; the consumer
reads the queues round-robin so batch order does not depend on ``W``.
Random augmentation draws are seeded by ``(shuffle_seed, epoch, index)`` for
the same reason.
"""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .types import stack_batch


class LoaderError(RuntimeError):
    pass


@dataclass
class LoaderConfig:
    workers: int = 0
    prefetch_per_worker: int = 2
    persistent_workers: bool = False
    cache: bool = False
    batch_size: int = 16
    shuffle_seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        if self.prefetch_per_worker < 1:
            raise ValueError("prefetch_per_worker must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class DecodingDataset:
    """Wraps slices behind a per-sample decode delay (benchmark stand-in for
    reading and decoding files)."""

    def __init__(self, pairs, decode_seconds: float = 0.0):
        self.pairs = list(pairs)
        self.decode_seconds = decode_seconds

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        if self.decode_seconds:
            time.sleep(self.decode_seconds)
        return self.pairs[i]


@dataclass
class Batch:
    images: np.ndarray
    masks: np.ndarray
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter((self.images, self.masks))


class _Stop:
    pass


class _Failure:
    def __init__(self, exc):
        self.exc = exc


class Loader:
    def __init__(self, dataset, cfg: LoaderConfig, transform: Optional[Callable] = None,
                 augment: Optional[Callable] = None):
        self.dataset = dataset
        self.cfg = cfg
        self.transform = transform
        self.augment = augment
        self.epoch = 0
        self._cache = None
        self._pool: list = []
        if cfg.cache:
            items = []
            for i in range(len(dataset)):
                s = dataset[i]
                items.append(transform(s) if transform else s)
            self._cache = tuple(items)

    # -- sample production ----------------------------------------------

    def __len__(self):
        n = len(self.dataset)
        return -(-n // self.cfg.batch_size)

    @property
    def cache_nbytes(self) -> int:
        if self._cache is None:
            return 0
        return sum(s.nbytes() for s in self._cache)

    def _sample(self, i, epoch):
        if self._cache is not None:
            s = self._cache[i]
        else:
            s = self.dataset[i]
            if self.transform:
                s = self.transform(s)
        if self.augment:
            s = self.augment(s, np.random.default_rng([self.cfg.shuffle_seed, epoch, i]))
        return s

    def _batches(self, epoch):
        n = len(self.dataset)
        if self.cfg.shuffle:
            order = np.random.default_rng([self.cfg.shuffle_seed, epoch]).permutation(n)
        else:
            order = np.arange(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    @staticmethod
    def _collate(samples):
        images, masks = stack_batch(samples)
        return Batch(images, masks, samples)

    # -- worker plumbing -----------------------------------------------------

    def _job(self, epoch, batch_ids, batches, out: queue.Queue, stop: threading.Event):
        try:
            for b in batch_ids:
                samples = [self._sample(int(i), epoch) for i in batches[b]]
                while not stop.is_set():
                    try:
                        out.put(samples, timeout=0.05)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # forwarded to the consumer
            out.put(_Failure(exc))

    def _persistent_loop(self, tasks: queue.Queue):
        while True:
            task = tasks.get()
            if isinstance(task, _Stop):
                return
            self._job(*task)

    def _ensure_pool(self):
        if not self._pool:
            for w in range(self.cfg.workers):
                tasks = queue.Queue()
                t = threading.Thread(target=self._persistent_loop, args=(tasks,), daemon=True,
                                     name=f"loader-worker-{w}")
                t.start()
                self._pool.append((t, tasks))

    def close(self):
        for t, tasks in self._pool:
            tasks.put(_Stop())
        for t, _ in self._pool:
            t.join()
        self._pool = []

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def __iter__(self):
        epoch = self.epoch
        self.epoch += 1
        return self.iter_epoch(epoch)

    def iter_epoch(self, epoch: int):
        batches = self._batches(epoch)
        W = self.cfg.workers
        if W == 0:
            for idx in batches:
                yield self._collate([self._sample(int(i), epoch) for i in idx])
            return
        stop = threading.Event()
        outs = [queue.Queue(maxsize=self.cfg.prefetch_per_worker) for _ in range(W)]
        threads = []
        if self.cfg.persistent_workers:
            self._ensure_pool()
            for w, (_, tasks) in enumerate(self._pool):
                tasks.put((epoch, range(w, len(batches), W), batches, outs[w], stop))
        else:
            for w in range(W):
                t = threading.Thread(target=self._job, daemon=True, name=f"loader-worker-{w}",
                                     args=(epoch, range(w, len(batches), W), batches, outs[w], stop))
                t.start()
                threads.append(t)
        try:
            for b in range(len(batches)):
                item = outs[b % W].get()
                if isinstance(item, _Failure):
                    raise LoaderError(f"loader worker {b % W} failed: {item.exc!r}") from item.exc
                yield self._collate(item)
        finally:
            stop.set()
            for t in threads:
                t.join()


def make_loader(dataset, cfg: LoaderConfig, transform: Optional[Callable] = None,
                augment: Optional[Callable] = None) -> Loader:
    """Build a loader.  ``transform`` is deterministic (cached when
    ``cfg.cache``); ``augment(sample, rng)`` is re-drawn every epoch."""
    return Loader(dataset, cfg, transform, augment)
