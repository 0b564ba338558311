import asyncio
import logging
import threading
from typing import Callable, Optional, Sequence

from tqdm import tqdm

logger = logging.getLogger(__name__)

Cell = Callable[[], float]


class CellStatus:
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class SweepTracker:
    """Status of every cell of one sweep, safe to update from worker threads."""

    def __init__(self, n_cells: int):
        self._status = [CellStatus.PENDING] * n_cells
        self._lock = threading.Lock()

    def set(self, index: int, status: str) -> None:
        with self._lock:
            self._status[index] = status

    def get(self, index: int) -> str:
        return self._status[index]

    def counts(self) -> dict[str, int]:
        with self._lock:
            snapshot = list(self._status)
        return {s: snapshot.count(s) for s in
                (CellStatus.PENDING, CellStatus.RUNNING, CellStatus.COMPLETED, CellStatus.FAILED)}


class SweepRunner:
    """Runs independent sweep cells and returns their results in cell order.

    With ``workers`` > 1 cells are dispatched to threads through asyncio
    (numpy releases the GIL inside its kernels). Results are stored by index,
    never by completion order, so the output does not depend on scheduling.
    """

    def __init__(self, workers: int = 1, desc: str = "sweep", progress: Optional[bool] = None):
        self.workers = max(1, workers)
        self.desc = desc
        # None -> show progress only when attached to a terminal
        self.progress = progress

    def _bar(self, total: int) -> tqdm:
        disable = None if self.progress is None else not self.progress
        return tqdm(total=total, desc=self.desc, disable=disable, leave=False)

    def _execute(self, index: int, cell: Cell, tracker: SweepTracker) -> float:
        tracker.set(index, CellStatus.RUNNING)
        try:
            value = cell()
        except Exception:
            tracker.set(index, CellStatus.FAILED)
            logger.error("[%s] cell %d failed", self.desc, index)
            raise
        tracker.set(index, CellStatus.COMPLETED)
        return value

    async def run_async(self, cells: Sequence[Cell]) -> list[float]:
        tracker = SweepTracker(len(cells))
        results: list[Optional[float]] = [None] * len(cells)
        semaphore = asyncio.Semaphore(self.workers)

        with self._bar(len(cells)) as bar:
            async def run_one(index: int, cell: Cell) -> None:
                async with semaphore:
                    results[index] = await asyncio.to_thread(self._execute, index, cell, tracker)
                bar.update(1)

            await asyncio.gather(*(run_one(i, c) for i, c in enumerate(cells)))

        logger.debug("[%s] finished: %s", self.desc, tracker.counts())
        return results  # type: ignore[return-value]

    def run(self, cells: Sequence[Cell]) -> list[float]:
        logger.info("[%s] %d cells on %d worker(s)", self.desc, len(cells), self.workers)
        if self.workers > 1:
            return asyncio.run(self.run_async(cells))

        tracker = SweepTracker(len(cells))
        results = []
        with self._bar(len(cells)) as bar:
            for index, cell in enumerate(cells):
                results.append(self._execute(index, cell, tracker))
                bar.update(1)
        return results
