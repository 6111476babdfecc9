import traceback
from collections.abc import Callable
from typing import TYPE_CHECKING

from PySide6.QtCore import QObject, QRunnable, Signal, Slot

if TYPE_CHECKING:
    from src.controller.controller import EpisodeJob, EpisodeResult


class EpisodeWorkerSignals(QObject):
    # Outlives the runnable, which the pool deletes after run()
    finished = Signal(int, int, bool)  # cell index, episode index, completed
    error = Signal(int, int, str, str)  # cell index, episode index, message, traceback
    result = Signal(object)


class EpisodeWorker(QRunnable):
    """
    Runs one campaign episode on a QThreadPool thread.

    The episode's EpisodeResult is emitted on `signals.result`. An exception
    raised outside the episode itself (writing the trace, say) is emitted on
    `signals.error` instead of escaping the pool thread.
    """

    def __init__(
        self, job: 'EpisodeJob', run_job: Callable[['EpisodeJob'], 'EpisodeResult']
    ) -> None:
        super().__init__()
        self.job = job
        self.run_job = run_job
        self.signals = EpisodeWorkerSignals()

    @Slot()
    def run(self) -> None:
        cell, episode = self.job.cell.index, self.job.index
        complete = False
        try:
            result = self.run_job(self.job)
            complete = True
        except Exception as e:
            tb = traceback.format_exc()
            self.signals.error.emit(cell, episode, str(e), tb)
        else:
            self.signals.result.emit(result)
        finally:
            self.signals.finished.emit(cell, episode, complete)
