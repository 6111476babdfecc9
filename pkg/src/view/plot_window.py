from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import pandas as pd
from matplotlib.backends.backend_qtagg import FigureCanvasQTAgg as FigureCanvas
from matplotlib.figure import Figure
from pandas import DataFrame
from PySide6.QtWidgets import (
    QHBoxLayout,
    QLabel,
    QMainWindow,
    QVBoxLayout,
    QWidget,
)
from qt_material import apply_stylesheet

import src.helpers.helpers as h

EVENT_STYLES: dict[str, tuple[str, str]] = {
    'anomaly': ('r', 'x'),
    'completion': ('lime', 'o'),
    'stagnation': ('orange', 's'),
}


def trace_frame(records: Iterable[dict[str, Any]]) -> tuple[DataFrame, dict]:
    """
    Splits the records of an episode trace into a per-tick DataFrame and the
    closing summary record (empty if the trace has none).
    """
    rows = []
    summary: dict = {}
    for record in records:
        if record.get('summary'):
            summary = record
        else:
            rows.append(record)
    df = pd.DataFrame(
        rows,
        columns=['tick', 'goal', 'verdict', 'value', 'issued_at_tick', 'events'],
    )
    return df, summary


def create_fig(records: Iterable[dict[str, Any]], title: str | None = None) -> Figure:
    """
    Critic value stream of one episode with the preemption events marked, and
    the active goal underneath.
    """
    df, summary = trace_frame(records)
    fig = Figure(layout='constrained')
    if title is None:
        title = (
            f'{summary.get("scheduler", "?")} on {summary.get("scenario", "?")} '
            f'(seed {summary.get("seed", "?")})'
        )
    fig.suptitle(title, size=15)

    # --- Value Stream ---
    ax_val = fig.add_subplot(211)
    ax_val.set_title('Critic Value')
    ax_val.set_ylim(-1.05, 0.05)
    ax_val.set_ylabel('value')
    if not df.empty:
        values = pd.to_numeric(df['value'], errors='coerce')
        ax_val.plot(df['tick'], values, c='b', lw=1)
        for kind, (color, marker) in EVENT_STYLES.items():
            hit = df['events'].apply(lambda events, k=kind: k in (events or ()))
            if not hit.any():
                continue
            # anomaly ticks carry no value
            y = values[hit].fillna(0.0)
            ax_val.scatter(
                df['tick'][hit], y, c=color, marker=marker, label=kind, zorder=3
            )
        if ax_val.get_legend_handles_labels()[0]:
            ax_val.legend(loc='lower right')

    # --- Active Goal ---
    ax_goal = fig.add_subplot(212, sharex=ax_val)
    ax_goal.set_title('Active Goal')
    ax_goal.set_xlabel('tick')
    if not df.empty:
        goals = df['goal'].fillna('(none)')
        codes, labels = pd.factorize(goals)
        ax_goal.step(df['tick'], codes, where='post', c='g')
        ax_goal.set_yticks(range(len(labels)), labels=list(labels), fontsize=7)

    if summary:
        ax_val.text(
            0.01,
            0.05,
            f'Brain queries: {summary.get("brain_query_count")}  '
            f'Success: {summary.get("success")}',
            transform=ax_val.transAxes,
            fontsize=10,
            verticalalignment='bottom',
            bbox=dict(boxstyle='round', facecolor='wheat', alpha=0.5),
        )
    return fig


def save_figure(records: Sequence[dict[str, Any]], filepath: str | Path) -> Path:
    """Renders a trace figure straight to a file, no window needed."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    create_fig(records).savefig(filepath, dpi=150)
    return filepath


class PlotWindow(QMainWindow):
    """
    Shows the critic value stream of a recorded episode trace.

    Example usage:
    >>> records = list(h.read_jsonl('runs/campaign/traces/tri_fallen_0.jsonl'))
    >>> plot_window = PlotWindow(records)
    >>> plot_window.create_gui()
    >>> plot_window.show()
    """

    def __init__(
        self, records: Sequence[dict[str, Any]], parent: QWidget | None = None
    ) -> None:
        super().__init__(parent)
        self.records = list(records)
        _, self.summary = trace_frame(self.records)
        self.fig_title = (
            f'{self.summary.get("scheduler", "trace")}_'
            f'{self.summary.get("scenario", "episode")}_'
            f'{self.summary.get("seed", 0)}'
        )
        self.fig_canvas = FigureCanvas(create_fig(self.records))

    def create_gui(self) -> None:
        self.setWindowTitle('Episode Trace')
        apply_stylesheet(self, theme='dark_lightgreen.xml', invert_secondary=True)

        # --- Create Menu Bar ---
        menu_bar = self.menuBar()
        file_menu = menu_bar.addMenu('&File')

        save_action = file_menu.addAction('&Save Plot')
        save_action.setShortcut('Ctrl+S')
        save_action.triggered.connect(self.handle_save_plot_clicked)

        queries_label = QLabel(
            f'Brain queries: {self.summary.get("brain_query_count", "n/a")}'
        )
        queries_label.setStyleSheet('font-size: 16pt;')
        resets_label = QLabel(
            f'Stagnation resets: {self.summary.get("stagnation_resets", "n/a")}'
        )
        resets_label.setStyleSheet('font-size: 16pt;')
        success_label = QLabel(f'Success: {self.summary.get("success", "n/a")}')
        success_label.setStyleSheet('font-size: 16pt;')

        stats_layout = QHBoxLayout()
        stats_layout.addWidget(queries_label)
        stats_layout.addWidget(resets_label)
        stats_layout.addWidget(success_label)

        main_layout = QVBoxLayout()
        main_layout.addLayout(stats_layout, 0)
        main_layout.addWidget(self.fig_canvas, 1)

        container = QWidget()
        container.setLayout(main_layout)
        self.setCentralWidget(container)

    def handle_save_plot_clicked(self) -> None:
        default_name = self.fig_title.replace('/', '_').replace(':', '_')
        filepath = h.select_save_file(default_name)
        if not filepath:
            return
        self.fig_canvas.figure.savefig(filepath, dpi=300)
