import logging
import os
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from app.config import Config
from app.services.artifact_store import read_frame
from app.utils.constants import COLORS, METHOD_COLORS

logger = logging.getLogger(__name__)

SERIES_COLORS = [COLORS['primary'], COLORS['warning'], COLORS['success'], COLORS['danger'],
                 COLORS['info'], COLORS['secondary']]


def _marginal_curve(frame: pd.DataFrame) -> pd.DataFrame:
    """First-coordinate marginal of a long-format density table"""
    others = [column for column in frame.columns if column.startswith('x') and column != 'x0']
    if not others:
        return frame[['x0', 'density']]
    cell = 1.0
    for column in others:
        nodes = np.unique(frame[column].to_numpy())
        cell *= nodes[1] - nodes[0]
    summed = frame.groupby('x0', sort=True)['density'].sum() * cell
    return summed.reset_index()


class Visualizer:
    """Static figures built from persisted CSV artifacts"""

    def __init__(self):
        self.colors = COLORS
        self.layout = dict(
            paper_bgcolor='white',
            plot_bgcolor='white',
            font={'color': COLORS['dark'], 'size': 12},
            height=420,
            width=640,
        )

    def create_density_overlay(self, density_csv: str, target_csv: str,
                               title: str = "Density vs target") -> go.Figure:
        """Computed density (first coordinate) against the analytic target"""
        computed = _marginal_curve(read_frame(density_csv))
        target = _marginal_curve(read_frame(target_csv))
        if computed.empty:
            return self._create_empty_chart("No density data available")

        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=computed['x0'], y=computed['density'], mode='lines',
            line=dict(color=self.colors['info'], width=2), name='computed',
        ))
        fig.add_trace(go.Scatter(
            x=target['x0'], y=target['density'], mode='lines',
            line=dict(color=self.colors['danger'], width=2, dash='dash'), name='target',
        ))
        fig.update_layout(title=title, xaxis_title="x", yaxis_title="density", **self.layout)
        return fig

    def create_histogram(self, ensemble_csv: str, target_csv: Optional[str] = None,
                         method: str = '', title: str = "First-coordinate histogram") -> go.Figure:
        """Particle histogram with PLOT_BINS bins over PLOT_RANGE"""
        ensemble = read_frame(ensemble_csv)
        if ensemble.empty:
            return self._create_empty_chart("No particles available")
        lo, hi = Config.PLOT_RANGE

        fig = go.Figure()
        fig.add_trace(go.Histogram(
            x=ensemble['x0'], histnorm='probability density',
            xbins=dict(start=lo, end=hi, size=(hi - lo) / Config.PLOT_BINS),
            marker=dict(color=METHOD_COLORS.get(method, self.colors['primary'])),
            opacity=0.75, name=method or 'particles',
        ))
        if target_csv:
            target = _marginal_curve(read_frame(target_csv))
            fig.add_trace(go.Scatter(
                x=target['x0'], y=target['density'], mode='lines',
                line=dict(color=self.colors['danger'], width=2), name='target',
            ))
        fig.update_layout(title=title, xaxis_title="x0", yaxis_title="density",
                          xaxis=dict(range=[lo, hi]), **self.layout)
        return fig

    def create_kl_chart(self, runs: Dict[str, str], show_bound: bool = True,
                        title: str = "KL divergence") -> go.Figure:
        """Measured KL per run on a log axis, with the theory bound when present"""
        if not runs:
            return self._create_empty_chart("No run data available")

        fig = go.Figure()
        for i, (label, path) in enumerate(runs.items()):
            frame = read_frame(path)
            color = SERIES_COLORS[i % len(SERIES_COLORS)]
            fig.add_trace(go.Scatter(
                x=frame['iter'], y=frame['kl'], mode='lines+markers',
                marker=dict(size=4), line=dict(color=color, width=2), name=f'{label} KL',
            ))
            if show_bound and frame['kl_bound'].notna().any():
                fig.add_trace(go.Scatter(
                    x=frame['iter'], y=frame['kl_bound'], mode='lines',
                    line=dict(color=color, width=1, dash='dash'), name=f'{label} bound',
                ))
        fig.update_layout(title=title, xaxis_title="iteration", yaxis_title="KL",
                          yaxis_type='log', **self.layout)
        return fig

    def create_slope_chart(self, report_csv: str, x: str, y: str, group: Optional[str] = None,
                           title: str = "Error vs stepsize") -> go.Figure:
        """Log-log error curve(s) from a slope report"""
        frame = read_frame(report_csv)
        if frame.empty:
            return self._create_empty_chart("No slope data available")
        groups = frame.groupby(group, sort=True) if group else [('error', frame)]

        fig = go.Figure()
        for i, (label, part) in enumerate(groups):
            fig.add_trace(go.Scatter(
                x=part[x], y=part[y], mode='lines+markers',
                line=dict(color=SERIES_COLORS[i % len(SERIES_COLORS)], width=2),
                name=f'{group} = {label}' if group else str(label),
            ))
        fig.update_layout(title=title, xaxis_title=x, yaxis_title=y,
                          xaxis_type='log', yaxis_type='log', **self.layout)
        return fig

    def create_error_curve(self, csv_path: str, columns: Sequence[str] = ('l1',),
                           title: str = "L1 error vs iteration") -> go.Figure:
        frame = read_frame(csv_path)
        if frame.empty:
            return self._create_empty_chart("No error data available")

        fig = go.Figure()
        for i, column in enumerate(columns):
            fig.add_trace(go.Scatter(
                x=frame['iter'], y=frame[column], mode='lines',
                line=dict(color=SERIES_COLORS[i % len(SERIES_COLORS)], width=2), name=column,
            ))
        fig.update_layout(title=title, xaxis_title="iteration", yaxis_title="error",
                          yaxis_type='log', **self.layout)
        return fig

    def save(self, fig: go.Figure, path: str) -> str:
        """Write SVG, or standalone HTML when static export is unavailable"""
        try:
            fig.write_image(path, format='svg')
            return path
        except (ImportError, ValueError, RuntimeError, OSError) as exc:
            fallback = os.path.splitext(path)[0] + '.html'
            logger.warning(f"Static SVG export failed ({exc}); writing {fallback} instead")
            fig.write_html(fallback, include_plotlyjs='cdn')
            return fallback

    def _create_empty_chart(self, message: str) -> go.Figure:
        """Create empty chart with message"""
        fig = go.Figure()

        fig.add_annotation(
            text=message,
            xref="paper", yref="paper",
            x=0.5, y=0.5,
            xanchor='center', yanchor='middle',
            showarrow=False,
            font={'size': 16, 'color': self.colors['muted']}
        )

        fig.update_layout(
            xaxis={'visible': False},
            yaxis={'visible': False},
            **self.layout
        )

        return fig
