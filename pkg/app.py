"""
Results browser for finished safeturn runs.

    streamlit run app.py -- runs
"""

import json
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd
import plotly.graph_objects as go
import streamlit as st
from plotly.subplots import make_subplots

from safeturn.harness import aggregate_from_traces
from safeturn.render import create_trajectory_figure, figure_to_bytes, read_trace
from safeturn.report import TABLE_COLUMNS, create_excel_table, table_frame

COLORS = ['#28A745', '#C73E1D', '#F18F01', '#6F42C1']
OUTCOME_COLUMNS = [("success_pct", "Success"), ("collision_pct", "Collision"),
                   ("timeout_pct", "Timeout"), ("speed_violation_pct", "Speed violation")]


# ========== Loading ==========

def find_runs(root):
    """Directories under ``root`` holding an evaluation table or a training log."""
    root = Path(root)
    if not root.exists():
        return []
    found = {p.parent for p in root.rglob("table.csv")} | {p.parent for p in root.rglob("training.csv")}
    return sorted(found)


@st.cache_data
def load_csv(path):
    return pd.read_csv(path)


@st.cache_data
def load_trace(path):
    return read_trace(path)


def load_manifest(run_dir):
    path = Path(run_dir) / "run.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return None


# ========== Charts ==========

def create_outcome_chart(table):
    """Stacked outcome percentages and mean distance per agent."""
    fig = make_subplots(rows=1, cols=2, subplot_titles=("Episode outcomes (%)", "Avg. distance to closest pedestrian (m)"),
                        specs=[[{"type": "bar"}, {"type": "bar"}]])
    labels = table["agent"] + " / " + table["layout"]
    for (key, name), color in zip(OUTCOME_COLUMNS, COLORS):
        fig.add_trace(go.Bar(x=labels, y=table[key], name=name, marker_color=color), row=1, col=1)
    fig.add_trace(go.Bar(x=labels, y=table["avg_distance_m"], marker_color='#2E86AB', name='distance',
                         text=table["avg_distance_m"].apply(lambda v: f'{v:.2f}'), textposition='outside',
                         showlegend=False), row=1, col=2)
    fig.update_layout(height=420, barmode='stack', legend=dict(orientation="h", yanchor="bottom", y=1.05))
    return fig


def create_episode_chart(rows):
    """Ego speed and executed throttle over time, with shield interventions marked."""
    frame = pd.DataFrame(rows)
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True, subplot_titles=("Speed (m/s)", "Throttle"))
    fig.add_trace(go.Scatter(x=frame["time"], y=frame["speed"], mode='lines', name='speed',
                             line=dict(color='#2E86AB', width=2)), row=1, col=1)
    fig.add_trace(go.Scatter(x=frame["time"], y=frame["nominated"], mode='lines', name='nominated',
                             line=dict(color='#A23B72', width=1, dash='dot')), row=2, col=1)
    fig.add_trace(go.Scatter(x=frame["time"], y=frame["executed"], mode='lines', name='executed',
                             line=dict(color='#F18F01', width=2)), row=2, col=1)
    braked = frame[frame["intervened"]]
    if len(braked):
        fig.add_trace(go.Scatter(x=braked["time"], y=braked["executed"], mode='markers', name='shield brake',
                                 marker=dict(color='#C73E1D', size=6)), row=2, col=1)
    fig.update_layout(height=480, hovermode='x unified')
    return fig


def create_training_chart(log):
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=log["episode"], y=log["return"], mode='lines', name='return',
                             line=dict(color='#2E86AB', width=1)))
    fig.add_trace(go.Scatter(x=log["episode"], y=log["return"].rolling(20, min_periods=1).mean(), mode='lines',
                             name='moving average (20)', line=dict(color='#C73E1D', width=2)))
    fig.update_layout(title='Episode return', xaxis_title='episode', yaxis_title='return', height=400)
    return fig


# ========== Page ==========

st.set_page_config(page_title="safeturn results", layout="wide")
st.title("🚗 Safe left turn: run browser")

default_root = sys.argv[1] if len(sys.argv) > 1 else "runs"
root = st.sidebar.text_input("Runs directory", value=default_root)
runs = find_runs(root)
if not runs:
    st.info(f"No finished runs under '{root}'. Run `python -m safeturn eval ...` first.")
    st.stop()
run_dir = st.sidebar.selectbox("Run", runs, format_func=lambda p: str(p.relative_to(root)) or ".")

manifest = load_manifest(run_dir)
if manifest:
    st.sidebar.caption(f"created {manifest.get('created', '?')} · profile {manifest['config'].get('profile')} · "
                       f"seed {manifest['config'].get('seed')}")

tab1, tab2, tab3 = st.tabs(["Comparison", "Episodes", "Training"])

with tab1:
    table_path = run_dir / "table.csv"
    if table_path.exists():
        table = load_csv(str(table_path))
        st.dataframe(table.rename(columns={key: header for key, header, _ in TABLE_COLUMNS}),
                     use_container_width=True, hide_index=True)
        st.plotly_chart(create_outcome_chart(table), use_container_width=True)

        trace_path = run_dir / "episodes.jsonl"
        if trace_path.exists() and st.button("Recompute table from episode traces"):
            rebuilt = table_frame(aggregate_from_traces(trace_path))
            if rebuilt.round(9).equals(table.round(9)):
                st.success("Table matches the episode traces.")
            else:
                st.error("Table differs from the episode traces.")
                st.dataframe(rebuilt, use_container_width=True, hide_index=True)

        st.download_button("📥 Excel table", data=create_excel_table(table.to_dict("records")),
                           file_name="table.xlsx",
                           mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet")
    else:
        st.info("This run has no evaluation table.")

with tab2:
    trace_path = run_dir / "episodes.jsonl"
    metrics_path = run_dir / "metrics.csv"
    if trace_path.exists() and metrics_path.exists():
        metrics = load_csv(str(metrics_path))
        outcome = st.multiselect("Outcome", sorted(metrics["outcome"].unique()),
                                 default=sorted(metrics["outcome"].unique()))
        shown = metrics[metrics["outcome"].isin(outcome)]
        st.dataframe(shown, use_container_width=True, hide_index=True)

        episodes = load_trace(str(trace_path))
        keys = [(row.variant, int(row.episode)) for row in shown.itertuples()]
        if keys:
            variant, index = st.selectbox("Episode", keys, format_func=lambda k: f"{k[0]} #{k[1]}")
            rows = episodes[(variant, index)]
            col1, col2, col3, col4 = st.columns(4)
            col1.metric("Outcome", rows[-1]["outcome"] or "-")
            col2.metric("Crossing time", f"{rows[-1]['time']:.2f} s")
            col3.metric("Shield interventions", sum(r["intervened"] for r in rows))
            distances = [r["min_distance"] for r in rows if r["min_distance"] is not None]
            col4.metric("Closest approach", f"{min(distances):.2f} m" if distances else "-")
            st.plotly_chart(create_episode_chart(rows), use_container_width=True)

            fig = create_trajectory_figure(rows)
            st.pyplot(fig)
            st.download_button("📥 Trajectory PNG", data=figure_to_bytes(fig),
                               file_name=f"trajectory_{variant}_{index}.png", mime="image/png")
            plt.close(fig)
    else:
        st.info("This run has no episode traces.")

with tab3:
    log_path = run_dir / "training.csv"
    if log_path.exists():
        log = load_csv(str(log_path))
        col1, col2, col3 = st.columns(3)
        col1.metric("Episodes", len(log))
        col2.metric("Final epsilon", f"{log['epsilon'].iloc[-1]:.3f}")
        col3.metric("Goal rate (last 50)", f"{(log['outcome'].tail(50) == 'success').mean() * 100:.1f}%")
        st.plotly_chart(create_training_chart(log), use_container_width=True)
        st.dataframe(log, use_container_width=True, hide_index=True)
    else:
        st.info("This run has no training log.")
