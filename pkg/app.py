# app.py
import os

import altair as alt
import pandas as pd
import streamlit as st

st.set_page_config(
    page_title="LWFR Training Runs",
    layout="wide",
    initial_sidebar_state="expanded",
)

from app_helpers import checkpoint_table, list_runs, lr_loss_frame, val_accuracy_long
from errors import LwfrError
from trainer import compare_runs, read_metrics
from utils import format_accuracy

st.title("Lightweight face recognition: training runs")

with st.sidebar:
    root = st.text_input("Runs directory", value=os.environ.get("LWFR_RUNS_DIR", "runs"))
    runs = list_runs(root)
    if not runs:
        st.info(f"No run with a metrics log under `{root}`. Train one with `python cli.py train ...`.")
        st.stop()
    run = st.selectbox("Run", runs, format_func=os.path.basename)
    others = st.multiselect("Compare with", [r for r in runs if r != run], format_func=os.path.basename)

try:
    metrics = read_metrics(run)
except LwfrError as exc:
    st.error(f"Cannot read metrics of {run}: {exc}")
    st.stop()

curve = lr_loss_frame(metrics)
val_long = val_accuracy_long(metrics)

m1, m2, m3 = st.columns(3)
m1.metric("Epochs", int(metrics["epoch"].max()) + 1)
if not curve.empty:
    first, last = curve["train_loss"].iloc[0], curve["train_loss"].iloc[-1]
    m2.metric("Final loss", f"{last:.4f}", f"{last - first:+.4f}", delta_color="inverse")
if not val_long.empty:
    best = val_long.groupby("epoch")["accuracy"].mean().max()
    m3.metric("Best mean val accuracy", format_accuracy(best))

left_col, right_col = st.columns(2)
with left_col:
    st.caption("Learning rate per epoch")
    lr_chart = alt.Chart(curve).mark_line(point=True).encode(
        x=alt.X("epoch:Q", title="Epoch"),
        y=alt.Y("lr:Q", title="Learning rate", scale=alt.Scale(type="log")),
        tooltip=[alt.Tooltip("epoch:Q"), alt.Tooltip("lr:Q", format=".3e")],
    )
    st.altair_chart(lr_chart, use_container_width=True)
with right_col:
    st.caption("Training loss per epoch")
    loss_chart = alt.Chart(curve).mark_line(point=True).encode(
        x=alt.X("epoch:Q", title="Epoch"),
        y=alt.Y("train_loss:Q", title="Loss"),
        tooltip=[alt.Tooltip("epoch:Q"), alt.Tooltip("train_loss:Q", format=".4f")],
    )
    st.altair_chart(loss_chart, use_container_width=True)

if not val_long.empty:
    st.caption("Validation accuracy (10-fold mean, %)")
    val_chart = alt.Chart(val_long).mark_line(point=True).encode(
        x=alt.X("epoch:Q", title="Epoch"),
        y=alt.Y("accuracy:Q", title="Accuracy (%)", scale=alt.Scale(zero=False)),
        color=alt.Color("val_set:N", legend=alt.Legend(title="Validation set")),
        tooltip=[alt.Tooltip("val_set:N"), alt.Tooltip("epoch:Q"), alt.Tooltip("accuracy:Q", format=".2f")],
    )
    st.altair_chart(val_chart, use_container_width=True)

st.subheader("Checkpoints")
table = checkpoint_table(run)
if table.empty:
    st.caption("No checkpoints written yet.")
else:
    st.dataframe(table, use_container_width=True)

if others:
    st.subheader("Run comparison")
    try:
        st.dataframe(compare_runs([run] + others), use_container_width=True)
    except LwfrError as exc:
        st.error(str(exc))

with st.expander("Raw metrics log"):
    st.dataframe(pd.DataFrame(metrics), use_container_width=True)
