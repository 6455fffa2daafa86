"""
Image-quality metrics and evaluation reports.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots
from pydantic import BaseModel, Field

from core.exceptions import DimensionError, MetricError

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
REGION = "truth_face&pca_face"
METHODS = ("pca_only", "ours_no_specular", "ours_specular")


def psnr_from_rmse(rmse: float) -> float:
    """20·log10(255 / RMSE), capped at PSNR_CAP (identical images included)."""
    if rmse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(255.0 / rmse)))


def rmse_psnr(rendered: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> Tuple[float, float]:
    """RMSE over masked pixels and channels in 8-bit units, and the matching PSNR."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if rendered.shape != truth.shape:
        raise DimensionError(f"Image shapes differ: {rendered.shape} vs {truth.shape}")
    if mask.shape != truth.shape[:2]:
        raise DimensionError(f"Mask shape {mask.shape} does not match image {truth.shape[:2]}")
    if not mask.any():
        raise MetricError("Evaluation mask is empty")
    diff = rendered[mask] - truth[mask]
    rmse = float(np.sqrt(np.mean(diff * diff)))
    return rmse, psnr_from_rmse(rmse)


class EvalRow(BaseModel):
    seed: int = Field(..., description="Scene seed")
    frame: int = Field(..., description="Timestamp, -1 for the per-method aggregate")
    method: str = Field(..., description="Pipeline variant")
    rmse: float = Field(float("nan"), description="Root-mean-square error in 8-bit units")
    psnr: float = Field(float("nan"), description="Peak signal-to-noise ratio in dB")
    pixels: int = Field(0, description="Masked pixels the metrics cover")
    region: str = Field(REGION, description="Identifier of the evaluation region")
    status: str = Field("ok", description="'ok' or a failure annotation")


class EvalReport(BaseModel):
    rows: List[EvalRow] = Field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def with_aggregates(self) -> "EvalReport":
        """Appends one pooled row per (seed, method): RMSE over all frames' pixels, PSNR from it."""
        out = EvalReport(rows=[r for r in self.rows if r.frame >= 0])
        keys = sorted({(r.seed, r.method) for r in out.rows}, key=lambda k: (k[0], _method_order(k[1])))
        for seed, method in keys:
            rows = [r for r in out.rows if r.seed == seed and r.method == method and r.status == "ok"]
            pixels = sum(r.pixels for r in rows)
            if not pixels:
                out.add(EvalRow(seed=seed, frame=-1, method=method, status="failed: no evaluated frame"))
                continue
            rmse = float(np.sqrt(sum(r.rmse ** 2 * r.pixels for r in rows) / pixels))
            out.add(EvalRow(seed=seed, frame=-1, method=method, rmse=rmse, psnr=psnr_from_rmse(rmse),
                            pixels=pixels))
        return out

    def to_frame(self) -> pd.DataFrame:
        columns = list(EvalRow.model_fields)
        df = pd.DataFrame([r.model_dump() for r in self.rows], columns=columns)
        if df.empty:
            return df
        df["_order"] = df["method"].map(_method_order)
        df = df.sort_values(["seed", "frame", "_order"], kind="stable").drop(columns="_order")
        return df.reset_index(drop=True)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "EvalReport":
        return cls(rows=[EvalRow(**rec) for rec in df.to_dict(orient="records")])

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, na_rep="nan")
        logger.info(f"Wrote {len(self.rows)} evaluation rows to {path}")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "EvalReport":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Report not found: {path}")
        df = pd.read_csv(path, keep_default_na=False, na_values=["nan", "NaN"])
        return cls.from_frame(df)

    def table(self) -> str:
        df = self.to_frame()
        if df.empty:
            return "(no rows)"
        return df.to_string(index=False, float_format=lambda v: f"{v:.3f}")

    def consistent(self, tol: float = 1e-9) -> bool:
        """Every successful row satisfies PSNR = 20·log10(255/RMSE) before the cap."""
        for r in self.rows:
            if r.status != "ok":
                continue
            if abs(r.psnr - psnr_from_rmse(r.rmse)) > tol:
                return False
        return True

    def ordering_holds(self, seed: Optional[int] = None) -> bool:
        """RMSE strictly decreases from pca_only through ours_no_specular to ours_specular on the aggregate rows."""
        agg = {r.method: r.rmse for r in self.rows
               if r.frame == -1 and r.status == "ok" and (seed is None or r.seed == seed)}
        if not all(m in agg for m in METHODS):
            return False
        return agg["pca_only"] > agg["ours_no_specular"] > agg["ours_specular"]

    def write_chart(self, path: Union[str, Path]) -> None:
        """Grouped RMSE and PSNR bars per method, as standalone HTML."""
        df = self.to_frame()
        df = df[(df["frame"] == -1) & (df["status"] == "ok")] if not df.empty else df
        fig = make_subplots(rows=1, cols=2, subplot_titles=("RMSE (8-bit)", "PSNR (dB)"))
        for method in METHODS:
            part = df[df["method"] == method] if not df.empty else df
            if part.empty:
                continue
            seeds = [f"seed {s}" for s in part["seed"]]
            fig.add_trace(go.Bar(name=method, x=seeds, y=part["rmse"], legendgroup=method), row=1, col=1)
            fig.add_trace(go.Bar(name=method, x=seeds, y=part["psnr"], legendgroup=method, showlegend=False),
                          row=1, col=2)
        fig.update_layout(barmode="group", title="Held-out view error per method", template="plotly_white")
        fig.write_html(str(path), include_plotlyjs="cdn", full_html=True)
        logger.info(f"Wrote chart to {path}")


def _method_order(method: str) -> int:
    return METHODS.index(method) if method in METHODS else len(METHODS)
