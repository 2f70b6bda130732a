"""CSV ingestion, model persistence, and analysis exports.

Matrix CSV format: comma-separated reals, optional header row, empty field =
missing cell.  Side-information CSVs must not include the intercept column;
it is prepended on load.  A fitted model is persisted as one CSV per
parameter family plus a versioned manifest ("xfile-model/1"), so it stays
inspectable and diff-able.
"""

import csv
import json
import warnings
from pathlib import Path

import numpy as np

from .model import (
    FactorContribution,
    FitResult,
    ObservedMatrix,
    SideInfo,
    Transform,
    loading_matrix,
    materialize,
    similarity_matrix,
)

__all__ = [
    "MatrixParseError",
    "load_matrix",
    "save_matrix",
    "load_side_info",
    "save_model",
    "load_model",
    "write_fit_outputs",
    "export_analysis",
    "write_pgm",
]

MODEL_FORMAT = "xfile-model/1"
FLOAT_FMT = "%.17g"


class MatrixParseError(ValueError):
    """CSV cell could not be parsed; carries 1-based row/column location."""


def _parse_rows(path, has_header: bool):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if has_header and rows:
        rows = rows[1:]
    if not rows:
        raise MatrixParseError(f"{path}: no data rows")
    width = len(rows[0])
    offset = 2 if has_header else 1
    values = np.empty((len(rows), width))
    mask = np.ones((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MatrixParseError(
                f"{path}: row {i + offset} has {len(row)} fields, expected {width}"
            )
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                values[i, j] = np.nan
                mask[i, j] = False
                continue
            try:
                values[i, j] = float(cell)
            except ValueError as exc:
                raise MatrixParseError(
                    f"{path}: row {i + offset}, column {j + 1}: not a number: {cell!r}"
                ) from exc
    return values, mask


def load_matrix(path, has_header: bool = False,
                transform: Transform = Transform.IDENTITY) -> ObservedMatrix:
    """Reads a data matrix; empty fields become unobserved cells."""
    values, mask = _parse_rows(path, has_header)
    return ObservedMatrix(values=values, mask=mask, transform=transform)


def save_matrix(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Writes a matrix CSV; masked-out cells are written as empty fields."""
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for i in range(values.shape[0]):
            row = []
            for j in range(values.shape[1]):
                if mask is not None and not mask[i, j]:
                    row.append("")
                else:
                    row.append(FLOAT_FMT % values[i, j])
            writer.writerow(row)


def load_side_info(x_path, w_path, n: int, p: int, has_header: bool = False) -> SideInfo:
    """Loads covariate/metacovariate CSVs and prepends the intercept columns.

    Missing paths yield intercept-only matrices.  Missing cells are not
    allowed in side information.
    """

    def _load(path, rows, name):
        if path is None:
            return np.ones((rows, 1))
        values, mask = _parse_rows(path, has_header)
        if not mask.all():
            i, j = np.argwhere(~mask)[0]
            raise MatrixParseError(f"{path}: missing {name} value at row {i + 1}, column {j + 1}")
        if values.shape[0] != rows:
            raise MatrixParseError(f"{path}: expected {rows} rows, found {values.shape[0]}")
        return np.column_stack([np.ones(rows), values])

    return SideInfo(x=_load(x_path, n, "covariate"), w=_load(w_path, p, "metacovariate"))


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

def _write_array(path, arr: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt=FLOAT_FMT)


def save_model(out_dir, result: FitResult, side: SideInfo, transform: Transform,
               eps_frelu: float) -> None:
    """One CSV per parameter family plus manifest.json (format xfile-model/1)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = result.rank
    manifest = {
        "format": MODEL_FORMAT,
        "rank": k,
        "n": int(side.x.shape[0]),
        "p": int(side.w.shape[0]),
        "q_x": int(side.q_x),
        "q_w": int(side.q_w),
        "transform": transform.value,
        "eps_frelu": eps_frelu,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    cs = result.contributions
    _write_array(out / "u_tilde.csv", np.column_stack([c.u_tilde for c in cs]) if k else np.empty((side.x.shape[0], 0)))
    _write_array(out / "psi_tilde.csv", np.column_stack([c.psi_tilde for c in cs]) if k else np.empty((side.x.shape[0], 0)))
    _write_array(out / "beta.csv", np.column_stack([c.beta for c in cs]) if k else np.empty((side.q_x, 0)))
    _write_array(out / "v_tilde.csv", np.column_stack([c.v_tilde for c in cs]) if k else np.empty((side.w.shape[0], 0)))
    _write_array(out / "phi_tilde.csv", np.column_stack([c.phi_tilde for c in cs]) if k else np.empty((side.w.shape[0], 0)))
    _write_array(out / "gamma.csv", np.column_stack([c.gamma for c in cs]) if k else np.empty((side.q_w, 0)))
    _write_array(out / "theta.csv", np.array([[c.eta, c.rho] for c in cs]) if k else np.empty((0, 2)))
    _write_array(out / "x.csv", side.x)
    _write_array(out / "w.csv", side.w)
    _write_array(out / "latent_residual.csv", result.latent_residual)


def load_model(model_dir) -> tuple[FitResult, SideInfo, Transform, float]:
    """Inverse of :func:`save_model`."""
    model = Path(model_dir)
    manifest = json.loads((model / "manifest.json").read_text())
    if manifest.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {manifest.get('format')!r}")
    k = int(manifest["rank"])

    def _read(name, rows):
        path = model / name
        if k == 0:
            return np.empty((rows, 0))
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        return arr

    x = np.loadtxt(model / "x.csv", delimiter=",", ndmin=2)
    w = np.loadtxt(model / "w.csv", delimiter=",", ndmin=2)
    side = SideInfo(x=x, w=w)
    u = _read("u_tilde.csv", x.shape[0])
    psi = _read("psi_tilde.csv", x.shape[0])
    beta = _read("beta.csv", side.q_x)
    v = _read("v_tilde.csv", w.shape[0])
    phi = _read("phi_tilde.csv", w.shape[0])
    gamma = _read("gamma.csv", side.q_w)
    theta = np.loadtxt(model / "theta.csv", delimiter=",", ndmin=2) if k else np.empty((0, 2))
    contributions = tuple(
        FactorContribution(
            u_tilde=u[:, h], psi_tilde=psi[:, h], beta=beta[:, h],
            v_tilde=v[:, h], phi_tilde=phi[:, h], gamma=gamma[:, h],
            eta=float(theta[h, 0]), rho=int(theta[h, 1]),
        )
        for h in range(k)
    )
    residual = np.loadtxt(model / "latent_residual.csv", delimiter=",", ndmin=2)
    result = FitResult(
        contributions=contributions,
        logpost_trace=np.empty(0),
        trace_factors=np.empty(0, dtype=int),
        latent_residual=residual,
    )
    return result, side, Transform(manifest["transform"]), float(manifest["eps_frelu"])


def write_fit_outputs(out_dir, result: FitResult, side: SideInfo, transform: Transform,
                      eps_frelu: float) -> None:
    """Flat fit artifacts: contributions.csv, rank.txt, logpost_trace.csv,
    fitted values (latent and, for truncated data, observation-scale)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rank.txt").write_text(f"{result.rank}\n")

    with open(out / "contributions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        n = side.x.shape[0]
        p = side.w.shape[0]
        header = (
            ["eta", "rho"]
            + [f"u_tilde_{i}" for i in range(n)]
            + [f"psi_tilde_{i}" for i in range(n)]
            + [f"beta_{d}" for d in range(side.q_x)]
            + [f"v_tilde_{j}" for j in range(p)]
            + [f"phi_tilde_{j}" for j in range(p)]
            + [f"gamma_{d}" for d in range(side.q_w)]
        )
        writer.writerow(header)
        for c in result.contributions:
            row = [FLOAT_FMT % c.eta, c.rho]
            for arr in (c.u_tilde, c.psi_tilde, c.beta, c.v_tilde, c.phi_tilde, c.gamma):
                row.extend(FLOAT_FMT % x for x in arr)
            writer.writerow(row)

    with open(out / "logpost_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["factor", "inner_iteration", "logpost"])
        counts: dict[int, int] = {}
        for fid, val in zip(result.trace_factors, result.logpost_trace):
            t = counts.get(int(fid), 0)
            counts[int(fid)] = t + 1
            writer.writerow([int(fid), t, FLOAT_FMT % val])

    latent_fit = materialize(result.contributions, side, eps_frelu)
    if transform == Transform.NONNEG_TRUNCATION:
        save_matrix(out / "fitted_latent.csv", latent_fit)
        save_matrix(out / "fitted_observed.csv", np.maximum(latent_fit, 0.0))
    else:
        save_matrix(out / "fitted.csv", latent_fit)


# ---------------------------------------------------------------------------
# Analysis exports
# ---------------------------------------------------------------------------

def write_pgm(path, values: np.ndarray) -> dict:
    """Binary (P5) grayscale image, linearly rescaled to 0..255.

    Returns the scaling metadata written to the sidecar JSON.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(values.shape, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return {"min": lo, "max": hi, "rows": values.shape[0], "cols": values.shape[1]}


def export_analysis(
    result: FitResult,
    side: SideInfo,
    out_dir,
    eps_frelu: float = 0.0,
    grid_rows: int | None = None,
    grid_cols: int | None = None,
    squared_scale: bool = False,
) -> None:
    """Interpretation exports of a fitted model.

    Writes archetypes.csv (columns phi_h * v_h), loading_signs.csv (signs of
    the effective row loadings, entries in {-1, 0, 1}), similarity.csv (the
    Gaussian-kernel row-similarity matrix) and, when a grid shape is given,
    one archetype_<h>.pgm map per factor with a JSON sidecar recording the
    rescaling.  A rank-0 model produces empty-schema files and a warning.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = result.rank
    if k == 0:
        warnings.warn("rank-0 model: writing empty analysis files", RuntimeWarning)
        (out / "archetypes.csv").write_text("")
        (out / "loading_signs.csv").write_text("")
        (out / "similarity.csv").write_text("")
        return
    archetypes = np.column_stack([c.phi_tilde * c.v_tilde for c in result.contributions])
    _write_array(out / "archetypes.csv", archetypes)
    signs = np.sign(loading_matrix(result, side, eps_frelu))
    _write_array(out / "loading_signs.csv", signs)
    _write_array(out / "similarity.csv",
                 similarity_matrix(result, side, eps_frelu, squared_scale))
    if grid_rows is None and grid_cols is None:
        warnings.warn("no grid shape given: skipping PGM archetype maps", RuntimeWarning)
        return
    p = archetypes.shape[0]
    if grid_rows is None or grid_cols is None or grid_rows * grid_cols != p:
        raise ValueError(
            f"grid {grid_rows}x{grid_cols} does not tile {p} column cells"
        )
    for h in range(k):
        image = archetypes[:, h].reshape(grid_rows, grid_cols)
        meta = write_pgm(out / f"archetype_{h + 1}.pgm", image)
        (out / f"archetype_{h + 1}.json").write_text(json.dumps(meta, indent=2))
