"""PNG renderings of exported density grids (headless, byte-stable output)."""

from __future__ import annotations

import io

import numpy as np

from .io import atomic_write_bytes

# Fixed metadata keeps the PNG bytes independent of the matplotlib version string.
_PNG_META = {"Software": None}


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, plt, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_grid(logp, extent, labels, path, title=""):
    """Heat map of a regular (rows, cols) log-density grid; ``extent`` is (x0, x1, y0, y1)."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(np.exp(logp), origin="lower", extent=extent, aspect="auto", cmap="viridis")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="density")
    _save(fig, plt, path)


def plot_mesh(mesh, face_values, path, title=""):
    """Per-face values on a mesh: flat shading for planar meshes, a 3-D view otherwise."""
    plt = _figure()
    vals = np.exp(np.asarray(face_values, dtype=float))
    if mesh.dim == 2:
        fig, ax = plt.subplots(figsize=(5, 5))
        tp = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.faces, facecolors=vals, cmap="viridis")
        ax.set_aspect("equal")
        fig.colorbar(tp, ax=ax, label="density")
    else:
        from matplotlib import cm, colors
        from mpl_toolkits.mplot3d.art3d import Poly3DCollection

        fig = plt.figure(figsize=(6, 5))
        ax = fig.add_subplot(projection="3d")
        norm = colors.Normalize(vals.min(), vals.max())
        poly = Poly3DCollection(mesh.corners, facecolors=cm.viridis(norm(vals)), edgecolors="none")
        ax.add_collection3d(poly)
        lo, hi = mesh.vertices.min(), mesh.vertices.max()
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_zlim(lo, hi)
        fig.colorbar(cm.ScalarMappable(norm=norm, cmap="viridis"), ax=ax, label="density")
    if title:
        ax.set_title(title)
    _save(fig, plt, path)
