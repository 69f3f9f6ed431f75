"""Built-in 2D driving simulator: routes, physics, rasters, expert, data collection, evaluation."""

from __future__ import annotations

from importlib import resources

from .routes import Route, generate_route, load_routes, save_routes

SHIPPED = ("train", "heldout")
TRAIN_SEEDS = range(0, 50)
HELDOUT_SEEDS = range(1000, 1005)


def shipped_routes(name: str) -> list:
    """Route sets bundled with the package: ``train`` (50 routes with hazards) and ``heldout`` (5 hazard-free)."""
    if name not in SHIPPED:
        raise ValueError(f"unknown route set {name!r}; choose from {SHIPPED}")
    with resources.as_file(resources.files("fusedrive.routes") / f"{name}.json") as path:
        return load_routes(path)


def build_shipped_routes() -> dict:
    """Regenerate the bundled route sets from their seeds."""
    return {
        "train": [generate_route(s, name=f"train_{s:02d}") for s in TRAIN_SEEDS],
        "heldout": [generate_route(s, name=f"heldout_{s - 1000}", hazards=False) for s in HELDOUT_SEEDS],
    }


__all__ = ["Route", "generate_route", "load_routes", "save_routes", "shipped_routes", "build_shipped_routes"]
