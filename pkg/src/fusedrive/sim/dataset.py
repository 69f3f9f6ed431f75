"""Expert demonstration collection and the offset-indexed dataset format.

Layout of a dataset directory:

``manifest.json``  format tag, config hash, sample count, image shapes, dtype and endianness
``labels.jsonl``   one record per sample with measurements, expert labels and image byte offsets
``images.bin``     float32 little-endian rasters, main then side, concatenated per sample
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import SimConfig, config_hash
from .expert import expert_policy, observe
from .world import SimError, World, step

FORMAT = "fusedrive-dataset"
VERSION = 1
IMAGE_DTYPE = np.dtype("<f4")
LABEL_FIELDS = ("speed", "command", "target", "waypoints", "control", "target_speed", "latent")


class CollectionError(SimError):
    pass


def _noise_allowed(world: World, label) -> bool:
    if label.hazard:
        return False
    s = world.progress
    near = [lt.s for lt in world.route.lights] + [st.s for st in world.route.stop_signs]
    return all(abs(x - s) > 20.0 for x in near)


def drive_expert(route, cfg: SimConfig, rng: np.random.Generator, n_waypoints: int, sample_every: int,
                 noise: bool = True):
    """Yield ``(time, Observation, ExpertLabel)`` along one noisy expert run.

    Steering noise perturbs the executed control only; the labels stay clean.
    Raises ``CollectionError`` if the run ends with anything but a clean finish.
    """
    world = World.create(route, cfg)
    noise_left = 0.0
    noise_val = 0.0
    while not world.done:
        sample = world.steps % sample_every == 0
        label = expert_policy(world, n_waypoints, with_waypoints=sample)
        if sample:
            yield world.clock, observe(world), label
        control = label.control.copy()
        if noise and _noise_allowed(world, label):
            if noise_left <= 0 and rng.random() < cfg.noise_prob:
                noise_left = cfg.noise_duration
                noise_val = float(rng.uniform(-cfg.noise_steer, cfg.noise_steer))
            if noise_left > 0:
                control[1] = min(max(control[1] + noise_val, -1.0), 1.0)
                noise_left -= cfg.dt
        else:
            noise_left = 0.0
        step(world, control)
    if world.reason != "finished" or world.infractions:
        kinds = ",".join(i.kind for i in world.infractions) or "-"
        raise CollectionError(f"expert failed on {route.name}: reason={world.reason} infractions={kinds}")


def collect_dataset(routes: list, out_dir, sample_hz: float | None = None, cfg: SimConfig | None = None,
                    seed: int = 0, n_waypoints: int = 4, cfg_hash: str | None = None, noise: bool = True) -> dict:
    """Drive the expert on every route and write samples at ``sample_hz``; returns the manifest.

    Files are assembled in a scratch directory next to ``out_dir`` and moved
    into place only after every route succeeded.
    """
    cfg = cfg or SimConfig()
    hz = sample_hz if sample_hz is not None else cfg.sample_hz
    sample_every = int(round(1.0 / (hz * cfg.dt)))
    if sample_every < 1 or abs(sample_every * hz * cfg.dt - 1.0) > 1e-9:
        raise ValueError(f"sample_hz {hz} must divide the simulation rate {1 / cfg.dt:g} Hz")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".collect-", dir=out))
    try:  # a failed run leaves out_dir untouched; the scratch dir is always removed
        n = 0
        offset = 0
        with open(scratch / "images.bin", "wb") as img, open(scratch / "labels.jsonl", "w") as lab:
            for k, route in enumerate(routes):
                rng = np.random.default_rng([seed, k])
                for t, obs, label in drive_expert(route, cfg, rng, n_waypoints, sample_every, noise):
                    main = np.ascontiguousarray(obs.main, dtype=IMAGE_DTYPE)
                    side = np.ascontiguousarray(obs.side, dtype=IMAGE_DTYPE)
                    rec = {
                        "index": n, "route": route.name, "t": t,
                        "speed": obs.speed, "command": obs.command, "target": obs.target.tolist(),
                        "waypoints": label.waypoints.tolist(), "control": label.control.tolist(),
                        "target_speed": label.target_speed, "latent": label.latent.tolist(),
                        "main_offset": offset, "side_offset": offset + main.nbytes,
                    }
                    img.write(main.tobytes())
                    img.write(side.tobytes())
                    offset += main.nbytes + side.nbytes
                    lab.write(json.dumps(rec) + "\n")
                    n += 1
        manifest = {
            "format": FORMAT, "version": VERSION, "config_hash": cfg_hash or config_hash(cfg),
            "n_samples": n, "main_shape": [3, 64, 64], "side_shape": [3, 64, 64],
            "dtype": "float32", "endianness": "little", "sample_hz": hz, "seed": seed,
            "n_waypoints": n_waypoints, "routes": [r.name for r in routes],
        }
        (scratch / "manifest.json").write_text(json.dumps(manifest, indent=1))
        for name in ("images.bin", "labels.jsonl", "manifest.json"):
            os.replace(scratch / name, out / name)
        return manifest
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


@dataclass
class Dataset:
    """Read-only view of a collected dataset; images are memory-mapped."""

    path: Path
    manifest: dict
    records: list
    images: np.memmap

    @classmethod
    def open(cls, path) -> "Dataset":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != FORMAT or manifest.get("endianness") != "little":
            raise ValueError(f"{path}: not a little-endian {FORMAT} directory")
        with open(path / "labels.jsonl") as f:
            records = [json.loads(line) for line in f if line.strip()]
        if len(records) != manifest["n_samples"]:
            raise ValueError(f"{path}: manifest lists {manifest['n_samples']} samples, labels has {len(records)}")
        size = (path / "images.bin").stat().st_size
        images = np.memmap(path / "images.bin", dtype=IMAGE_DTYPE, mode="r", shape=(size // 4,))
        return cls(path, manifest, records, images)

    def __len__(self) -> int:
        return len(self.records)

    def _image(self, off: int, shape) -> np.ndarray:
        n = int(np.prod(shape))
        start = off // IMAGE_DTYPE.itemsize
        return np.array(self.images[start:start + n]).reshape(shape)

    def sample(self, i: int) -> dict:
        r = self.records[i]
        out = {k: r[k] for k in LABEL_FIELDS}
        out["main"] = self._image(r["main_offset"], self.manifest["main_shape"])
        out["side"] = self._image(r["side_offset"], self.manifest["side_shape"])
        return out

    def batch(self, indices) -> tuple:
        """``(inputs, labels)`` dicts of stacked arrays for the model and losses."""
        items = [self.sample(int(i)) for i in indices]
        inputs = {
            "main": np.stack([s["main"] for s in items]),
            "side": np.stack([s["side"] for s in items]),
            "speed": np.array([s["speed"] for s in items]),
            "command": np.array([s["command"] for s in items]),
            "target": np.array([s["target"] for s in items]),
        }
        labels = {
            "waypoints": np.array([s["waypoints"] for s in items]),
            "control": np.array([s["control"] for s in items]),
            "target_speed": np.array([s["target_speed"] for s in items]),
            "latent": np.array([s["latent"] for s in items]),
        }
        return inputs, labels


class InMemoryDataset:
    """Stacked arrays with the same ``batch`` interface as :class:`Dataset`."""

    def __init__(self, inputs: dict, labels: dict):
        self.inputs = {k: np.asarray(v) for k, v in inputs.items()}
        self.labels = {k: np.asarray(v) for k, v in labels.items()}

    @classmethod
    def subset(cls, ds, indices) -> "InMemoryDataset":
        return cls(*ds.batch(list(indices)))

    def __len__(self) -> int:
        return len(self.inputs["speed"])

    def batch(self, indices) -> tuple:
        idx = np.asarray(indices, dtype=np.int64)
        return ({k: v[idx] for k, v in self.inputs.items()}, {k: v[idx] for k, v in self.labels.items()})
