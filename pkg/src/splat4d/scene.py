"""Scene container: batched primitive parameters plus a deformation field,
with plain-text (de)serialization for checkpoints.

File format (one section per line group, floats written with repr so they
round-trip exactly):

    splat4d-scene v1
    primitives <K>
    prim <id> px py pz qw qx qy qz sx sy sz alpha cr cg cb <interval|untracked>
    keyframes <T>
    times t0 ... t(T-1)
    track <k> <i> dpx dpy dpz dqw dqx dqy dqz dsx dsy dsz
    tracker <mode> <lambda_v> <switch_iteration>
    state <key> v0 v1 ...
    end
"""

from __future__ import annotations

import math
import os
import tempfile

import torch

from .deformation import DeformationField, DeformationTrack
from .geometry import DTYPE, GaussianPrimitive

FORMAT_HEADER = "splat4d-scene v1"


class GaussianScene:
    """Batched Gaussian primitives with an attached deformation field.

    ``sampling_intervals`` holds per-primitive minimum sampling intervals
    (NaN marks untracked primitives).
    """

    def __init__(self, positions, rotations, scales, opacities, colors,
                 deformation: DeformationField | None = None,
                 sampling_intervals=None, ids=None):
        self.positions = torch.as_tensor(positions, dtype=DTYPE)
        self.rotations = torch.as_tensor(rotations, dtype=DTYPE)
        self.scales = torch.as_tensor(scales, dtype=DTYPE)
        self.opacities = torch.as_tensor(opacities, dtype=DTYPE)
        self.colors = torch.as_tensor(colors, dtype=DTYPE)
        k = self.positions.shape[0]
        for name, tensor, shape in [
            ("positions", self.positions, (k, 3)),
            ("rotations", self.rotations, (k, 4)),
            ("scales", self.scales, (k, 3)),
            ("opacities", self.opacities, (k,)),
            ("colors", self.colors, (k, 3)),
        ]:
            if tuple(tensor.shape) != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if deformation is None:
            deformation = DeformationField.zero(k, torch.zeros(0))
        if deformation.num_primitives != k:
            raise ValueError("deformation field does not match primitive count")
        self.deformation = deformation
        if sampling_intervals is None:
            sampling_intervals = torch.full((k,), math.nan, dtype=DTYPE)
        self.sampling_intervals = torch.as_tensor(sampling_intervals, dtype=DTYPE)
        if tuple(self.sampling_intervals.shape) != (k,):
            raise ValueError("sampling_intervals must have shape (K,)")
        if ids is None:
            ids = torch.arange(k)
        self.ids = torch.as_tensor(ids, dtype=torch.long)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_primitives(cls, primitives, deformation=None) -> "GaussianScene":
        positions = torch.stack([g.position for g in primitives])
        rotations = torch.stack([g.rotation for g in primitives])
        scales = torch.stack([g.scale for g in primitives])
        opacities = torch.tensor([g.opacity for g in primitives], dtype=DTYPE)
        colors = torch.stack([g.color for g in primitives])
        intervals = torch.tensor(
            [math.nan if g.min_sampling_interval is None else g.min_sampling_interval
             for g in primitives],
            dtype=DTYPE,
        )
        ids = torch.tensor([g.id for g in primitives], dtype=torch.long)
        return cls(positions, rotations, scales, opacities, colors,
                   deformation=deformation, sampling_intervals=intervals, ids=ids)

    # -- access -------------------------------------------------------------

    @property
    def num_primitives(self) -> int:
        return self.positions.shape[0]

    def primitive(self, k: int) -> GaussianPrimitive:
        interval = float(self.sampling_intervals[k])
        return GaussianPrimitive(
            id=int(self.ids[k]),
            position=self.positions[k].detach(),
            rotation=self.rotations[k].detach(),
            scale=self.scales[k].detach(),
            opacity=float(self.opacities[k]),
            color=self.colors[k].detach(),
            min_sampling_interval=None if math.isnan(interval) else interval,
        )

    def track(self, k: int) -> DeformationTrack:
        return self.deformation.track(k)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "opacities": self.opacities,
            "colors": self.colors,
            "position_deltas": self.deformation.position_deltas,
            "rotation_deltas": self.deformation.rotation_deltas,
            "scale_deltas": self.deformation.scale_deltas,
        }

    def requires_grad_(self, flag: bool = True) -> "GaussianScene":
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def clone(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.detach().clone(),
            self.rotations.detach().clone(),
            self.scales.detach().clone(),
            self.opacities.detach().clone(),
            self.colors.detach().clone(),
            deformation=self.deformation.clone(),
            sampling_intervals=self.sampling_intervals.clone(),
            ids=self.ids.clone(),
        )


# ---------------------------------------------------------------------------
# serialization

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_scene(path: str, scene: GaussianScene, tracker=None,
               extra_state: dict[str, torch.Tensor] | None = None) -> None:
    lines = [FORMAT_HEADER, f"primitives {scene.num_primitives}"]
    for k in range(scene.num_primitives):
        interval = float(scene.sampling_intervals[k])
        tail = "untracked" if math.isnan(interval) else repr(interval)
        row = torch.cat([
            scene.positions[k], scene.rotations[k], scene.scales[k],
            scene.opacities[k].reshape(1), scene.colors[k],
        ]).detach()
        lines.append(f"prim {int(scene.ids[k])} {_fmt(row)} {tail}")
    field = scene.deformation
    lines.append(f"keyframes {field.num_keyframes}")
    if field.num_keyframes:
        lines.append(f"times {_fmt(field.times)}")
        for k in range(field.num_primitives):
            for i in range(field.num_keyframes):
                row = torch.cat([
                    field.position_deltas[k, i],
                    field.rotation_deltas[k, i],
                    field.scale_deltas[k, i],
                ]).detach()
                lines.append(f"track {k} {i} {_fmt(row)}")
    if tracker is not None:
        lines.append(f"tracker {tracker.mode} {tracker.lambda_v!r} {tracker.switch_iteration}")
    for key, tensor in (extra_state or {}).items():
        flat = torch.as_tensor(tensor, dtype=DTYPE).reshape(-1)
        lines.append(f"state {key} {_fmt(flat)}")
    lines.append("end")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_scene(path: str):
    """Load a scene file. Returns (scene, tracker_or_None, extra_state)."""
    from .frequency import FrequencyTracker

    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(f"{path}: not a {FORMAT_HEADER} file")
    it = iter(lines[1:])

    def expect(prefix: str) -> list[str]:
        token = next(it)
        if not token.startswith(prefix):
            raise ValueError(f"{path}: expected '{prefix}', got '{token}'")
        return token.split()

    k = int(expect("primitives")[1])
    ids, rows, intervals = [], [], []
    for _ in range(k):
        parts = expect("prim")
        ids.append(int(parts[1]))
        rows.append([float(v) for v in parts[2:16]])
        tail = parts[16]
        intervals.append(math.nan if tail == "untracked" else float(tail))
    rows_t = torch.tensor(rows, dtype=DTYPE).reshape(k, 14)
    num_keyframes = int(expect("keyframes")[1])
    if num_keyframes:
        times = torch.tensor([float(v) for v in expect("times")[1:]], dtype=DTYPE)
        dp = torch.zeros(k, num_keyframes, 3, dtype=DTYPE)
        dq = torch.zeros(k, num_keyframes, 4, dtype=DTYPE)
        ds = torch.zeros(k, num_keyframes, 3, dtype=DTYPE)
        for _ in range(k * num_keyframes):
            parts = expect("track")
            kk, i = int(parts[1]), int(parts[2])
            vals = [float(v) for v in parts[3:13]]
            dp[kk, i] = torch.tensor(vals[0:3], dtype=DTYPE)
            dq[kk, i] = torch.tensor(vals[3:7], dtype=DTYPE)
            ds[kk, i] = torch.tensor(vals[7:10], dtype=DTYPE)
        field = DeformationField(times, dp, dq, ds)
    else:
        field = DeformationField.zero(k, torch.zeros(0))

    tracker = None
    extra: dict[str, torch.Tensor] = {}
    for token in it:
        parts = token.split()
        if parts[0] == "tracker":
            tracker = FrequencyTracker(
                intervals=torch.tensor(intervals, dtype=DTYPE),
                mode=parts[1],
                lambda_v=float(parts[2]),
                switch_iteration=int(parts[3]),
            )
        elif parts[0] == "state":
            extra[parts[1]] = torch.tensor([float(v) for v in parts[2:]], dtype=DTYPE)
        elif parts[0] == "end":
            break
        else:
            raise ValueError(f"{path}: unexpected line '{token}'")

    scene = GaussianScene(
        positions=rows_t[:, 0:3],
        rotations=rows_t[:, 3:7],
        scales=rows_t[:, 7:10],
        opacities=rows_t[:, 10],
        colors=rows_t[:, 11:14],
        deformation=field,
        sampling_intervals=torch.tensor(intervals, dtype=DTYPE),
        ids=torch.tensor(ids, dtype=torch.long),
    )
    return scene, tracker, extra
