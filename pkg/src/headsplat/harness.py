"""Dataset layout, synthetic subjects, few-to-many evaluation, FPS benchmark.

A subject dataset is a directory of PNG frames with JSON sidecars (driving
parameters + camera id) and a manifest:

  {"version": 1, "template_crc": ..., "cameras": [{"id", "focal", "principal",
   "size"}], "frames": [{"image", "params"?, "camera_id"}]}
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .animation import pose_avatar
from .avatar import CanonicalAvatar, init_avatar, upsample_anchors
from .losses import LossWeights, few_to_many_split, psnr, ssim
from .optim import FitReport, fit_flame
from .rasterizer import Camera, DEFAULT_CONFIG, RenderConfig, head_camera, render
from .template import FlameParams, HeadTemplate


@dataclass
class FrameRecord:
    image: str
    params: FlameParams | None
    camera_id: str


@dataclass
class SubjectDataset:
    root: Path
    template_crc: int
    cameras: dict[str, Camera]
    frames: list[FrameRecord]

    def __len__(self) -> int:
        return len(self.frames)

    def load_image(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        return fileio.load_png(self.root / self.frames[index].image)

    def camera_for(self, index: int) -> Camera:
        return self.cameras[self.frames[index].camera_id]


def _params_to_json(p: FlameParams) -> dict:
    return {
        "expression": [float(v) for v in p.expression],
        "articulation": [[float(v) for v in row] for row in np.atleast_2d(p.articulation)],
        "head_rotation": [float(v) for v in p.head_rotation],
        "head_translation": [float(v) for v in p.head_translation],
    }


def params_from_json(d: dict) -> FlameParams:
    return FlameParams(
        expression=np.asarray(d["expression"], dtype=float),
        articulation=np.asarray(d["articulation"], dtype=float).reshape(-1, 3),
        head_rotation=np.asarray(d["head_rotation"], dtype=float),
        head_translation=np.asarray(d["head_translation"], dtype=float),
    )


def _camera_to_json(cam_id: str, cam: Camera) -> dict:
    return {
        "id": cam_id,
        "focal": [cam.fx, cam.fy],
        "principal": [cam.cx, cam.cy],
        "size": [cam.width, cam.height],
    }


def _camera_from_json(d: dict) -> Camera:
    return Camera(
        fx=d["focal"][0],
        fy=d["focal"][1],
        cx=d["principal"][0],
        cy=d["principal"][1],
        width=int(d["size"][0]),
        height=int(d["size"][1]),
    )


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def smooth_trajectory(template: HeadTemplate, n_frames: int, seed: int) -> list[FlameParams]:
    """Deterministic band-limited random motion: sinusoids with seeded
    amplitudes/phases per coefficient, head placed near (0, 0, -1)."""
    rng = np.random.default_rng(seed)
    K = template.num_expression
    J = template.num_bones - 1

    def sinus(n_coeff, amp):
        a = rng.uniform(0.3, 1.0, n_coeff) * amp
        f = rng.uniform(0.5, 2.0, n_coeff)
        ph = rng.uniform(0, 2 * np.pi, n_coeff)
        t = np.linspace(0.0, 1.0, n_frames)[:, None]
        return a * np.sin(2 * np.pi * f * t + ph)

    expr = sinus(K, 0.25)
    artic = sinus(3 * J, 0.12).reshape(n_frames, J, 3)
    rot = sinus(3, 0.18)
    trans = sinus(3, 0.02) + np.array([0.0, 0.0, -1.0])
    return [
        FlameParams(
            expression=expr[i],
            articulation=artic[i],
            head_rotation=rot[i],
            head_translation=trans[i],
        )
        for i in range(n_frames)
    ]


def randomized_avatar(
    template: HeadTemplate, target_m: int, seed: int
) -> CanonicalAvatar:
    """Plausible colored subject: smooth color field, small offsets, firm opacity."""
    anchors = upsample_anchors(template, target_m, seed)
    base = init_avatar(anchors, template)
    rng = np.random.default_rng(seed + 1)
    pos = base.anchors / np.linalg.norm(base.anchors, axis=1, keepdims=True).clip(1e-9)
    centers = rng.normal(size=(5, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    tones = rng.uniform(0.15, 0.85, size=(5, 3))
    d2 = ((pos[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    wgt = np.exp(-d2 / 0.8)
    wgt /= wgt.sum(axis=1, keepdims=True)
    colors = wgt @ tones + rng.normal(size=(base.count, 3)) * 0.02
    return dataclasses.replace(
        base,
        colors=np.clip(colors, 0.02, 0.98),
        offsets=rng.normal(size=(base.count, 3)) * 5e-4,
        opacity_logits=np.full(base.count, 2.5),
    )


def make_synthetic_subject(
    template: HeadTemplate,
    avatar_seed: int,
    n_frames: int,
    cam: Camera,
    out_dir: str | Path,
    target_m: int | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
    write_ground_truth_params: bool = True,
) -> SubjectDataset:
    """Render a random plausible subject into a dataset directory and return it.

    Deterministic per seed; images are 8-bit RGBA PNGs, sidecars carry the
    exact driving parameters.  The ground-truth avatar is saved alongside as
    subject.gha for ceiling checks.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target_m = target_m if target_m is not None else 4 * template.num_vertices
    avatar = randomized_avatar(template, target_m, avatar_seed)
    fileio.write_avatar(avatar, out / "subject.gha")
    traj = smooth_trajectory(template, n_frames, avatar_seed + 17)

    frames = []
    for i, params in enumerate(traj):
        name = f"frame_{i:04d}.png"
        frame = render(pose_avatar(avatar, template, params), cam, config)
        fileio.save_png(frame.rgb, frame.alpha, out / name)
        record = {"camera_id": "cam0"}
        if write_ground_truth_params:
            record["params"] = _params_to_json(params)
        _dump_json(record, out / f"frame_{i:04d}.json")
        frames.append({"image": name, "camera_id": "cam0", **(
            {"params": f"frame_{i:04d}.json"} if write_ground_truth_params else {})})

    manifest = {
        "version": 1,
        "template_crc": template.checksum(),
        "cameras": [_camera_to_json("cam0", cam)],
        "frames": frames,
    }
    _dump_json(manifest, out / "manifest.json")
    return load_dataset(out)


def load_dataset(root: str | Path) -> SubjectDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cameras = {c["id"]: _camera_from_json(c) for c in manifest["cameras"]}
    frames = []
    for rec in manifest["frames"]:
        img = root / rec["image"]
        if not img.exists():
            raise FileNotFoundError(f"manifest references missing image {img}")
        if rec["camera_id"] not in cameras:
            raise ValueError(f"frame {rec['image']} references unknown camera {rec['camera_id']}")
        params = None
        if "params" in rec:
            sidecar = json.loads((root / rec["params"]).read_text())
            params = params_from_json(sidecar["params"])
        frames.append(FrameRecord(image=rec["image"], params=params, camera_id=rec["camera_id"]))
    return SubjectDataset(
        root=root,
        template_crc=int(manifest["template_crc"]),
        cameras=cameras,
        frames=frames,
    )


def _fmt(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.6f}"


@dataclass
class EvalReport:
    frame_indices: list[int]
    psnr_values: list[float]
    ssim_values: list[float]
    conditioning: list[int]
    fit_reports: list[FitReport | None]

    @property
    def mean_psnr(self) -> float:
        finite = [v for v in self.psnr_values if v != float("inf")]
        return float(np.mean(finite)) if finite else float("inf")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def to_dict(self) -> dict:
        return {
            "frames": self.frame_indices,
            "psnr": [_fmt(v) for v in self.psnr_values],
            "ssim": [f"{v:.6f}" for v in self.ssim_values],
            "conditioning": self.conditioning,
            "mean_psnr": _fmt(self.mean_psnr),
            "mean_ssim": f"{self.mean_ssim:.6f}",
        }

    def to_csv(self) -> str:
        lines = ["frame,psnr,ssim"]
        for i, p, s in zip(self.frame_indices, self.psnr_values, self.ssim_values):
            lines.append(f"{i},{_fmt(p)},{s:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(
    dataset: SubjectDataset,
    avatar: CanonicalAvatar,
    template: HeadTemplate,
    S: int,
    seed: int,
    out_dir: str | Path | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
    fit_steps: int = 300,
    fit_lr: float = 0.008,
    weights: LossWeights = LossWeights(),
) -> EvalReport:
    """Few-to-many evaluation: split off S conditioning frames, score renders
    against every remaining frame (PSNR/SSIM).  Ground-truth sidecar params
    are used when present; otherwise parameters are fitted photometrically.

    Writes report.json / report.csv (+ figures) when out_dir is given.
    """
    n = len(dataset)
    if n < S + 1:
        raise ValueError("dataset too small for the requested conditioning size")
    conditioning, reconstruction = few_to_many_split(n, S, n - S, seed)
    psnrs, ssims, fits = [], [], []
    for idx in reconstruction:
        rec = dataset.frames[idx]
        cam = dataset.camera_for(idx)
        target_rgb, _ = dataset.load_image(idx)
        if rec.params is not None:
            params, fit = rec.params, None
        else:
            params, fit = fit_flame(
                avatar, template, target_rgb, cam, FlameParams.viewing(template),
                steps=fit_steps, lr=fit_lr, weights=weights, config=config,
            )
        frame = render(pose_avatar(avatar, template, params), cam, config)
        psnrs.append(psnr(frame.rgb, target_rgb))
        ssims.append(ssim(frame.rgb, target_rgb)[0])
        fits.append(fit)
    report = EvalReport(
        frame_indices=[int(i) for i in reconstruction],
        psnr_values=psnrs,
        ssim_values=ssims,
        conditioning=[int(i) for i in conditioning],
        fit_reports=fits,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(report.to_dict(), out / "report.json")
        (out / "report.csv").write_text(report.to_csv())
        from . import plots

        plots.metric_bars(report, out / "metrics.png")
    return report


@dataclass
class BenchReport:
    resolution: tuple[int, int]
    gaussians: int
    pose_times: list[float]
    render_times: list[float]

    def summary(self) -> dict:
        pose = np.asarray(self.pose_times)
        rend = np.asarray(self.render_times)
        total = pose + rend
        return {
            "resolution": list(self.resolution),
            "gaussians": self.gaussians,
            "frames": len(self.pose_times),
            "pose_ms_mean": float(pose.mean() * 1e3),
            "render_ms_mean": float(rend.mean() * 1e3),
            "fps_mean": float(1.0 / total.mean()),
            "fps_median": float(1.0 / np.median(total)),
            "pose_per_sec": float(1.0 / pose.mean()),
            "render_per_sec": float(1.0 / rend.mean()),
        }


def bench_animate(
    avatar: CanonicalAvatar,
    template: HeadTemplate,
    cam: Camera,
    n_frames: int = 20,
    seed: int = 0,
    config: RenderConfig = DEFAULT_CONFIG,
    out_dir: str | Path | None = None,
) -> BenchReport:
    """Time pose_avatar and render separately over random driving parameters.

    Purely informational; per-frame timings are wall-clock on this machine.
    One untimed warm-up frame builds interpolation caches and JIT state.
    """
    traj = smooth_trajectory(template, n_frames, seed)
    render(pose_avatar(avatar, template, traj[0]), cam, config)
    pose_times, render_times = [], []
    for params in traj:
        t0 = time.perf_counter()
        posed = pose_avatar(avatar, template, params)
        t1 = time.perf_counter()
        render(posed, cam, config)
        t2 = time.perf_counter()
        pose_times.append(t1 - t0)
        render_times.append(t2 - t1)
    report = BenchReport(
        resolution=(cam.width, cam.height),
        gaussians=avatar.count,
        pose_times=pose_times,
        render_times=render_times,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(report.summary(), out / "bench.json")
        from . import plots

        plots.bench_breakdown(report, out / "bench.png")
    return report


def default_dataset_camera(width: int = 128, height: int = 128) -> Camera:
    return head_camera(width, height)
