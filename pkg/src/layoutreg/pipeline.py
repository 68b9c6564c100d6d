"""Configuration and the end-to-end reconstruction pipeline."""

from __future__ import annotations

import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError
from .globalreg import JointResult, RegistrationConfig, format_trace, joint_optimize
from .icp import IcpParams, icp_point_to_plane
from .io import Dataset, load_dataset, write_cloud, write_layout, write_trajectory
from .layout import LayoutParams
from .metrics import (
    align_trajectory,
    envelope_planarity,
    envelope_points,
    reconstruction_error,
    trajectory_error,
)
from .planes import EnergyParams, PlaneExtractionParams
from .posegraph import (
    LoopDetectionParams,
    PoseGraph,
    PoseGraphParams,
    detect_loop_closures,
    optimize_pose_graph,
    prune_loops,
    write_edge_diagnostics,
)
from .synth import SyntheticRoomSpec, synthesize_room

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

# keys given in degrees in config files
_ANGLE_KEYS = {"max_normal_angle", "seed_normal_angle", "normal_angle"}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: Path | None = None
    synth: SyntheticRoomSpec | None = None
    out: Path = Path("out")
    seed: int | None = None
    icp: IcpParams = field(default_factory=IcpParams)
    refine_odometry: bool = True
    loops: LoopDetectionParams = field(default_factory=LoopDetectionParams)
    pose_graph: PoseGraphParams = field(default_factory=PoseGraphParams)
    planes: PlaneExtractionParams = field(default_factory=PlaneExtractionParams)
    layout: LayoutParams = field(default_factory=LayoutParams)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    alignment: str = "anchor"
    figures: bool = True
    binary_cloud: bool = True

    def with_overrides(self, seed=None, out=None, no_layout=False) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out is not None:
            cfg = dataclasses.replace(cfg, out=Path(out))
        if no_layout:
            cfg = dataclasses.replace(cfg, registration=dataclasses.replace(cfg.registration, use_layout=False))
        return cfg

    def room_spec(self) -> SyntheticRoomSpec:
        if self.synth is None:
            raise ConfigError("config has no [synth] table")
        if self.seed is not None:
            return dataclasses.replace(self.synth, seed=self.seed)
        return self.synth


def _build(cls, table, where, angles=True):
    if table is None:
        return cls()
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kw = {}
    for k, v in table.items():
        kw[k] = float(np.deg2rad(v)) if angles and k in _ANGLE_KEYS else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(d: dict, base_dir=Path(".")) -> PipelineConfig:
    """Build a :class:`PipelineConfig` from a parsed TOML tree.

    Relative paths resolve against ``base_dir``. Angles are in degrees.
    """
    d = dict(d)
    known = {"dataset", "synth", "output", "seed", "icp", "odometry", "loops", "pose_graph", "planes",
             "layout", "registration", "eval"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {}
    ds = d.get("dataset")
    if ds is not None:
        path = ds.get("path") if isinstance(ds, dict) else ds
        if not isinstance(path, str):
            raise ConfigError("dataset.path must be a string")
        kw["dataset"] = base_dir / path
    if "synth" in d:
        try:
            kw["synth"] = SyntheticRoomSpec.from_dict(d["synth"])
        except TypeError as exc:
            raise ConfigError(f"[synth]: {exc}") from None
    out = d.get("output", {})
    if "dir" in out:
        kw["out"] = base_dir / out["dir"]
    for key in ("figures", "binary_cloud"):
        if key in out:
            kw[key] = bool(out[key])
    if "seed" in d:
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = d["seed"]
    kw["icp"] = _build(IcpParams, d.get("icp"), "icp")
    odo = d.get("odometry", {})
    kw["refine_odometry"] = bool(odo.get("refine", True))
    loops = dict(d.get("loops", {}))
    loop_icp = loops.pop("icp", None)
    lp = _build(LoopDetectionParams, loops, "loops")
    kw["loops"] = dataclasses.replace(lp, icp=_build(IcpParams, loop_icp, "loops.icp")) if loop_icp else lp
    kw["pose_graph"] = _build(PoseGraphParams, d.get("pose_graph"), "pose_graph")
    planes = dict(d.get("planes", {}))
    energy = planes.pop("energy", None)
    pp = _build(PlaneExtractionParams, planes, "planes")
    kw["planes"] = dataclasses.replace(pp, energy=_build(EnergyParams, energy, "planes.energy")) if energy else pp
    kw["layout"] = _build(LayoutParams, d.get("layout"), "layout")
    kw["registration"] = _build(RegistrationConfig, d.get("registration"), "registration")
    ev = d.get("eval", {})
    if "alignment" in ev:
        if ev["alignment"] not in ("anchor", "se3"):
            raise ConfigError("eval.alignment must be 'anchor' or 'se3'")
        kw["alignment"] = ev["alignment"]
    if kw["pose_graph"].line_process not in ("smooth", "hard"):
        raise ConfigError("pose_graph.line_process must be 'smooth' or 'hard'")
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    """Read a TOML config file.

    Raises:
        IoError: the file cannot be read.
        ConfigError: the contents are invalid.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        tree = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(tree, path.parent)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PipelineResult:
    initial_poses: tuple  # chained (refined) odometry
    pose_graph: PoseGraph  # after optimisation and pruning
    joint: JointResult
    metrics: dict
    artifacts: dict
    pose_graph_objective: tuple = ()  # objective history per pose-graph solve


def refine_odometry(fragments, odometry, params: IcpParams):
    """ICP each consecutive pair starting from its odometry estimate."""
    out = []
    for k, T in enumerate(odometry):
        res = icp_point_to_plane(fragments[k + 1], fragments[k], T, params)
        out.append(res.transform)
    return out


def chain(odometry):
    from .geometry import RigidTransform

    poses = [RigidTransform.identity()]
    for T in odometry:
        poses.append(poses[-1] @ T)
    return poses


def initial_registration(dataset: Dataset, config: PipelineConfig):
    """Odometry refinement, loop detection and line-process pose graph.

    Returns ``(odometry, graph, histories)`` where ``graph`` holds the pruned
    loops and optimised poses and ``histories`` the objective values of each
    pose-graph solve.
    """
    frags = dataset.fragments
    odo = refine_odometry(frags, dataset.odometry, config.icp) if config.refine_odometry else list(dataset.odometry)
    poses = chain(odo)
    loops = detect_loop_closures(frags, poses, config.loops)
    logger.info("%d loop candidates", len(loops))
    graph = PoseGraph.from_odometry(odo, loops, poses)
    graph, tr = optimize_pose_graph(graph, config.pose_graph, return_trace=True)
    histories = [tr.objective]
    graph = prune_loops(graph, config.pose_graph.prune_threshold)
    if graph.loop_edges:
        graph, tr = optimize_pose_graph(graph, config.pose_graph, return_trace=True)
        histories.append(tr.objective)
    return odo, graph, tuple(histories)


def pair_transforms(graph: PoseGraph) -> dict:
    out = {}
    for e in graph.odometry_edges + graph.loop_edges:
        out[(e.i, e.j)] = e.transform
    return out


def compute_metrics(dataset: Dataset, poses, initial_poses=None, alignment="anchor") -> dict:
    """Metrics against ground truth; empty when the dataset has none."""
    gt = dataset.ground_truth
    if gt is None:
        return {}
    m = {}
    aligned = align_trajectory(poses, gt.poses, alignment)
    te = trajectory_error(poses, gt.poses, alignment)
    te0 = trajectory_error(dataset.chained_odometry(), gt.poses, alignment)
    m["trajectory_rmse"] = te.rmse
    m["trajectory_median"] = te.median
    m["odometry_rmse"] = te0.rmse
    m["odometry_median"] = te0.median
    if initial_poses is not None:
        m["refined_odometry_rmse"] = trajectory_error(initial_poses, gt.poses, alignment).rmse
    if gt.cloud is not None and len(gt.cloud):
        cloud = np.vstack([T.apply(f.points) for f, T in zip(dataset.fragments, aligned)])
        re = reconstruction_error(cloud, gt.cloud)
        m["reconstruction_average"] = re.average
        m["reconstruction_median"] = re.median
    if gt.envelope and all(f.surface_ids is not None for f in dataset.fragments):
        planes = [p for _, p in gt.envelope]
        m["envelope_planarity"] = envelope_planarity(envelope_points(dataset.fragments, aligned), planes)
    return m


def write_metrics(metrics: dict, path):
    """Tab-separated ``metric<TAB>value`` lines in insertion order."""
    lines = ["metric\tvalue"] + [f"{k}\t{v!r}" for k, v in metrics.items()]
    Path(path).write_text("".join(s + "\n" for s in lines))


def get_dataset(config: PipelineConfig) -> Dataset:
    if config.dataset is not None:
        return load_dataset(config.dataset)
    if config.synth is not None:
        spec = config.room_spec()
        spec.validate()
        return synthesize_room(spec)
    raise ConfigError("config names neither a dataset path nor a [synth] room")


def run_pipeline(config: PipelineConfig, dataset: Dataset | None = None, trace=True,
                 write=True) -> PipelineResult:
    """Run every stage and write artifacts to ``config.out``.

    Artifacts: ``trajectory.txt``, ``layout.txt`` (when a layout was found),
    ``cloud.ply``, ``edges.txt``, ``metrics.tsv`` (with ground truth),
    ``trace.txt`` (when ``trace``) and PNG figures (when enabled).
    """
    dataset = dataset if dataset is not None else get_dataset(config)
    odo, graph, histories = initial_registration(dataset, config)
    initial = chain(odo)
    joint = joint_optimize(dataset.fragments, graph.nodes, pair_transforms(graph), config.registration,
                           config.planes, config.layout)
    metrics = compute_metrics(dataset, joint.poses, initial, config.alignment)
    artifacts = {}
    if write:
        artifacts = write_artifacts(config, dataset, graph, joint, metrics, trace)
    return PipelineResult(tuple(initial), graph, joint, metrics, artifacts, histories)


def write_artifacts(config, dataset, graph, joint, metrics, trace=True) -> dict:
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror}") from None
    arts = {}
    ids = [f.id for f in dataset.fragments]
    arts["trajectory"] = out / "trajectory.txt"
    write_trajectory(joint.poses, arts["trajectory"], ids)
    if joint.layout is not None:
        arts["layout"] = out / "layout.txt"
        write_layout(joint.layout, arts["layout"])
    arts["cloud"] = out / "cloud.ply"
    cloud = np.vstack([T.apply(f.points) for f, T in zip(dataset.fragments, joint.poses)])
    write_cloud(cloud, arts["cloud"], binary=config.binary_cloud)
    arts["edges"] = out / "edges.txt"
    write_edge_diagnostics(graph, arts["edges"])
    if trace:
        arts["trace"] = out / "trace.txt"
        arts["trace"].write_text(format_trace(joint.trace))
    if metrics:
        arts["metrics"] = out / "metrics.tsv"
        write_metrics(metrics, arts["metrics"])
    if config.figures:
        from .report import render_figures

        arts.update(render_figures(out, dataset, joint, metrics))
    return arts
