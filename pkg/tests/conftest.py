import numpy as np
import pytest

from structvo.geometry import CameraIntrinsics
from structvo.sim.dataset import generate_sequence, load_dataset
from structvo.sim.presets import get_preset

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def K():
    return K500


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    from structvo.geometry import so3_exp

    return so3_exp(axis * rng.uniform(0, max_angle))


@pytest.fixture(scope="session")
def dataset_cache(tmp_path_factory):
    """Generate each (preset, seed, frames) dataset once per session."""
    cache = {}

    def get(name, seed=0, n_frames=None, **kw):
        key = (name, seed, n_frames, tuple(sorted(kw.items())))
        if key not in cache:
            out = tmp_path_factory.mktemp(f"{name}_{seed}")
            generate_sequence(get_preset(name, seed, n_frames), out, **kw)
            cache[key] = load_dataset(out)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def pipeline_runs(dataset_cache):
    """Run the full pipeline on a preset once per session."""
    from structvo.evaluation import evaluate
    from structvo.pipeline import StructureVO
    import time

    cache = {}

    def get(name, seed=0):
        if (name, seed) not in cache:
            ds = dataset_cache(name, seed)
            t0 = time.perf_counter()
            vo = StructureVO(ds.K).fit([ds.frame(i) for i in ds.frame_ids()], ds.normal_provider())
            elapsed = time.perf_counter() - t0
            cache[(name, seed)] = (ds, vo, evaluate(vo.trajectory_, ds.gt), elapsed)
        return cache[(name, seed)]

    return get


VIEWPOINTS = {
    "room": ((-0.5, 0.1, -1.0), (0.6, 0.25, 0.02)),
    "corridor": ((0.1, 0.2, 1.0), (0.15, 0.05, 0.0)),
}


def two_views(baseline=(0.4, 0.05, 0.1), yaw2=0.08, noise=None, seed=0, points=True, lines=True, preset="room"):
    """Two simulated views of a preset scene: ``(scene, K, (obs1, corr1, pose1), (obs2, corr2, pose2))``.

    Poses are world-from-camera.
    """
    from structvo.geometry import Pose
    from structvo.sim.world import NoiseSpec, look_rotation, observe_features

    p = get_preset(preset, seed)
    noise = noise or NoiseSpec()
    c1, (yaw, pitch, roll) = np.array(VIEWPOINTS[preset][0]), VIEWPOINTS[preset][1]
    pose1 = Pose.from_rt(look_rotation(yaw, pitch, roll), c1, "cam", "world", 0.0)
    pose2 = Pose.from_rt(look_rotation(yaw + yaw2, pitch + 0.02, 0.0), c1 + np.asarray(baseline), "cam", "world", 0.1)
    out = [p.scene, p.K]
    for i, pose in enumerate((pose1, pose2)):
        obs, corr = observe_features(p.scene, pose, p.K, noise, i, pose.timestamp, seed, points, lines)
        out.append((obs, corr, pose))
    return tuple(out)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Record one acceptance line; printed at the end of the run."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    ACCEPTANCE[number] = f"criterion {number:>2}: {status}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
