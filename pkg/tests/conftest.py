import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clutterseg.fixtures import FixtureSpec, generate_scene  # noqa: E402
from clutterseg.geometry import GeometryParams, fuse_and_downsample  # noqa: E402
from clutterseg.pipeline import segment_scene  # noqa: E402

SMALL = dict(n_objects=3, n_views=4, width=320, height=240)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def gt_record(gt):
    return {"labels": gt.labels, "objects": [{"id": o.id, "category": o.category} for o in gt.objects]}


def instance_of_object(result, bundle, gt):
    """Map GT object id -> predicted instance id by majority of fused GT labels."""
    cloud = fuse_and_downsample(bundle.frames, GeometryParams(), labels=gt.labels)
    out = {}
    for inst in result.instances:
        lab = cloud.labels[inst.points]
        lab = lab[lab >= 0]
        if len(lab):
            u, c = np.unique(lab, return_counts=True)
            out.setdefault(int(u[np.argmax(c)]), inst.id)
    return out


@pytest.fixture(scope="session")
def small_scene():
    bundle, gt = generate_scene(FixtureSpec(seed=1, **SMALL))
    return bundle, gt


@pytest.fixture(scope="session")
def small_result(small_scene):
    bundle, _ = small_scene
    return segment_scene(bundle)


@pytest.fixture(scope="session")
def scene_10():
    """Full-size clean scene with 10 objects."""
    bundle, gt = generate_scene(FixtureSpec(seed=0))
    return bundle, gt, segment_scene(bundle)
