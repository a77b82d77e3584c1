import numpy as np
import pytest

from latentview import camgeo, scenes


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 scenes, 6 views, 16x16; one held-out test scene."""
    root = tmp_path_factory.mktemp("tiny_ds")
    scenes.gen_dataset(4, 6, 16, seed=123, out_path=root, n_test=1)
    return scenes.Dataset(root)


@pytest.fixture(scope="session")
def tiny_scene(tiny_dataset):
    """(record, task, views, ref_inv) of the first train scene."""
    ds = tiny_dataset
    rec = ds.record(ds.train_ids[0])
    task = ds.task(ds.train_ids[0])
    i, j = task.inputs
    views = [rec.images[i], rec.images[j]]
    ref_inv = camgeo.pose_inverse(rec.poses[i])
    return rec, task, views, ref_inv


def overfit_samples(rec, task, ref_inv):
    """Every view as a target, posed relative to input view 1."""
    out = []
    for k in range(rec.n_views):
        rel = camgeo.pose_compose(ref_inv, rec.poses[k])
        out.append({
            "views": [rec.images[task.inputs[0]], rec.images[task.inputs[1]]],
            "target": rec.images[k],
            "target_pose": rel,
            "target_camvec": camgeo.pose_to_camvec(rel),
        })
    return out


def index_sampler(samples):
    def sampler(rng, batch_size):
        idx = rng.integers(0, len(samples), batch_size)
        return [samples[q] for q in idx]
    return sampler
