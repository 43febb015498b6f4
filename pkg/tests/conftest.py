import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "data.num_identities": "8", "data.num_test_identities": "4", "data.instances_per_identity": "4",
    "data.image_height": "16", "data.image_width": "8",
    "model.embed_dim": "8", "model.depth": "1", "model.num_heads": "2",
    "model.patch_size": "8", "model.patch_stride": "4",
    "sampler.p": "4", "sampler.k": "2", "optim.epochs": "2",
}


@pytest.fixture
def tiny_cfg():
    """A seconds-scale RunConfig; pass extra flat-key overrides as kwargs."""
    from dcformer.config import RunConfig, apply_overrides

    def make(**kw):
        vals = dict(TINY)
        vals.update({k.replace("__", "."): str(v) for k, v in kw.items()})
        return apply_overrides(RunConfig(), vals)

    return make
