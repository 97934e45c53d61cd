from fractions import Fraction

import pytest
import torch

from acceptance_fixtures import generators_identical
from lungct_gan.checkpoint import CheckpointError, checkpoint_payload, load_checkpoint, save_checkpoint
from lungct_gan.config import DiscriminatorConfig, GeneratorConfig
from lungct_gan.discriminator import build_discriminator
from lungct_gan.generators import build_generator


def roundtrip_exact(family, path, seed=0):
    gen = build_generator(GeneratorConfig(family, Fraction(1, 8), seed=seed))
    disc = build_discriminator(DiscriminatorConfig(True, Fraction(1, 8), seed=seed))
    save_checkpoint(path, gen, disc, {"epoch": 3})
    gen2, disc2, extra = load_checkpoint(path)
    same_disc = all(torch.equal(v, disc2.state_dict()[k]) for k, v in disc.state_dict().items())
    return generators_identical(gen, gen2) and same_disc and extra == {"epoch": 3}


@pytest.mark.parametrize("family", ["dcgan3d", "stylegan3d", "biggan3d"])
def test_roundtrip_bit_exact(family, tmp_path):
    assert roundtrip_exact(family, tmp_path / "c.ckpt")


def test_in_memory_payload(small_generators):
    gen = small_generators["biggan3d"]
    gen2, disc, extra = load_checkpoint(checkpoint_payload(gen))
    assert disc is None and extra == {}
    assert gen2.config.width_multiplier == Fraction(1, 8)
    assert generators_identical(gen, gen2)


def test_payload_is_a_snapshot(small_generators):
    gen = small_generators["dcgan3d"]
    payload = checkpoint_payload(gen)
    key = next(iter(payload["generator"]["state_dict"]))
    assert payload["generator"]["state_dict"][key].data_ptr() != gen.state_dict()[key].data_ptr()


def test_rejects_foreign_files(tmp_path):
    torch.save({"weights": 1}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint({"format": "lungct-gan-checkpoint", "version": 99})
