import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgan_ssd.errors import NumericalError, ShapeError
from dcgan_ssd.gan import (
    ConditionalGenerator,
    ConditionalGeneratorConfig,
    Discriminator,
    DiscriminatorConfig,
    GanTrainConfig,
    Generator,
    GeneratorConfig,
    discriminator_forward,
    discriminator_loss,
    discriminator_step,
    enhancement_loss,
    gan_value,
    generator_forward,
    generator_loss,
    sample_noise,
    seeded_build,
    train_gan,
    write_loss_log,
)

from gradcheck import check_gradients, param_count


def full(v, n=4):
    return torch.full((n,), v, dtype=torch.float64)


class TestObjectives:
    def test_equilibrium_loss(self):
        assert discriminator_loss(full(0.5), full(0.5)).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_discriminator(self):
        assert discriminator_loss(full(1.0), full(0.0)).item() == pytest.approx(0.0, abs=1e-6)

    def test_discriminator_loss_value(self):
        assert discriminator_loss(full(0.8), full(0.3)).item() == pytest.approx(0.5798, abs=5e-5)
        assert discriminator_loss(full(0.8), full(0.3)).item() == pytest.approx(-math.log(0.8) - math.log(0.7), rel=1e-12)

    def test_generator_loss_variants(self):
        assert generator_loss(full(0.5), "saturating").item() == pytest.approx(-0.6931, abs=5e-5)
        assert generator_loss(full(0.5), "non_saturating").item() == pytest.approx(0.6931, abs=5e-5)
        assert generator_loss(full(0.9), "non_saturating").item() == pytest.approx(0.1054, abs=5e-5)

    @pytest.mark.parametrize("variant", ["saturating", "non_saturating"])
    def test_generator_loss_decreases_toward_one(self, variant):
        values = [generator_loss(full(p), variant).item() for p in (0.1, 0.4, 0.7, 0.95)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_gan_value_limit_and_identity(self, rng):
        assert gan_value(full(1.0), full(0.0)).item() == pytest.approx(0.0, abs=1e-6)
        r = torch.from_numpy(rng.uniform(0, 1, 16))
        f = torch.from_numpy(rng.uniform(0, 1, 16))
        assert gan_value(r, f).item() == -discriminator_loss(r, f).item()

    def test_out_of_range_confidence(self):
        with pytest.raises(ValueError):
            discriminator_loss(full(1.2), full(0.5))
        with pytest.raises(ValueError):
            generator_loss(full(-0.1))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            generator_loss(full(0.5), "hinge")

    def test_enhancement_loss_cases(self):
        x = torch.zeros(2, 3, 4, 4)
        d = full(0.3, 2)
        assert enhancement_loss(x, x, d, 1.0, 0.0).item() == 0.0
        assert enhancement_loss(x + 0.1, x, d, 1.0, 0.0).item() == pytest.approx(0.1, abs=1e-7)
        assert enhancement_loss(x + 0.1, x, d, 0.0, 1.0).item() == generator_loss(d, "non_saturating").item()
        with pytest.raises(ShapeError):
            enhancement_loss(x, torch.zeros(2, 3, 4, 5), d)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
def test_value_is_negated_loss(real, fake):
    r, f = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)
    v = gan_value(r, f).item()
    assert math.isfinite(v)
    assert v == -discriminator_loss(r, f).item()


class TestNoise:
    def test_range_and_shape(self):
        z = sample_noise(1, 100, 3)
        assert z.shape == (1, 100) and z.min() >= 0 and z.max() < 1

    def test_determinism(self):
        assert torch.equal(sample_noise(5, 7, 11), sample_noise(5, 7, 11))

    def test_uniform_mean(self):
        # 3 sigma of the mean of 10000 U(0,1) draws is 3 * 0.2887 / 100 ~ 0.0087
        assert abs(sample_noise(10000, 1, 0).mean().item() - 0.5) < 0.02

    def test_gaussian_switch(self):
        z = sample_noise(4000, 1, 0, "gaussian")
        assert z.min() < 0 and abs(z.mean().item()) < 0.1

    @pytest.mark.parametrize("n,dim", [(0, 3), (3, 0)])
    def test_invalid(self, n, dim):
        with pytest.raises(ValueError):
            sample_noise(n, dim)


class TestNetworks:
    def test_latent_batch_shape(self):
        g = seeded_build(Generator, 0)
        out = generator_forward(g, sample_noise(72, 100, 0))
        assert out.shape == (72, 3, 32, 32)
        assert out.min() >= -1 and out.max() <= 1

    def test_zero_output_layer(self):
        g = seeded_build(Generator, 0)
        with torch.no_grad():
            g.output_layer.weight.zero_()
            g.output_layer.bias.zero_()
        assert torch.all(g(sample_noise(4, 100, 0)) == 0)

    def test_generator_deterministic(self):
        g = seeded_build(Generator, 0).eval()
        z = sample_noise(3, 100, 1)
        assert torch.equal(g(z), g(z))

    def test_seeded_build_is_pure(self):
        a, b = seeded_build(Generator, 5), seeded_build(Generator, 5)
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))

    def test_discriminator_zero_head(self):
        d = seeded_build(Discriminator, 0)
        with torch.no_grad():
            d.head.weight.zero_()
            d.head.bias.zero_()
        out = discriminator_forward(d, torch.rand(72, 3, 32, 32) * 2 - 1)
        assert out.shape == (72,)
        assert torch.all(out == 0.5)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            generator_forward(seeded_build(Generator, 0), torch.rand(2, 50))
        with pytest.raises(ShapeError):
            discriminator_forward(seeded_build(Discriminator, 0), torch.rand(2, 3, 16, 16))
        with pytest.raises(ShapeError):
            generator_forward(ConditionalGenerator(), torch.rand(2, 1, 8, 8))

    def test_conditional_output_size(self):
        g = seeded_build(lambda: ConditionalGenerator(ConditionalGeneratorConfig(out_size=(24, 40))), 0)
        out = generator_forward(g, torch.rand(2, 3, 12, 20) * 2 - 1)
        assert out.shape == (2, 3, 24, 40)

    def test_identity_refiner(self, rng):
        g = ConditionalGenerator.identity()
        x = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 13, 21)).astype(np.float32))
        assert (g.refine(x) - x).abs().max().item() < 1e-6

    def test_layer_spec_matches_design(self):
        spec = Discriminator().layer_spec()
        assert [l["channels"] for l in spec[:3]] == [64, 128, 256]
        assert [l["norm"] for l in spec[:3]] == [False, True, True]
        assert Generator().layer_spec()[-1]["activation"] == "tanh"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 50.0))
def test_forward_ranges_over_random_parameters(seed, scale):
    torch.manual_seed(seed)
    g = Generator(GeneratorConfig(noise_dim=8, image_size=8, channels=(8, 4)))
    d = Discriminator(DiscriminatorConfig(image_size=8, channels=(4, 8)))
    with torch.no_grad():
        for p in list(g.parameters()) + list(d.parameters()):
            p.normal_(0, scale)
    img = g(sample_noise(4, 8, seed))
    assert img.min() >= -1 and img.max() <= 1
    conf = d(img)
    assert torch.all((conf > 0) & (conf < 1))


# ---------------------------------------------------------------------------
# Gradient fidelity on tiny float64 networks


def tiny_discriminator():
    return seeded_build(lambda: Discriminator(DiscriminatorConfig(image_size=4, in_channels=1, channels=(2, 4))), 0).double()


def tiny_generator():
    return seeded_build(lambda: Generator(GeneratorConfig(noise_dim=3, image_size=4, out_channels=1, channels=(4, 2))), 1).double()


def tiny_conditional():
    cfg = ConditionalGeneratorConfig(out_size=4, in_channels=1, channels=(2,))
    return seeded_build(lambda: ConditionalGenerator(cfg), 2).double()


def test_tiny_networks_are_tiny():
    for m in (tiny_discriminator(), tiny_generator(), tiny_conditional()):
        assert param_count(m) <= 500


def test_discriminator_loss_gradients():
    torch.manual_seed(0)
    d = tiny_discriminator()
    real = torch.rand(6, 1, 4, 4, dtype=torch.float64) * 2 - 1
    fake = torch.rand(6, 1, 4, 4, dtype=torch.float64) * 2 - 1
    assert check_gradients(d, lambda: discriminator_loss(d(real), d(fake))) == param_count(d)


@pytest.mark.parametrize("variant", ["saturating", "non_saturating"])
def test_generator_loss_gradients(variant):
    g, d = tiny_generator(), tiny_discriminator()
    z = sample_noise(6, 3, 4).double()
    for p in d.parameters():
        p.requires_grad_(False)
    assert check_gradients(g, lambda: generator_loss(d(g(z)), variant)) == param_count(g)


def test_enhancement_loss_gradients():
    torch.manual_seed(1)
    g, d = tiny_conditional(), tiny_discriminator()
    for p in d.parameters():
        p.requires_grad_(False)
    low = torch.rand(5, 1, 2, 2, dtype=torch.float64) * 1.6 - 0.8
    target = torch.rand(5, 1, 4, 4, dtype=torch.float64) * 1.6 - 0.8
    with torch.no_grad():
        g.output_layer.weight.normal_(0, 0.3)

    def loss():
        out = g(low)
        return enhancement_loss(out, target, d(out), 2.0, 0.5)

    assert check_gradients(g, loss) == param_count(g)


# ---------------------------------------------------------------------------
# Training loop


def small_config(**overrides):
    base = dict(batch_size=8, epochs=2, image_size=8, noise_dim=4, generator_channels=(8, 4),
                discriminator_channels=(4, 8), seed=3)
    base.update(overrides)
    return GanTrainConfig(**base)


def small_images(n=20, size=8, seed=0):
    return list(np.random.default_rng(seed).uniform(-1, 1, (n, size, size, 3)).astype(np.float32))


class TestTrainGan:
    def test_checkpoints_and_records(self, tmp_path):
        cfg = small_config(epochs=3)
        res = train_gan(cfg, small_images(), checkpoint_dir=tmp_path / "ck", log_path=tmp_path / "loss.csv")
        assert len(res.checkpoints) == 3
        assert (tmp_path / "ck" / "epoch_003" / "generator" / "manifest.json").is_file()
        assert len(res.epoch_losses("d_loss")) == 3 and len(res.epoch_losses("g_loss")) == 3
        header = (tmp_path / "loss.csv").read_text().splitlines()[0]
        assert header == "epoch,batch,d_loss,g_loss,v_estimate"
        assert len(res.log) == 3 * 3  # 20 images in batches of 8

    def test_paper_schedule_record_count(self):
        cfg = small_config(batch_size=72, epochs=25)
        res = train_gan(cfg, small_images(72))
        assert len(res.checkpoints) == 25
        assert len(res.epoch_losses("d_loss")) == 25 and len(res.epoch_losses("g_loss")) == 25

    def test_bit_identical_reruns(self):
        a = train_gan(small_config(), small_images())
        b = train_gan(small_config(), small_images())
        for x, y in ((a.generator, b.generator), (a.discriminator, b.discriminator)):
            assert all(torch.equal(p, q) for p, q in zip(x.state_dict().values(), y.state_dict().values()))
        assert [r.d_loss for r in a.log] == [r.d_loss for r in b.log]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            train_gan(small_config(epochs=0), small_images())
        with pytest.raises(ValueError):
            train_gan(small_config(generator_loss_variant="wasserstein"), small_images())

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_gan(small_config(), np.zeros((0, 8, 8, 3), np.float32))

    def test_conditional_requires_targets(self):
        with pytest.raises(ValueError):
            train_gan(small_config(mode="conditional"), small_images(size=4))

    def test_conditional_mode(self):
        cfg = small_config(mode="conditional", conditional_channels=(4,), reconstruction_weight=10.0)
        res = train_gan(cfg, small_images(size=4), small_images(size=8, seed=1))
        assert res.generator.config.out_size == (8, 8)
        assert all(math.isfinite(r.g_loss) for r in res.log)

    def test_divergence_guard_names_batch(self):
        cfg = small_config(learning_rate=1e30, epochs=5)
        with pytest.raises(NumericalError, match=r"epoch \d+ batch \d+"):
            train_gan(cfg, small_images())

    def test_loss_log_round_trip(self, tmp_path):
        res = train_gan(small_config(epochs=1), small_images())
        write_loss_log(res.log, tmp_path / "l.csv")
        rows = (tmp_path / "l.csv").read_text().splitlines()[1:]
        assert float(rows[0].split(",")[2]) == res.log[0].d_loss


def test_discriminator_step_descends_with_frozen_generator():
    cfg = small_config(learning_rate=1e-4)
    d = seeded_build(lambda: Discriminator(DiscriminatorConfig(8, 3, (4, 8))), 0)
    g = seeded_build(lambda: Generator(GeneratorConfig(4, 8, 3, (8, 4))), 1)
    real = torch.from_numpy(np.stack(small_images(16))).permute(0, 3, 1, 2)
    with torch.no_grad():
        fake = g(sample_noise(16, 4, 0))
    opt = torch.optim.SGD(d.parameters(), lr=1e-3)
    d.eval()  # fixed normalization statistics so the same batch sees the same function
    before, _, _ = discriminator_step(d, opt, real, fake)
    after = discriminator_loss(d(real), d(fake)).item()
    assert after < before.item()
