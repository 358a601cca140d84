import numpy as np
import pytest

from paradis import autodiff as ad
from paradis.autodiff import Tensor, grad_check
from paradis.blocks import (
    ChannelMixer,
    ChannelNorm,
    ConvBlock,
    Decoder,
    DiffusionBlock,
    Encoder,
    LowRankBias,
    ReactionBlock,
    SpatialMixer,
    UNet,
    low_rank_field,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_channel_mixer_identity_and_sum(rng):
    mix = ChannelMixer(2, 2, rng)
    mix.weight.data[:] = np.eye(2)
    mix.bias.data[:] = 0
    x = Tensor(rng.normal(size=(2, 4, 5)))
    assert np.allclose(mix(x).data, x.data, atol=1e-15)

    summing = ChannelMixer(2, 1, rng)
    summing.weight.data[:] = [[1.0, 1.0]]
    summing.bias.data[:] = 0
    assert np.allclose(summing(x).data[0], x.data.sum(axis=0), atol=1e-14)


def test_channel_mixer_against_per_pixel_oracle(rng):
    mix = ChannelMixer(3, 4, rng)
    x = rng.normal(size=(3, 5, 6))
    got = mix(Tensor(x)).data
    for i in range(5):
        for j in range(6):
            want = mix.weight.data @ x[:, i, j] + mix.bias.data
            assert np.max(np.abs(got[:, i, j] - want)) < 1e-12


def test_channel_mixer_parameter_count(rng):
    assert ChannelMixer(7, 5, rng).parameter_count() == 8 * 5
    assert ChannelMixer(7, 5, rng, bias=False).parameter_count() == 35


def test_spatial_mixer_identity(rng):
    sm = SpatialMixer(3, 3, rng)
    sm.kernel.data[:] = 0
    sm.kernel.data[:, 1, 1] = 1
    sm.pointwise.weight.data[:] = np.eye(3)
    sm.pointwise.bias.data[:] = 0
    x = Tensor(rng.normal(size=(3, 6, 8)))
    assert np.allclose(sm(x).data, x.data, atol=1e-15)


def test_spatial_mixer_laplacian_on_linear_field(rng):
    sm = SpatialMixer(1, 1, rng)
    sm.kernel.data[0] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]
    sm.pointwise.weight.data[:] = 1
    sm.pointwise.bias.data[:] = 0
    h, w = 8, 16
    field = np.tile(np.arange(w, dtype=float), (h, 1))[None]
    out = sm(Tensor(field)).data
    interior = out[0, 1:-1, 1:w - 1]  # away from the wrap seam and poles
    assert np.max(np.abs(interior)) < 1e-12


def test_spatial_mixer_constant_field_linearity(rng):
    sm = SpatialMixer(2, 3, rng)
    const = np.array([1.5, -2.0])
    x = np.broadcast_to(const[:, None, None], (2, 5, 8)).copy()
    got = sm(Tensor(x)).data
    ksum = sm.kernel.data.sum(axis=(1, 2))
    want = sm.pointwise.weight.data @ (ksum * const) + sm.pointwise.bias.data
    assert np.allclose(got, want[:, None, None], atol=1e-12)


def test_spatial_mixer_parameter_count(rng):
    sm = SpatialMixer(6, 10, rng)
    assert sm.parameter_count() == 9 * 6 + (6 + 1) * 10


def test_spatial_mixer_rejects_degenerate_grid(rng):
    sm = SpatialMixer(1, 1, rng)
    with pytest.raises(ValueError):
        sm(Tensor(np.zeros((1, 3, 8))))


def test_low_rank_field_outer_product_oracle(rng):
    a = Tensor(np.array([[1.0]]))
    u = Tensor(np.array([[1.0, 2.0]]))
    v = Tensor(np.array([[3.0, 4.0]]))
    b = low_rank_field(a, u, v)
    assert np.array_equal(b.data, [[[3.0, 4.0], [6.0, 8.0]]])


def test_low_rank_bias_zero_at_init_and_count(rng):
    lrb = LowRankBias(4, 128, 181, 360, 1024, rng)
    assert lrb.parameter_count() == 128 * (4 + 181 + 360) + 1024 * 4 == 73856
    assert np.all(lrb().data == 0)

    small = LowRankBias(2, 3, 5, 8, 4, rng)
    small.coeff.data[:] = rng.normal(size=small.coeff.shape)
    oracle = np.einsum("ck,ki,kj->cij", small.coeff.data,
                       small.lat_factors.data, small.lon_factors.data)
    oracle = np.einsum("oc,cij->oij", small.project.weight.data, oracle)
    assert np.allclose(small().data, oracle, atol=1e-13)


def test_low_rank_bias_differentiable(rng):
    small = LowRankBias(2, 3, 4, 6, 3, rng)
    proj = rng.normal(size=(3, 4, 6))

    def f(t):
        small.coeff = t
        return ad.weighted_mean(small(), proj)

    assert grad_check(f, Tensor(rng.normal(size=(2, 3))), tol=1e-5).passed


def test_channel_norm_constant_and_affine(rng):
    cn = ChannelNorm(3)
    x = Tensor(np.full((3, 4, 5), 7.0))
    assert np.max(np.abs(cn(x).data)) < 1e-10  # zero-variance guarded by eps

    cn.gamma.data[:] = 0
    cn.beta.data[:] = np.arange(3.0)[:, None, None]
    y = cn(Tensor(rng.normal(size=(3, 4, 5)))).data
    assert np.allclose(y, np.broadcast_to(np.arange(3.0)[:, None, None], y.shape))


def test_channel_norm_per_location_statistics(rng):
    cn = ChannelNorm(16)
    x = Tensor(rng.normal(size=(16, 6, 7)) * 2.0 + 1.0)
    y = cn(x).data
    mean = y.mean(axis=0)
    var = y.var(axis=0)
    assert np.max(np.abs(mean)) < 1e-10
    assert np.all(var <= 1.0 + 1e-12)
    assert np.all(var >= 1.0 - 1e-6)
    assert cn.parameter_count() == 32


def test_diffusion_block_identity_and_support_growth(rng):
    db = DiffusionBlock(2, 6, 8, rng, bias_channels=2, bias_rank=3)
    x = Tensor(rng.normal(size=(2, 6, 8)))
    assert np.array_equal(db(x).data, x.data)  # zero-init residual

    db.mixer.weight.data[:] = rng.normal(size=db.mixer.weight.shape)
    delta = np.zeros((2, 6, 8))
    delta[:, 3, 4] = 1.0
    support = np.any(db(Tensor(delta)).data - delta != 0, axis=0)
    ii, jj = np.nonzero(support)
    assert ii.min() >= 2 and ii.max() <= 4 and jj.min() >= 3 and jj.max() <= 5


def test_reaction_block_identity_and_locality(rng):
    rb = ReactionBlock(3, 5, 8, rng, bias_channels=2, bias_rank=2)
    x0 = rng.normal(size=(3, 5, 8))
    assert np.array_equal(rb(Tensor(x0)).data, x0)

    rb.drop.weight.data[:] = rng.normal(size=rb.drop.weight.shape)
    base = rb(Tensor(x0)).data
    # permutation equivariance over grid sites (bias field starts at zero)
    perm = rng.permutation(5 * 8)
    xp = x0.reshape(3, -1)[:, perm].reshape(3, 5, 8)
    got = rb(Tensor(xp)).data.reshape(3, -1)
    assert np.allclose(got, base.reshape(3, -1)[:, perm], atol=1e-13)

    # single-location probe: perturbing one site leaves every other alone
    x1 = x0.copy()
    x1[1, 2, 3] += 0.37
    moved = rb(Tensor(x1)).data
    changed = np.any(moved != base, axis=0)
    assert changed[2, 3]
    changed[2, 3] = False
    assert not changed.any()


def test_encoder_decoder(rng):
    enc = Encoder(5, 7, rng)
    assert enc.parameter_count() == 35
    enc.weight.data[:] = 0
    assert np.all(enc(Tensor(rng.normal(size=(5, 4, 6)))).data == 0)

    dec = Decoder(6, 3, 4, 8, rng, bias_channels=2, bias_rank=2)
    dec.readout.bias.data[:] = [0.5, -1.0, 2.0]
    out = dec(Tensor(np.zeros((6, 4, 8)))).data
    assert np.allclose(out, np.array([0.5, -1.0, 2.0])[:, None, None])
    want = (9 * 6 + 7 * 6) + (2 * (2 + 4 + 8) + 6 * 2) + 7 * 3
    assert dec.parameter_count() == want


def test_unet_parameter_counts_and_zero_init(rng):
    published = {1: 39473, 2: 44617, 3: 45909}
    net1 = UNet(1, rng)
    assert abs(net1.parameter_count() - published[1]) / published[1] < 0.15
    for depth in (2, 3):
        net = UNet(depth, rng)
        assert net.parameter_count() > 0  # reported next to targets in CLI
    x = Tensor(rng.normal(size=(1, 12, 16)))
    assert np.all(net1(x).data == 0)  # zero-initialized final layer


def test_unet_receptive_field_probe(rng):
    net = UNet(1, rng)
    for w, b in [(net.out_proj.weight, net.out_proj.bias)]:
        w.data[:] = rng.normal(size=w.shape)
    x0 = rng.normal(size=(1, 16, 64))
    base = net(Tensor(x0)).data
    radius = net.receptive_radius()
    x1 = x0.copy()
    x1[0, 8, 40] += 1.0  # 24 columns from the probe point, beyond radius 12
    out = net(Tensor(x1)).data
    assert out[0, 8, 16] == base[0, 8, 16]
    # sanity: somewhere the output did change
    assert np.any(out != base)
    assert radius < 24


def test_unet_odd_grid_pad_crop(rng):
    net = UNet(3, rng)
    x = Tensor(rng.normal(size=(1, 11, 18)))
    assert net(x).shape == (1, 11, 18)


BLOCK_BUILDERS = {
    "channel-mixer": lambda rng: (ChannelMixer(3, 4, rng), (3, 6, 8)),
    "spatial-mixer": lambda rng: (SpatialMixer(2, 3, rng), (2, 6, 8)),
    "channel-norm": lambda rng: (ChannelNorm(4), (4, 5, 8)),
    "diffusion": lambda rng: (
        DiffusionBlock(3, 5, 8, rng, bias_channels=2, bias_rank=2), (3, 5, 8)),
    "reaction": lambda rng: (
        ReactionBlock(3, 5, 8, rng, bias_channels=2, bias_rank=2), (3, 5, 8)),
    "decoder": lambda rng: (
        Decoder(3, 2, 5, 8, rng, bias_channels=2, bias_rank=2), (3, 5, 8)),
}


@pytest.mark.parametrize("name", sorted(BLOCK_BUILDERS))
def test_block_input_gradients(name, rng):
    block, shape = BLOCK_BUILDERS[name](rng)
    # make zero-initialized branches active so their gradients are probed
    for _, p in block.parameters().items():
        if np.all(p.data == 0):
            p.data[:] = rng.normal(size=p.shape) * 0.2
    x0 = rng.normal(size=shape)
    proj = rng.normal(size=block(Tensor(x0)).shape)
    rep = grad_check(lambda t: ad.weighted_mean(block(t), proj),
                     Tensor(x0), tol=1e-5)
    assert rep.passed, f"{name} input grad: {rep}"


def test_block_parameter_gradients(rng):
    """Reverse-mode gradients w.r.t. every block parameter match finite
    differences (sampled entries)."""
    from paradis.autodiff import Tape, backward as bw

    for name in sorted(BLOCK_BUILDERS):
        block, shape = BLOCK_BUILDERS[name](rng)
        for pname, p in block.parameters().items():
            if np.all(p.data == 0):
                p.data[:] = rng.normal(size=p.shape) * 0.2
        x0 = rng.normal(size=shape)
        proj = rng.normal(size=block(Tensor(x0)).shape)

        def loss_value():
            return float(ad.weighted_mean(block(Tensor(x0)), proj).data)

        block.zero_grad()
        with Tape():
            bw(ad.weighted_mean(block(Tensor(x0)), proj))

        eps = 1e-6
        rng_idx = np.random.default_rng(0)
        for pname, p in block.parameters().items():
            assert p.grad is not None, f"{name}.{pname} missing grad"
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            picks = rng_idx.choice(flat.size, size=min(flat.size, 6),
                                   replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_value()
                flat[i] = orig - eps
                fm = loss_value()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                denom = max(abs(fd), abs(gflat[i]), 1e-3)
                assert abs(fd - gflat[i]) / denom < 1e-5, f"{name}.{pname}[{i}]"
