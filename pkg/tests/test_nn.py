import io
import math

import numpy as np
import pytest

from curioscene import autodiff as ad
from curioscene import nn
from curioscene.autodiff import Tape
from curioscene.errors import FormatError, InvalidConfig, ShapeMismatch
from curioscene.nn import (
    Heads,
    NetworkConfig,
    SceneCode,
    build_critic,
    build_encoder,
    build_heads,
    codes_from_outputs,
    encode,
    load_network,
    save_network,
)
from helpers_fd import fd_check, fd_check_sampled

RNG = np.random.default_rng(60211)

FULL = NetworkConfig(image_size=128, width_scale=1.0, latent_dim=64, n_proposals=5)
SMALL = NetworkConfig(image_size=32, width_scale=0.1, latent_dim=8, n_proposals=2)


def small_images(batch=2, size=32):
    return RNG.uniform(0.0, 1.0, size=(batch, 3, size, size))


# -- configuration -----------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        dict(image_size=48),
        dict(latent_dim=4),
        dict(n_proposals=0),
        dict(width_scale=0.0),
        dict(width_scale=-1.0),
        dict(enabled_heads=frozenset({"center", "mass"})),
        dict(enabled_heads=frozenset({"rgb"})),
        dict(center_dim=4),
    ],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(InvalidConfig):
        NetworkConfig(**bad).validate()


def test_default_config_is_valid():
    NetworkConfig().validate()


# -- architecture fidelity at full scale -------------------------------


def test_encoder_parameter_count_full_scale():
    assert build_encoder(FULL).param_count() == 2_029_056


def test_critic_parameter_count_full_scale():
    assert build_critic(FULL).param_count() == 1_883_713


def test_encoder_feature_shapes_full_scale():
    assert build_encoder(FULL).feature_shapes() == [
        (64, 30, 30),
        (192, 14, 14),
        (384, 7, 7),
        (256, 4, 4),
        (64, 1, 1),
    ]


def test_critic_feature_shapes_full_scale():
    assert build_critic(FULL).feature_shapes() == [
        (64, 30, 30),
        (192, 7, 7),
        (384, 4, 4),
        (256, 2, 2),
        (64, 1, 1),
    ]


def test_forward_shapes_match_declared_full_scale():
    # One real forward pass at paper scale; the declared chains must be what
    # the convolutions actually produce.
    image = RNG.uniform(0.0, 1.0, size=(1, 3, 128, 128))
    for net in (build_encoder(FULL), build_critic(FULL)):
        tape = Tape()
        seen = []
        net.forward(tape, net.lift(tape), image, training=False, shapes_out=seen)
        assert seen == net.feature_shapes()


def test_heads_parameter_count_in_stated_range():
    assert 4_387 <= build_heads(FULL).param_count() <= 48_266


def test_width_scaling_floors_at_eight():
    cfg = NetworkConfig(image_size=32, width_scale=0.01, latent_dim=8)
    shapes = build_encoder(cfg).feature_shapes()
    assert [c for c, _, _ in shapes] == [8, 8, 8, 8, 8]


def test_width_scaling_rounds_up():
    cfg = NetworkConfig(image_size=32, width_scale=0.25, latent_dim=16)
    shapes = build_encoder(cfg).feature_shapes()
    assert [c for c, _, _ in shapes] == [16, 48, 96, 64, 16]


@pytest.mark.parametrize("size", [32, 64, 128])
def test_every_image_size_reaches_one_by_one(size):
    cfg = NetworkConfig(image_size=size, width_scale=0.1, latent_dim=8)
    for net in (build_encoder(cfg), build_critic(cfg)):
        shapes = net.feature_shapes()
        assert shapes[0][1:] == (30, 30)
        assert shapes[-1][1:] == (1, 1)


# -- encoder behaviour -------------------------------------------------


def test_zero_image_gives_finite_latent():
    cfg = SMALL
    enc = build_encoder(cfg)
    tape = Tape()
    latent = enc.forward(tape, enc.lift(tape), np.zeros((1, 3, 32, 32)))
    assert latent.data.shape == (1, cfg.latent_dim)
    assert np.all(np.isfinite(latent.data))


def test_encoder_rejects_wrong_image_shape():
    enc = build_encoder(SMALL)
    tape = Tape()
    with pytest.raises(ShapeMismatch):
        enc.forward(tape, enc.lift(tape), np.zeros((1, 3, 64, 64)))


def test_pixel_perturbation_changes_latent():
    enc = build_encoder(SMALL)
    base = small_images(1)
    bumped = base.copy()
    bumped[0, 0, 16, 16] += 0.5
    tape = Tape()
    handles = enc.lift(tape)
    a = enc.forward(tape, handles, base).data
    b = enc.forward(tape, handles, bumped).data
    assert np.any(a != b)


def test_training_mode_updates_bn_stats_eval_does_not():
    enc = build_encoder(SMALL)
    before = {k: s.copy() for k, s in enc.bn.items()}
    tape = Tape()
    enc.forward(tape, enc.lift(tape), small_images(3), training=False)
    for k, s in enc.bn.items():
        assert np.array_equal(s.mean, before[k].mean)
        assert np.array_equal(s.var, before[k].var)
    enc.forward(tape, enc.lift(tape), small_images(3), training=True)
    assert any(not np.array_equal(s.mean, before[k].mean) for k, s in enc.bn.items())


def test_encoder_gradients_flow_to_all_parameters():
    enc = build_encoder(SMALL)
    tape = Tape()
    handles = enc.lift(tape)
    latent = enc.forward(tape, handles, small_images(2), training=True)
    grads = tape.backward(latent.square().mean())
    named = nn.collect_grads(handles, grads)
    assert set(named) == set(enc.params)
    for name, g in named.items():
        assert np.all(np.isfinite(g)), name


def test_encoder_finite_differences_sampled():
    # Eval mode so batch-norm state stays fixed between probe evaluations.
    enc = build_encoder(SMALL)
    image = small_images(1)

    def build(tape, c1w, c5w, img):
        handles = {n: tape.leaf(a) for n, a in enc.params.items()}
        handles["c1.w"] = c1w
        handles["c5.w"] = c5w
        return enc.forward(tape, handles, img).square().sum()

    fd_check_sampled(
        build,
        [enc.params["c1.w"], enc.params["c5.w"], image],
        np.random.default_rng(5),
        n_coords=12,
        tol=1e-4,
    )


# -- critic behaviour --------------------------------------------------


def test_critic_probability_strictly_inside_unit_interval():
    critic = build_critic(SMALL)
    for scale in (0.0, 1.0, 1e6):
        p = critic.probability(scale * small_images(2))
        assert np.all(p > 0.0) and np.all(p < 1.0)


def test_critic_input_gradient_finite_and_nonzero():
    critic = build_critic(SMALL)
    tape = Tape()
    img = tape.leaf(small_images(1))
    logits = critic.forward(tape, critic.lift(tape), img)
    g = tape.backward(logits.sum())[img]
    assert np.all(np.isfinite(g))
    assert np.any(g != 0.0)


def test_critic_finite_differences_sampled():
    critic = build_critic(SMALL)
    image = small_images(1)

    def build(tape, c2w, headb, img):
        handles = {n: tape.leaf(a) for n, a in critic.params.items()}
        handles["c2.w"] = c2w
        handles["head.b"] = headb
        return critic.forward(tape, handles, img).sum()

    fd_check_sampled(
        build,
        [critic.params["c2.w"], critic.params["head.b"], image],
        np.random.default_rng(6),
        n_coords=12,
        tol=1e-4,
    )


def test_critic_batchnorm_carries_no_learnable_parameters():
    critic = build_critic(SMALL)
    assert not any(".g" in n or ".beta" in n for n in critic.params)
    assert set(critic.bn) == {"c1", "c2", "c3", "c4"}


# -- heads behaviour ---------------------------------------------------


def heads_config(**kw):
    base = dict(image_size=32, width_scale=0.1, latent_dim=8, n_proposals=3, center_dim=3)
    base.update(kw)
    return NetworkConfig(**base)


def run_heads(cfg, latent=None):
    heads = build_heads(cfg)
    if latent is None:
        latent = RNG.normal(size=(2, cfg.latent_dim))
    tape = Tape()
    out = heads.forward(tape, heads.lift(tape), tape.constant(latent))
    return heads, out


def test_head_gating():
    cfg = heads_config(enabled_heads=frozenset({"center", "rgb"}))
    _, out = run_heads(cfg)
    assert set(out) == {"centers", "rgbs"}
    assert out["centers"].data.shape == (2, 3, 3)
    assert out["rgbs"].data.shape == (2, 3, 3)


def test_head_output_ranges():
    _, out = run_heads(heads_config())
    assert np.all(out["rgbs"].data >= 0.0) and np.all(out["rgbs"].data <= 1.0)
    assert np.all(out["confidences"].data >= 0.0) and np.all(out["confidences"].data <= 1.0)
    el = out["light"].data[:, 1]
    assert np.all(el > 0.0) and np.all(el < math.pi / 2)
    norms = np.linalg.norm(out["rotations"].data, axis=2)
    assert norms.max() <= math.sqrt(2.0)


def test_rotation_decode_lands_in_half_open_interval():
    _, out = run_heads(heads_config())
    for code in codes_from_outputs(out):
        angles = code.rotation_angles()
        assert np.all(angles > -math.pi) and np.all(angles <= math.pi)


def test_center_dim_two_for_flat_worlds():
    cfg = heads_config(center_dim=2, enabled_heads=frozenset({"center"}))
    _, out = run_heads(cfg)
    assert out["centers"].data.shape == (2, 3, 2)


def test_zero_latent_starts_light_at_quarter_pi():
    # relu(0) trunk and zero biases leave the raw light output at zero, so
    # the elevation activation must start the hemisphere at pi/4.
    _, out = run_heads(heads_config(), latent=np.zeros((1, 8)))
    assert out["light"].data[0, 1] == pytest.approx(math.pi / 4, abs=1e-12)


def test_trunk_expands_per_proposal():
    cfg = heads_config(n_proposals=4)
    heads = build_heads(cfg)
    assert heads.params["trunk.w"].shape == (8, 4 * Heads.D)


def test_heads_finite_differences():
    cfg = heads_config(n_proposals=2)
    heads = build_heads(cfg)
    latent = RNG.normal(size=(2, 8))

    def build(tape, trunk_w, light_ow, latent_t):
        handles = {n: tape.leaf(a) for n, a in heads.params.items()}
        handles["trunk.w"] = trunk_w
        handles["light.o.w"] = light_ow
        out = heads.forward(tape, handles, latent_t)
        total = None
        for t in out.values():
            term = t.square().sum()
            total = term if total is None else total + term
        return total

    fd_check(build, [heads.params["trunk.w"], heads.params["light.o.w"], latent], tol=1e-4)


# -- encode ------------------------------------------------------------


def test_encode_single_image_returns_one_code():
    cfg = heads_config()
    enc, heads = build_encoder(cfg), build_heads(cfg)
    code = encode(small_images(1)[0], enc, heads)
    assert isinstance(code, SceneCode)
    code.validate()
    assert code.n_objects == cfg.n_proposals


def test_encode_is_deterministic():
    cfg = heads_config()
    enc, heads = build_encoder(cfg), build_heads(cfg)
    img = small_images(1)[0]
    a, b = encode(img, enc, heads), encode(img, enc, heads)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.rgbs, b.rgbs)
    assert np.array_equal(a.light, b.light)


def test_encode_batch_matches_singles():
    cfg = heads_config()
    enc, heads = build_encoder(cfg), build_heads(cfg)
    batch = small_images(3)
    together = encode(batch, enc, heads)
    for i, code in enumerate(together):
        alone = encode(batch[i], enc, heads)
        assert np.allclose(code.centers, alone.centers, atol=1e-12)


# -- scene codes -------------------------------------------------------


def test_scene_code_roundtrip_through_dict():
    code = SceneCode(
        centers=np.array([[0.1, -0.2, 0.3], [1.0, 0.0, -1.0]]),
        rgbs=np.array([[0.5, 0.2, 0.9], [1.0, 0.3, 0.0]]),
        rotations=np.array([[0.6, -0.8], [1.0, 0.0]]),
        confidences=np.array([0.25, 1.0]),
        light=np.array([0.3, 0.7]),
    )
    back = SceneCode.from_dict(code.to_dict())
    assert np.array_equal(back.centers, code.centers)
    assert np.array_equal(back.rotations, code.rotations)
    assert np.array_equal(back.light, code.light)


def test_scene_code_validation_rejects_bad_values():
    with pytest.raises(ShapeMismatch):
        SceneCode(centers=np.array([[0.0, 0.0]]), rgbs=np.array([[1.5, 0.0, 0.0]])).validate()
    with pytest.raises(ShapeMismatch):
        SceneCode(centers=np.array([[0.0, 0.0]]), confidences=np.array([-0.1])).validate()
    with pytest.raises(ShapeMismatch):
        SceneCode(centers=np.array([[0.0, 0.0]]), light=np.array([0.0, 0.0])).validate()


def test_codes_from_outputs_wraps_azimuth():
    out = {
        "centers": np.zeros((1, 1, 3)),
        "light": np.array([[7.0, 0.5]]),
    }
    (code,) = codes_from_outputs(out)
    assert -math.pi < code.light[0] <= math.pi
    assert code.light[0] == pytest.approx(7.0 - 2.0 * math.pi)


# -- persistence -------------------------------------------------------


def test_param_block_roundtrip_and_order_independence():
    a = {"w": RNG.normal(size=(3, 4)), "b": RNG.normal(size=7), "s": np.array(2.5)}
    b = {k: a[k] for k in ("s", "b", "w")}
    buf_a, buf_b = io.BytesIO(), io.BytesIO()
    ad.save_param_block(buf_a, a)
    ad.save_param_block(buf_b, b)
    assert buf_a.getvalue() == buf_b.getvalue()
    loaded = ad.load_param_block(io.BytesIO(buf_a.getvalue()))
    assert set(loaded) == set(a)
    for k in a:
        assert np.array_equal(loaded[k], np.asarray(a[k], dtype=np.float64))


def test_param_block_rejects_bad_magic_and_truncation():
    with pytest.raises(FormatError):
        ad.load_param_block(io.BytesIO(b"NOPE!!"))
    buf = io.BytesIO()
    ad.save_param_block(buf, {"w": RNG.normal(size=(4, 4))})
    clipped = buf.getvalue()[:-5]
    with pytest.raises(FormatError):
        ad.load_param_block(io.BytesIO(clipped))


def test_network_file_roundtrip(tmp_path):
    cfg = heads_config()
    enc = build_encoder(cfg)
    # Non-trivial running stats so the roundtrip covers them.
    tape = Tape()
    enc.forward(tape, enc.lift(tape), small_images(3), training=True)
    path = tmp_path / "enc.net"
    save_network(path, "encoder", enc)
    kind, restored = load_network(path)
    assert kind == "encoder"
    assert restored.cfg == cfg
    for name in enc.params:
        assert np.array_equal(restored.params[name], enc.params[name])
    img = small_images(2)
    t1, t2 = Tape(), Tape()
    out1 = enc.forward(t1, enc.lift(t1), img).data
    out2 = restored.forward(t2, restored.lift(t2), img).data
    assert np.array_equal(out1, out2)


def test_network_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.net"
    path.write_bytes(b"not a network\n\njunk")
    with pytest.raises(FormatError):
        load_network(path)


def test_adam_state_roundtrip():
    opt = ad.Adam(lr=0.1)
    params = {"w": RNG.normal(size=(3, 3)).copy()}
    opt.step(params, {"w": RNG.normal(size=(3, 3))})
    opt.step(params, {"w": RNG.normal(size=(3, 3))})
    clone = ad.Adam(lr=0.1)
    clone.load_state(opt.state_arrays())
    assert clone.t == opt.t
    g = {"w": RNG.normal(size=(3, 3))}
    p1 = {"w": params["w"].copy()}
    p2 = {"w": params["w"].copy()}
    opt.step(p1, {"w": g["w"].copy()})
    clone.step(p2, {"w": g["w"].copy()})
    assert np.array_equal(p1["w"], p2["w"])


# -- seeding -----------------------------------------------------------


def test_build_is_seed_deterministic():
    a = build_encoder(SMALL, seed=3)
    b = build_encoder(SMALL, seed=3)
    c = build_encoder(SMALL, seed=4)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_three_networks_draw_independent_streams():
    cfg = NetworkConfig(image_size=32, width_scale=0.1, latent_dim=8)
    enc, critic = build_encoder(cfg, seed=0), build_critic(cfg, seed=0)
    assert not np.array_equal(
        enc.params["c1.w"].ravel()[:16], critic.params["c1.w"].ravel()[:16]
    )
