import io
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptive_semcom import link
from adaptive_semcom.link import Streams, cpp_user, run_frames, train_forward
from adaptive_semcom.policy import PRUNE_RATIOS, prune_l1, thermometer


def frames(images, users=2):
    x = torch.as_tensor(images)
    return x.reshape(len(x) // users, users, *x.shape[1:])


def test_complexify_examples():
    assert np.allclose(link.complexify(np.array([1.0, 2, 3, 4])), [1 + 3j, 2 + 4j])
    assert not link.complexify(np.zeros(6)).any()
    with pytest.raises(ValueError):
        link.complexify(np.zeros(5))
    t = torch.randn(3, 10)
    assert torch.equal(link.decomplexify(link.complexify(t)), t)


@given(arrays(np.float64, st.integers(1, 40).map(lambda n: 2 * n), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=100, deadline=None)
def test_complexify_round_trip(row):
    assert np.array_equal(link.decomplexify(link.complexify(row)), row)


@given(arrays(np.complex128, st.integers(1, 64), elements=st.complex_numbers(max_magnitude=1e3)),
       st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_power_normalize_properties(payload, c):
    out, degenerate = link.power_normalize(payload)
    if np.sum(np.abs(payload) ** 2) == 0:
        assert degenerate and not out.any()
        return
    assert not degenerate
    assert abs(np.mean(np.abs(out) ** 2) - 1) < 1e-9
    assert np.allclose(link.power_normalize(c * payload)[0], out, atol=1e-9)
    assert np.allclose(link.power_normalize(out)[0], out, atol=1e-9)


def scatter_oracle(rows_hat, selection, prune_mask, C=16):
    paired = np.zeros((C // 2, 128))
    r = 0
    for i, on in enumerate(selection):
        if on:
            k = 0
            for j in range(128):
                if prune_mask[r, j] == 0:
                    paired[i, j] = rows_hat[r][k]
                    k += 1
            r += 1
    z = np.zeros((C, 64))
    z[: C // 2] = paired[:, :64]
    z[C // 2:] = paired[:, 64:]
    return z.reshape(C, 8, 8)


def test_zero_pad_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        hot = np.zeros(9, dtype=int)
        hot[rng.integers(0, 9)] = 1
        sel = thermometer(hot)
        c = int(sel.sum())
        a = PRUNE_RATIOS[rng.integers(0, 5)]
        rows = rng.standard_normal((c, 128))
        packed, mask = prune_l1(rows, a, even=True)
        got = link.zero_pad_features(packed, sel, mask)
        assert np.array_equal(got, scatter_oracle(packed, sel, mask))
    assert not link.zero_pad_features(np.zeros((0, 128)), np.zeros(8), np.zeros((0, 128))).any()
    with pytest.raises(ValueError):
        link.zero_pad_features(np.zeros((2, 128)), np.ones(8), np.zeros((2, 128)))


def test_zero_pad_lossless_full_selection():
    z = np.random.default_rng(1).standard_normal((16, 8, 8))
    paired = link.to_paired(torch.as_tensor(z)).numpy()
    assert np.array_equal(link.zero_pad_features(paired, np.ones(8), np.zeros((8, 128))), z)


def test_cpp_user_examples():
    assert cpp_user(8, 128, 0) == 0.5
    assert cpp_user(0, 128, 29) == 0
    assert cpp_user(8, 64, 29) == pytest.approx(8 * 93 / 2048)
    assert abs(cpp_user(5.65, 0.59 * 128, 29) - 0.288) <= 1e-3


def test_rate_lengths_table():
    lh, ratio = link.rate_lengths(link.SystemConfig())
    assert lh.tolist() == [128, 102, 90, 76, 64]
    assert ratio[0] == 1.0 and ratio[4] == pytest.approx((64 + 29) / 128)


def test_streams_state_round_trip():
    s = Streams(3)
    state = s.get_state()
    a = torch.rand(4, generator=s.noise)
    s.set_state(state)
    assert torch.equal(a, torch.rand(4, generator=s.noise))
    assert not torch.equal(torch.rand(4, generator=Streams(3).channel), torch.rand(4, generator=Streams(4).channel))


def test_acquire_csi_modes():
    g = torch.Generator().manual_seed(0)
    H = link.ch.sample_channel(2, 2, g, (3,), torch.complex128)
    nv = link.ch.noise_var_for_snr(H, 10.0)
    Hp, e, s = link.acquire_csi(H, nv, 10.0, "perfect")
    assert torch.equal(Hp, H) and not e.any() and torch.all(s == 10)
    Hi, e, _ = link.acquire_csi(H, nv, 10.0, "imperfect", g)
    assert torch.all(e > 0) and not torch.equal(Hi, H)
    Hl, e, s = link.acquire_csi(H, nv, 10.0, "ls", g)
    assert torch.allclose(e, nv / 32)
    with pytest.raises(ValueError):
        link.acquire_csi(H, nv, 10.0, "oracle")


def test_noiseless_identity(small_system, images):
    x = frames(images)
    system = small_system.eval()
    x_hat, reps = run_frames(system, x, 10.0, Streams(0), noiseless=True, force_maps=8, force_ratio=0)
    ref = system.autoencode(x.reshape(-1, 3, 32, 32), *_cond(system, x))
    assert (x_hat.reshape(ref.shape) - ref).abs().max().item() < 1e-4
    assert all(r.cpp == 0.5 and r.c_hat == 8 and r.l_prime == 0 for r in reps)


def _cond(system, x):
    st = Streams(0)
    H = link.ch.sample_channel(system.cfg.antennas, system.cfg.users, st.channel, (x.shape[0],), torch.complex128)
    return link._csi(system.cfg, H, torch.full((x.shape[0],), 10.0, dtype=torch.float64), torch.float64)


def test_noiseless_pruned_frame_matches_masked_reference(small_system, images):
    x = frames(images)
    system = small_system.eval()
    x_hat, reps = run_frames(system, x, 10.0, Streams(0), noiseless=True, force_maps=8, force_ratio=4)
    assert all(r.cpp == pytest.approx(8 * (64 + 29) / 2048) and not r.degraded for r in reps)
    with torch.no_grad():
        o = train_forward(system, x, torch.full((x.shape[0],), 10.0), 1.0, Streams(0), noiseless=True,
                          force_maps=8, force_ratio=4)
    assert (o.x_hat - x_hat).abs().max().item() < 1e-6


def test_train_and_eval_frames_agree_noiseless(small_system, images):
    x = frames(images)
    system = small_system.eval()
    for maps, r in ((3, 1), (5, 2), (8, 3)):
        x_hat, _ = run_frames(system, x, 20.0, Streams(1), noiseless=True, force_maps=maps, force_ratio=r)
        with torch.no_grad():
            o = train_forward(system, x, torch.full((x.shape[0],), 20.0), 1.0, Streams(1), noiseless=True,
                              force_maps=maps, force_ratio=r)
        assert (o.x_hat - x_hat).abs().max().item() < 1e-6


def test_cpp_reports_match_formula_over_draws(small_system):
    system = small_system.eval()
    rng = np.random.default_rng(2)
    x = torch.as_tensor(rng.uniform(0, 1, (250, 2, 3, 32, 32)))
    recs = []
    for snr in (0.0, 25.0):
        _, reps = run_frames(system, x, snr, Streams(int(snr)))
        recs += reps
    assert len(recs) == 1000
    for r in recs:
        n = 128
        lp = 29 if (r.c_hat and r.ratio > 0) else 0
        assert r.cpp == (r.c_hat * (r.l_hat + lp) / 2048 if r.c_hat else 0.0)
        assert r.l_prime == lp
        if r.c_hat:
            pruned = math.floor(r.ratio * n + 1e-9)
            pruned += (n - pruned) % 2
            assert r.l_hat == n - pruned and r.l_hat % 2 == 0
        assert sum(r.selection) == r.c_hat and r.selection == sorted(r.selection)


def test_empty_selection_frame(small_system, images):
    system = small_system.eval()
    x = frames(images)
    x_hat, reps = run_frames(system, x, 10.0, Streams(0), force_maps=0)
    assert all(r.cpp == 0.0 and r.c_hat == 0 and not r.degraded for r in reps)
    zero = system.decoder(torch.zeros(x.shape[0] * 2, 16, 8, 8, dtype=torch.float64), *_cond(system, x))
    assert torch.allclose(x_hat.reshape(zero.shape), zero)


def test_policy_modes_and_determinism(small_system, images):
    system = small_system.eval()
    x = frames(images)
    a = run_frames(system, x, 5.0, Streams(4))
    b = run_frames(system, x, 5.0, Streams(4))
    assert torch.equal(a[0], b[0]) and [r.to_json() for r in a[1]] == [r.to_json() for r in b[1]]
    run_frames(system, x, 5.0, Streams(4), policy="argmax")
    with pytest.raises(ValueError):
        run_frames(system, x, 5.0, Streams(4), policy="greedy")


def test_csi_modes_share_channel_draws(small_system, images):
    system = small_system.eval()
    x = frames(images)
    p = run_frames(system, x, 15.0, Streams(5), csi_mode="perfect", force_maps=8, force_ratio=0)[1]
    i = run_frames(system, x, 15.0, Streams(5), csi_mode="imperfect", force_maps=8, force_ratio=0)[1]
    assert [r.snr_db for r in p] == [r.snr_db for r in i]
    assert np.mean([r.psnr for r in i]) <= np.mean([r.psnr for r in p]) + 0.5


def test_mask_recovery_forces_count():
    bits = np.zeros((2, 8), dtype=np.uint8)
    bits[0, :3] = 1
    bits[1, :5] = 1
    post = np.arange(16, dtype=float).reshape(2, 8) - 8
    fixed, degraded = link._recover_mask(bits, np.array([True, False]), post, 3)
    assert degraded and fixed.sum(1).tolist() == [3, 3]
    assert fixed[1].tolist() == [1, 1, 1, 0, 0, 0, 0, 0]
    same, deg = link._recover_mask(bits[:1], np.array([True]), post[:1], 3)
    assert not deg and np.array_equal(same, bits[:1])


def test_trace_round_trip(small_system, images):
    _, reps = run_frames(small_system.eval(), frames(images), 10.0, Streams(0))
    buf = io.StringIO()
    link.write_traces(reps, buf)
    buf.seek(0)
    back = link.read_traces(buf)
    assert [link.RateReport(**d) for d in back] == reps


def test_train_forward_outputs(small_system, images):
    x = frames(images)
    o = train_forward(small_system, x, torch.tensor([0.0, 10.0, 20.0, 25.0]), 2.0, Streams(0))
    B = x.shape[0] * 2
    assert o.x_hat.shape == x.shape
    assert o.soft_count.shape == (B,) and o.soft_entropy.shape == (B, 16)
    assert torch.all(o.cpp <= 0.5) and torch.all(o.count <= 8)
    assert torch.allclose(o.soft_count, (o.soft1[:, :-1].cumsum(-1)).sum(-1))
    with pytest.raises(ValueError):
        train_forward(small_system, x.reshape(1, 8, 3, 32, 32), 0.0, 1.0)


def test_rate_gradient_reaches_policies_through_relaxation(small_system, images):
    x = frames(images)
    o = train_forward(small_system, x, torch.full((4,), 10.0), 2.0, Streams(0))
    (o.soft_len_ratio * o.soft_count).mean().backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in small_system.p1.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in small_system.p2.parameters())
    small_system.zero_grad()
    o = train_forward(small_system, x, torch.full((4,), 10.0), 2.0, Streams(0), force_maps=4, force_ratio=2)
    assert not (o.soft_len_ratio * o.soft_count).requires_grad


def test_ablation_fingerprints():
    cfgs = [link.SystemConfig(), link.SystemConfig(entropy=False), link.SystemConfig(attention=False),
            link.SystemConfig(csi_feedback=False), link.SystemConfig(pruning=False),
            link.SystemConfig(fixed_maps=6, pruning=False)]
    fps = [c.fingerprint() for c in cfgs]
    assert fps[0] == "full" and len(set(fps)) == len(fps)
    for c in cfgs[1:]:
        c.width = 16
        s = link.SemComSystem(c).double().eval()
        _, reps = run_frames(s, torch.rand(1, 2, 3, 32, 32, dtype=torch.float64), 10.0, Streams(0))
        if c.fixed_maps:
            assert all(r.c_hat == 6 for r in reps)
        if not c.pruning:
            assert all(r.ratio == 0 for r in reps)
