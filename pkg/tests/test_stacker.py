import pytest
import torch
from hypothesis import given, settings, strategies as st

from depix.alignment import IdentityAligner
from depix.errors import ContractError
from depix.imaging import BICUBIC, identity_coords, resample, translation_coords, upsample_grid, warp
from depix.stacker import StackCache, SupportWindowSpec, build_stack, build_stacks, window_indices


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


class RecordingAligner:
    """Returns a fixed translation and remembers which frames it was shown."""

    input_resolution = 16
    checksum = "recording"

    def __init__(self, dx=0.5):
        self.dx = dx
        self.calls = []

    def __call__(self, a, b):
        self.calls.append((a.clone(), b.clone()))
        return translation_coords(8, self.dx, 0).expand(a.shape[0], -1, -1, -1).clone()


def test_window_indices_default_window():
    assert window_indices(50, SupportWindowSpec(2, 5), 100) == [40, 45, 50, 55, 60]


def test_window_indices_clamped_at_start_and_end():
    assert window_indices(3, SupportWindowSpec(2, 5), 100) == [0, 0, 3, 8, 13]
    assert window_indices(97, SupportWindowSpec(2, 5), 100) == [87, 92, 97, 99, 99]


def test_window_indices_single_frame():
    assert window_indices(7, SupportWindowSpec(0, 5), 100) == [7]


@settings(max_examples=60, deadline=None)
@given(w=st.integers(0, 7), d=st.integers(1, 10), n=st.integers(1, 200), data=st.data())
def test_window_indices_properties(w, d, n, data):
    c = data.draw(st.integers(0, n - 1))
    spec = SupportWindowSpec(w, d)
    idx = window_indices(c, spec, n)
    assert len(idx) == spec.F and idx[w] == c
    assert idx == sorted(idx) and all(0 <= i < n for i in idx)
    if c - w * d >= 0 and c + w * d < n:
        assert all(idx[w + k] - c == c - idx[w - k] == k * d for k in range(w + 1))


def test_window_indices_rejects_out_of_range_center():
    with pytest.raises(ContractError):
        window_indices(10, SupportWindowSpec(), 10)


def test_stack_has_fifteen_channels_and_unpacks():
    frames = rand(70, 3, 16, 16)
    s = build_stack(frames, 50, SupportWindowSpec(2, 5), IdentityAligner(16), clip_id="x")
    assert s.channels.shape == (15, 128, 128)
    assert s.source_indices == [40, 45, 50, 55, 60]
    hr = resample(frames, 128, 128, BICUBIC)
    for idx, block in s.unpack():
        assert torch.equal(block, hr[idx])


def test_single_frame_stack_is_the_bicubic_upsample():
    frames = rand(10, 3, 16, 16, seed=2)
    s = build_stack(frames, 4, SupportWindowSpec(0, 5), RecordingAligner())
    assert torch.equal(s.channels, resample(frames[4], 128, 128, BICUBIC))


def test_support_blocks_are_warped_with_predicted_grids():
    frames = rand(30, 3, 16, 16, seed=3)
    aligner = RecordingAligner(dx=0.75)
    spec = SupportWindowSpec(1, 4)
    s = build_stack(frames, 10, spec, aligner)
    hr = resample(frames, 128, 128, BICUBIC)
    grid = upsample_grid(translation_coords(8, 0.75, 0), 128)
    blocks = dict(s.unpack())
    assert torch.equal(blocks[10], hr[10])
    for j in (6, 14):
        assert torch.allclose(blocks[j], warp(hr[j], grid).clamp(0, 1), atol=1e-6)
    # pairs are fed (center, support): A is the target, B the frame being warped
    a, b = aligner.calls[0]
    assert all(torch.equal(x, frames[10]) for x in a)
    assert {tuple(x.flatten()[:4].tolist()) for x in b} == {tuple(frames[j].flatten()[:4].tolist()) for j in (6, 14)}


def test_clamped_duplicates_of_the_center_stay_unwarped():
    frames = rand(20, 3, 16, 16, seed=4)
    s = build_stack(frames, 0, SupportWindowSpec(2, 5), RecordingAligner(dx=1.0))
    hr0 = resample(frames[0], 128, 128, BICUBIC)
    assert s.source_indices[:3] == [0, 0, 0]
    for k in range(3):
        assert torch.equal(s.channels[3 * k:3 * k + 3], hr0)


def test_static_clip_stack_is_constant_across_blocks():
    frame = rand(3, 16, 16, seed=5)
    frames = frame.expand(20, -1, -1, -1).clone()
    s = build_stack(frames, 10, SupportWindowSpec(2, 3), IdentityAligner(16))
    blocks = s.channels.reshape(5, 3, 128, 128)
    assert (blocks - blocks[2]).abs().max() <= 0.02


def test_resolution_mismatch_with_aligner():
    with pytest.raises(ContractError):
        build_stack(rand(10, 3, 8, 8), 3, SupportWindowSpec(), IdentityAligner(16))


def test_batched_stacks_equal_single_stacks():
    frames = rand(25, 3, 16, 16, seed=6)
    spec = SupportWindowSpec(2, 2)
    aligner = RecordingAligner(0.25)
    batch = build_stacks(frames, [0, 7, 24], spec, aligner, batch_size=3)
    for n, c in enumerate([0, 7, 24]):
        assert torch.allclose(batch[n], build_stack(frames, c, spec, aligner).channels, atol=1e-6)


def test_stack_cache_hits_and_keys(tmp_path):
    frames = rand(12, 3, 16, 16, seed=7)
    cache = StackCache(tmp_path)
    spec = SupportWindowSpec(1, 2)
    aligner = RecordingAligner(0.5)
    first = cache.stacks("clip", frames, [3, 4], spec, aligner)
    n_calls = len(aligner.calls)
    again = cache.stacks("clip", frames, [3, 4], spec, aligner)
    assert torch.equal(first, again) and len(aligner.calls) == n_calls
    cache.stacks("clip", frames, [3], SupportWindowSpec(1, 3), aligner)
    assert len(aligner.calls) > n_calls
    assert len(list(tmp_path.glob("*.pt"))) == 3


def test_identity_grid_helper_consistency():
    # identity aligner grids are exactly the identity field
    g = IdentityAligner(16)(rand(2, 3, 16, 16), rand(2, 3, 16, 16))
    assert torch.equal(g[1], identity_coords(8))
