import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encfree.errors import ContractError, FormatError, InputError, StructureError
from encfree.numerics import save_elvt
from encfree.videotok import (ResolutionPolicy, Tier, TokenKind, TokenRecord, TokenStream, VideoClip,
                              decode_text, detokenize_layout, load_clip, read_ppm, resize_to_policy,
                              resized_size, stream_from_jsonl, stream_to_jsonl, text_ids, tokenize,
                              tokens_per_frame, write_ppm)


def clip_of(T, H, W, seed=0):
    return VideoClip(np.random.default_rng(seed).uniform(0, 1, (T, 3, H, W)))


def test_patch_size_is_derived_from_published_totals():
    # 19232 tokens over 32 frames at the 672 edge -> 601 per frame = 24^2 + 24 + 1
    assert 19232 // 32 == 601 == tokens_per_frame(24, 24)
    assert 672 // 24 == ResolutionPolicy().patch_size == 28
    assert tokens_per_frame(8, 8) == 73


def test_resize_examples():
    policy = ResolutionPolicy()
    assert resize_to_policy(clip_of(1, 672, 672), policy, Tier.HIGH).frames.shape[2:] == (672, 672)
    # 1344 wide x 756 tall -> 672 x 378, 378 = 13.5 patches rounds to 14 rows
    assert resized_size(756, 1344, 672) == (392, 672)
    small = clip_of(1, 224, 224)
    out = resize_to_policy(small, ResolutionPolicy.preset("low224"), Tier.LOW)
    assert np.array_equal(out.frames, small.frames)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 3000), st.sampled_from([224, 336, 672]))
def test_resized_edges_are_patch_multiples_within_limit(h, w, edge):
    rh, rw = resized_size(h, w, edge)
    assert rh % 28 == 0 and rw % 28 == 0
    assert 28 <= rh <= edge and 28 <= rw <= edge


def test_zero_area_frame_is_input_error():
    with pytest.raises(InputError):
        resized_size(0, 10, 672)
    with pytest.raises(InputError):
        VideoClip(np.zeros((1, 3, 0, 4)))


def test_pixels_outside_unit_range_rejected():
    with pytest.raises(InputError):
        VideoClip(np.full((1, 3, 2, 2), 1.5))


def test_tokenize_counts():
    assert len(tokenize(clip_of(1, 672, 672))) == 601
    assert len(tokenize(clip_of(2, 224, 224))) == 2 * 73
    tiny = tokenize(clip_of(1, 28, 28))
    assert [r.kind for r in tiny.records] == [TokenKind.FRAME_MARK, TokenKind.PATCH, TokenKind.LINE_MARK]


def test_tokenize_requires_patch_aligned_frames():
    with pytest.raises(ContractError):
        tokenize(clip_of(1, 30, 28))


def test_patch_payload_is_raster_ordered_pixels():
    clip = clip_of(1, 8, 12)
    stream = tokenize(clip, ResolutionPolicy(patch_size=4))
    patch = [r for r in stream.records if r.kind is TokenKind.PATCH and (r.r, r.c) == (1, 2)][0]
    assert np.array_equal(patch.payload, clip.frames[0][:, 4:8, 8:12].reshape(-1))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=4))
def test_token_count_formula_and_layout_roundtrip(grids):
    p = 4
    stream = TokenStream([], p)
    for t, (rows, cols) in enumerate(grids):
        stream.extend(tokenize(clip_of(1, rows * p, cols * p, seed=t), ResolutionPolicy(patch_size=p)), t)
    assert len(stream) == sum(r * c + r + 1 for r, c in grids)
    assert detokenize_layout(stream) == list(grids)


def test_detokenize_examples():
    assert detokenize_layout(tokenize(clip_of(1, 672, 672))) == [(24, 24)]
    assert detokenize_layout(tokenize(clip_of(1, 224, 448))) == [(8, 16)]
    assert detokenize_layout(TokenStream()) == []


def test_detokenize_rejects_malformed_order():
    recs = tokenize(clip_of(1, 56, 56)).records
    swapped = [recs[0], recs[2], recs[1]] + recs[3:]
    with pytest.raises(StructureError):
        detokenize_layout(TokenStream(swapped))
    with pytest.raises(StructureError):
        detokenize_layout(TokenStream([TokenRecord(TokenKind.PATCH, 0, 0, 0)]))
    with pytest.raises(StructureError):
        detokenize_layout(TokenStream(recs[:-1]))  # last row never closed


def test_jsonl_roundtrip(tmp_path):
    stream = tokenize(clip_of(2, 8, 8), ResolutionPolicy(patch_size=4))
    stream.records.append(TokenRecord(TokenKind.TEXT, -1, payload=97))
    stream_to_jsonl(stream, tmp_path / "s.jsonl")
    back = stream_from_jsonl(tmp_path / "s.jsonl", 4)
    assert len(back) == len(stream)
    for a, b in zip(stream.records, back.records):
        assert (a.kind, a.t, a.r, a.c) == (b.kind, b.t, b.r, b.c)
        if a.kind is TokenKind.PATCH:
            assert np.array_equal(a.payload, b.payload)
    assert back.records[-1].payload == 97


def test_ppm_and_clip_loading(tmp_path):
    frames = np.round(np.random.default_rng(0).uniform(0, 1, (2, 3, 6, 5)) * 255) / 255
    d = tmp_path / "frames"
    d.mkdir()
    for i, f in enumerate(frames):
        write_ppm(d / f"{i:03d}.ppm", f)
    assert np.allclose(read_ppm(d / "000.ppm"), frames[0])
    clip = load_clip(d)
    assert clip.T == 2 and np.allclose(clip.frames, frames)
    save_elvt(tmp_path / "c.elvt", frames)
    assert load_clip(tmp_path / "c.elvt").frames.shape == (2, 3, 6, 5)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "bad.ppm")
    with pytest.raises(InputError):
        load_clip(tmp_path / "missing")


def test_text_is_byte_level():
    assert text_ids("ab") == [97, 98]
    assert decode_text(text_ids("a red square") + [256, 257]) == "a red square"
