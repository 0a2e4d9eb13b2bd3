import json

import numpy as np
import pytest
import torch

from consor.cir import (
    CirConfig,
    CirOutput,
    ContextualReasoner,
    export_attention_maps,
    extract_person_feature,
    extract_person_features,
    grid_sampling_ratio,
    write_attention_maps,
)
from consor.errors import AttentionNotRetainedError, ConfigError
from consor.model import PersonBox

DIM = 24
JOINT = 16
GRID = (3, 3)


def _reasoner(cfg: CirConfig = CirConfig(), seed: int = 0) -> ContextualReasoner:
    torch.manual_seed(seed)
    return ContextualReasoner(cfg, DIM, JOINT, GRID).double()


def _axis_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """``[n, size]`` linear-interpolation weights of each coordinate, clamped to the grid."""

    coords = np.clip(coords, 0.0, size - 1.0)
    low = np.floor(coords).astype(int)
    high = np.minimum(low + 1, size - 1)
    frac = coords - low
    rows = np.arange(len(coords))
    weights = np.zeros((len(coords), size))
    np.add.at(weights, (rows, low), 1 - frac)
    np.add.at(weights, (rows, high), frac)
    return weights


def _roi_oracle(field: np.ndarray, box, bins: int = 3) -> np.ndarray:
    """Mean of evenly spaced bilinear samples, half-pixel aligned, sub-cell boxes at their centre."""

    gh, gw, _ = field.shape
    x0, y0, x1, y1 = box[0] * gw, box[1] * gh, box[2] * gw, box[3] * gh
    if (x1 - x0) * (y1 - y0) < 1.0:
        x0 = x1 = (x0 + x1) / 2
        y0 = y1 = (y0 + y1) / 2
    n_samples = bins * grid_sampling_ratio((gh, gw), bins)
    steps = (np.arange(n_samples) + 0.5) / n_samples
    wy = _axis_weights(y0 - 0.5 + steps * (y1 - y0), gh).mean(axis=0)
    wx = _axis_weights(x0 - 0.5 + steps * (x1 - x0), gw).mean(axis=0)
    return np.einsum("a,b,abk->k", wy, wx, field)


@pytest.mark.parametrize("grid", [(3, 3), (4, 5)])
def test_roi_align_matches_bilinear_oracle(grid):
    rng = np.random.default_rng(21)
    gh, gw = grid
    for _ in range(250):
        field = rng.normal(size=(gh, gw, 4))
        xs = np.sort(rng.uniform(0, 1, 2))
        ys = np.sort(rng.uniform(0, 1, 2))
        box = (xs[0], ys[0], xs[1], ys[1])
        states = torch.tensor(field.reshape(1, gh * gw, 4))
        got = extract_person_features(
            states, torch.tensor([box], dtype=torch.float64), torch.zeros(1, dtype=torch.long), grid
        )[0].numpy()
        assert np.allclose(got, _roi_oracle(field, box), atol=1e-6)


def test_sampling_ratio_follows_grid():
    assert grid_sampling_ratio((3, 3)) == 1
    assert grid_sampling_ratio((14, 14)) == 14
    assert grid_sampling_ratio((12, 12)) == 4
    assert grid_sampling_ratio((4, 5)) == 20


@pytest.mark.parametrize("grid", [(3, 3), (14, 14), (4, 5), (6, 6)])
def test_whole_image_box_is_grid_mean(grid):
    gen = torch.Generator().manual_seed(3)
    v_sn = torch.randn(grid[0] * grid[1], DIM, generator=gen, dtype=torch.float64)
    pooled = extract_person_feature(v_sn, PersonBox(0.0, 0.0, 1.0, 1.0), grid)
    assert torch.allclose(pooled, v_sn.mean(dim=0), atol=1e-5)


def test_centre_cell_box_reads_that_cell():
    # linear field, so the bin samples average back to the cell value
    v_sn = torch.arange(9 * 2, dtype=torch.float64).view(9, 2)
    pooled = extract_person_feature(v_sn, PersonBox(1 / 3, 1 / 3, 2 / 3, 2 / 3), GRID)
    assert torch.allclose(pooled, v_sn[4])


def test_tiny_box_collapses_to_its_centre():
    v_sn = torch.arange(9 * 2, dtype=torch.float64).view(9, 2)
    pooled = extract_person_feature(v_sn, PersonBox(0.4, 0.4, 0.6, 0.45), GRID)
    # centre (0.5, 0.425) of the image -> grid (1.5, 1.275) -> sample at (1.0, 0.775)
    expected = 0.225 * v_sn[1] + 0.775 * v_sn[4]
    assert torch.allclose(pooled, expected)


def test_interpersonal_reasoning_is_permutation_equivariant():
    reasoner = _reasoner()
    gen = torch.Generator().manual_seed(4)
    persons = torch.randn(1, 5, DIM, generator=gen, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        refined = reasoner.interpersonal_reason(persons)
        permuted = reasoner.interpersonal_reason(persons[:, perm])
    assert torch.allclose(permuted, refined[:, perm], atol=1e-6)


def _pair_inputs(seed: int = 5):
    gen = torch.Generator().manual_seed(seed)
    persons = torch.randn(3, DIM, generator=gen, dtype=torch.float64)
    v_sn = torch.randn(9, DIM, generator=gen, dtype=torch.float64)
    cls = torch.randn(JOINT, generator=gen, dtype=torch.float64)
    return persons, v_sn, cls


def test_third_person_informs_pair_with_interpersonal_layer():
    reasoner = _reasoner(CirConfig(n_interpersonal=1))
    persons, v_sn, cls = _pair_inputs()
    moved = persons.clone()
    moved[2] += 1.0
    with torch.no_grad():
        before = reasoner.pair_features(persons, v_sn, cls, [(0, 1)])
        after = reasoner.pair_features(moved, v_sn, cls, [(0, 1)])
    assert (before - after).abs().max().item() > 0


@pytest.mark.parametrize("cfg", [CirConfig(n_interpersonal=0), CirConfig(use_interpersonal=False)])
def test_third_person_is_ignored_without_interpersonal_layer(cfg):
    reasoner = _reasoner(cfg)
    persons, v_sn, cls = _pair_inputs()
    moved = persons.clone()
    moved[2] += 1.0
    with torch.no_grad():
        before = reasoner.pair_features(persons, v_sn, cls, [(0, 1)])
        after = reasoner.pair_features(moved, v_sn, cls, [(0, 1)])
    assert torch.equal(before, after)


def test_zero_gate_weights_average_pair_and_global_feature():
    reasoner = _reasoner()
    with torch.no_grad():
        reasoner.gate_u.weight.zero_()
        reasoner.gate_u.bias.zero_()
        reasoner.gate_clip.weight.zero_()
    gen = torch.Generator().manual_seed(6)
    u_bar = torch.randn(4, DIM, generator=gen, dtype=torch.float64)
    cls = torch.randn(4, JOINT, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        fused = reasoner.global_context_fuse(u_bar, cls)
        g = reasoner.clip_cls_proj(cls)
    assert torch.allclose(fused, (u_bar + g) / 2)


def test_ablation_switches():
    persons, v_sn, cls = _pair_inputs()
    no_gcf = _reasoner(CirConfig(use_global_fusion=False))
    u_bar = torch.randn(2, DIM, dtype=torch.float64)
    assert torch.equal(no_gcf.global_context_fuse(u_bar, torch.randn(2, JOINT, dtype=torch.float64)), u_bar)
    assert not hasattr(no_gcf, "clip_cls_proj")

    no_context = _reasoner(CirConfig(use_context=False))
    assert len(no_context.decoder) == 0
    p_i, p_j = persons[:1], persons[1:2]
    features, weights = no_context.contextual_decode(p_i, p_j, v_sn[None])
    assert weights == []
    assert torch.allclose(features, no_context.pair_proj(torch.cat([p_i, p_j], dim=1)))


def test_reasoning_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ContextualReasoner(CirConfig(num_heads=5), DIM, JOINT, GRID)
    with pytest.raises(ConfigError):
        CirConfig(n_context=-1)


def _batch_inputs():
    gen = torch.Generator().manual_seed(8)
    v_sn = torch.randn(2, 9, DIM, generator=gen, dtype=torch.float64)
    cls = torch.randn(2, JOINT, generator=gen, dtype=torch.float64)
    boxes = [
        torch.tensor([[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]], dtype=torch.float64),
        torch.tensor([[0.0, 0.0, 0.4, 0.4], [0.3, 0.3, 0.9, 0.9], [0.6, 0.1, 1.0, 0.5]], dtype=torch.float64),
    ]
    pairs = torch.tensor([[0, 0, 1], [1, 2, 0], [1, 0, 1]])
    return v_sn, cls, boxes, pairs


def test_batched_forward_matches_per_image_reasoning():
    reasoner = _reasoner()
    v_sn, cls, boxes, pairs = _batch_inputs()
    with torch.no_grad():
        batched = reasoner(v_sn, cls, boxes, pairs).pair_features
        for row, (img, i, j) in enumerate(pairs.tolist()):
            persons = extract_person_features(
                v_sn[img : img + 1], boxes[img], torch.zeros(len(boxes[img]), dtype=torch.long), GRID
            )
            single = reasoner.pair_features(persons, v_sn[img], cls[img], [(i, j)])
            assert torch.allclose(batched[row], single[0], atol=1e-10)


def test_attention_export(tmp_path):
    reasoner = _reasoner(CirConfig(n_context=2))
    v_sn, cls, boxes, pairs = _batch_inputs()
    with torch.no_grad():
        output = reasoner(v_sn, cls, boxes, pairs, retain_attention=True)
    assert len(output.cross_attention) == 2
    assert output.cross_attention[0].shape == (3, 8, 2, 9)

    maps = export_attention_maps(output, 1, "img-b", (2, 0), GRID)
    assert maps["pair"] == [2, 0]
    assert maps["grid"] == [3, 3]
    assert len(maps["layers"]) == 2 and len(maps["layers"][0]) == 8
    for head in maps["layers"][1]:
        for query in head:
            assert sum(query) == pytest.approx(1.0)

    path = tmp_path / "attn" / "img-b_2-0.json"
    write_attention_maps(maps, path)
    assert json.loads(path.read_text())["image_id"] == "img-b"

    with pytest.raises(AttentionNotRetainedError):
        export_attention_maps(CirOutput(output.pair_features, None), 0, "img-a", (0, 1), GRID)
